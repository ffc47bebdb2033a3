"""Grayscale activation maps for one support/query pair."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .data import write_pgm
from .errors import DimensionError

HEATMAP_SIZE = 84
HEATMAP_NAMES = tuple(f"{stage}_{branch}.pgm" for stage in ("backbone", "rmp", "rep") for branch in ("support", "query"))


def channel_max(feature: np.ndarray) -> np.ndarray:
    """``C x H x W`` -> ``H x W`` by max over channels."""
    feature = np.asarray(feature)
    if feature.ndim != 3:
        raise DimensionError(f"heatmap expects a C x H x W map, got shape {feature.shape}")
    return feature.max(axis=0)


def to_gray8(plane: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 (round half up); a constant plane maps to all zeros."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    if not hi > lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    return np.floor((plane - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def upscale_nearest(pixels: np.ndarray, size: int = HEATMAP_SIZE) -> np.ndarray:
    h, w = pixels.shape
    rows = np.arange(size) * h // size
    cols = np.arange(size) * w // size
    return pixels[rows[:, None], cols[None, :]]


def heatmap_pixels(feature: np.ndarray, size: int = HEATMAP_SIZE) -> np.ndarray:
    return upscale_nearest(to_gray8(channel_max(feature)), size)


def pair_features(model, support_image: np.ndarray, query_image: np.ndarray) -> dict[str, np.ndarray]:
    """Backbone, RMP and REP maps of both branches for one image pair.

    A branch the variant leaves untouched (or a model with no HelixFormer)
    has no relation map, so its ``rmp`` entry is all zeros and its ``rep``
    entry is the unchanged backbone map.
    """
    model.eval()
    with T.no_grad(), T.default_dtype(model.config.dtype):
        images = model.prepare(np.stack([support_image, query_image]))
        feats = model.backbone(images)
        f_S, f_Q = T.take(feats, [0]), T.take(feats, [1])
        trace: dict = {}
        out_S, out_Q = model.helix(f_S, f_Q, trace=trace)
    maps = {"backbone_support": f_S.data[0], "backbone_query": f_Q.data[0]}
    for tag, branch, final in (("S", "support", out_S), ("Q", "query", out_Q)):
        rmp = trace.get("csrm_" + tag)
        maps[f"rmp_{branch}"] = rmp[0] if rmp is not None else np.zeros_like(maps[f"backbone_{branch}"])
        maps[f"rep_{branch}"] = final.data[0]
    return maps


def write_heatmaps(maps: dict[str, np.ndarray], out_dir, size: int = HEATMAP_SIZE) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in HEATMAP_NAMES:
        path = out_dir / name
        write_pgm(path, heatmap_pixels(maps[name[:-4]], size))
        written.append(path)
    return written
