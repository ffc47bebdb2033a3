"""Episodes, dataset directories, the synthetic fine-grained generator, and file formats.

Dataset layout on disk::

    root/{base,val,novel}/<class_name>/<sample>.hxt   (or .ppm)

``.hxt`` files are raw little-endian tensors (see :func:`write_raw_tensor`).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConsistencyError, DataError, FormatError, PreconditionError
from .tensor import Tensor

SPLITS = ("base", "val", "novel")

# --------------------------------------------------------------------------
# raw tensor files

MAGIC = b"HXT1"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def encode_raw_tensor(array) -> bytes:
    if isinstance(array, Tensor):
        array = array.data
    array = np.asarray(array)
    code = _CODE_OF.get(array.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {array.dtype} for raw tensor")
    if array.ndim > 255:
        raise FormatError("rank too large")
    header = MAGIC + struct.pack("<BB", code, array.ndim) + b"\0\0"
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return header + dims + np.ascontiguousarray(array, dtype=_DTYPE_CODES[code]).tobytes()


def decode_raw_tensor(buf: bytes, where: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError(f"{where}: bad magic")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPE_CODES:
        raise FormatError(f"{where}: unknown dtype code {code}")
    if len(buf) < 8 + 4 * rank:
        raise FormatError(f"{where}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    dtype = _DTYPE_CODES[code]
    start = 8 + 4 * rank
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - start != need:
        raise FormatError(f"{where}: payload is {len(buf) - start} bytes, expected {need}")
    return np.frombuffer(buf, dtype=dtype, offset=start).reshape(dims).astype(dtype.newbyteorder("="))


def write_raw_tensor(path, array) -> None:
    Path(path).write_bytes(encode_raw_tensor(array))


def read_raw_tensor(path) -> np.ndarray:
    return decode_raw_tensor(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------
# netpbm images


def _pnm_header(buf: bytes, magic: bytes, where: str):
    if not buf.startswith(magic):
        raise DataError(f"{where}: not a {magic.decode()} file")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataError(f"{where}: malformed header")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise DataError(f"{where}: malformed header")
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DataError(f"{where}: bad dimensions or maxval")
    return width, height, maxval, pos + 1


def decode_ppm(buf: bytes, where: str = "<bytes>") -> np.ndarray:
    """P6 bytes -> float64 array ``3 x H x W`` in [0, 1]."""
    width, height, maxval, start = _pnm_header(buf, b"P6", where)
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * 3 * dtype.itemsize
    if len(buf) - start < need:
        raise DataError(f"{where}: truncated pixel data")
    pix = np.frombuffer(buf, dtype=dtype, count=width * height * 3, offset=start)
    return (pix.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64)) / maxval


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes(), str(path))


def write_ppm(path, image: np.ndarray) -> None:
    """``3 x H x W`` floats in [0, 1] -> 8-bit P6."""
    _, h, w = image.shape
    pix = np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pix.transpose(1, 2, 0).tobytes())


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    width, height, maxval, start = _pnm_header(buf, b"P5", str(path))
    if maxval > 255 or len(buf) - start < width * height:
        raise DataError(f"{path}: unsupported or truncated PGM")
    return np.frombuffer(buf, dtype=np.uint8, count=width * height, offset=start).reshape(height, width).copy()


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of ``C x H x W`` to ``C x size x size`` (half-pixel centres, edge clamp)."""
    _, h, w = image.shape
    if (h, w) == (size, size):
        return image.copy()

    def axis(n_in):
        pos = (np.arange(size) + 0.5) * (n_in / size) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


# --------------------------------------------------------------------------
# splits and episodes


@dataclass
class DatasetSplit:
    """Images per class for the base / val / novel class sets.

    Each class maps to an ``n x 3 x H x W`` float array; ``paths`` keeps the
    source file of every sample so episodes can be traced back.
    """

    base: dict[str, np.ndarray]
    val: dict[str, np.ndarray]
    novel: dict[str, np.ndarray]
    paths: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        seen: dict[str, str] = {}
        for split in SPLITS:
            for name in getattr(self, split):
                if name in seen:
                    raise ConsistencyError(f"class {name!r} appears in both {seen[name]} and {split}")
                seen[name] = split

    def part(self, split: str) -> dict[str, np.ndarray]:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return getattr(self, split)

    @property
    def image_shape(self) -> tuple[int, ...]:
        for split in SPLITS:
            for arr in getattr(self, split).values():
                return arr.shape[1:]
        raise DataError("dataset has no images")


@dataclass
class Episode:
    n_way: int
    k_shot: int
    support: np.ndarray          # (N*K, 3, H, W), class-major
    support_labels: np.ndarray   # (N*K,)
    query: np.ndarray            # (N*Q, 3, H, W), class-major
    query_labels: np.ndarray     # (N*Q,)
    classes: list[str]           # global class of each episode-local label
    support_refs: list[tuple[str, int]]
    query_refs: list[tuple[str, int]]


def sample_episode(classes: dict[str, np.ndarray], n_way: int, k_shot: int, query_per_class: int,
                   rng: np.random.Generator) -> Episode:
    """Draw an N-way K-shot task: classes, then samples, both without replacement."""
    names = sorted(classes)
    if n_way < 1 or k_shot < 1 or query_per_class < 0:
        raise PreconditionError(f"bad episode shape N={n_way} K={k_shot} Q={query_per_class}")
    if len(names) < n_way:
        raise DataError(f"need {n_way} classes, split has {len(names)}")
    need = k_shot + query_per_class
    chosen = [names[i] for i in rng.choice(len(names), size=n_way, replace=False)]
    sup, qry, sup_refs, qry_refs = [], [], [], []
    for name in chosen:
        pool = classes[name]
        if len(pool) < need:
            raise DataError(f"class {name!r} has {len(pool)} samples, episode needs {need}")
        pick = rng.choice(len(pool), size=need, replace=False)
        sup.append(pool[pick[:k_shot]])
        qry.append(pool[pick[k_shot:]])
        sup_refs += [(name, int(i)) for i in pick[:k_shot]]
        qry_refs += [(name, int(i)) for i in pick[k_shot:]]
    shape = next(iter(classes.values())).shape[1:]
    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        support=np.concatenate(sup) if sup else np.zeros((0,) + shape),
        support_labels=np.repeat(np.arange(n_way), k_shot),
        query=np.concatenate(qry) if query_per_class else np.zeros((0,) + shape),
        query_labels=np.repeat(np.arange(n_way), query_per_class),
        classes=chosen,
        support_refs=sup_refs,
        query_refs=qry_refs,
    )


def prototype_support(features: Tensor) -> Tensor:
    """Mean of K support maps: ``K x C x H x W`` -> ``C x H x W`` (or ``N x K x ...`` -> ``N x ...``)."""
    if features.ndim < 4 or features.shape[-4] == 0:
        raise PreconditionError(f"prototype needs K >= 1 maps, got shape {features.shape}")
    return T.reduce_mean(features, axis=features.ndim - 4)


# --------------------------------------------------------------------------
# loading


def _load_image(path: Path, image_size: int) -> np.ndarray:
    suffix = path.suffix.lower()
    try:
        if suffix == ".hxt":
            arr = read_raw_tensor(path)
        else:
            arr = resize_bilinear(read_ppm(path), image_size)
    except (FormatError, DataError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"{path}: expected a 3 x H x W image, got shape {arr.shape}")
    return arr


def load_dataset(root, image_size: int = 84) -> DatasetSplit:
    """Read ``root/{base,val,novel}/<class>/<sample>.{hxt,ppm}`` into memory.

    PPM images are scaled to [0, 1] and resized to ``image_size``; raw tensors
    are used as stored. Every split and class directory must be non-empty.
    """
    root = Path(root)
    parts: dict[str, dict[str, np.ndarray]] = {}
    paths: dict[str, list[str]] = {}
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            raise DataError(f"missing split directory {split_dir}")
        classes = {}
        for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in (".hxt", ".ppm"))
            if not files:
                raise DataError(f"class directory {class_dir} has no samples")
            images = [_load_image(f, image_size) for f in files]
            shapes = {im.shape for im in images}
            if len(shapes) != 1:
                raise DataError(f"{class_dir}: mixed image shapes {sorted(shapes)}")
            classes[class_dir.name] = np.stack(images)
            paths[class_dir.name] = [str(f) for f in files]
        if not classes:
            raise DataError(f"split directory {split_dir} is empty")
        parts[split] = classes
    return DatasetSplit(parts["base"], parts["val"], parts["novel"], paths)


def channel_stats(classes: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over every image of a split."""
    stacked = np.concatenate([v for _, v in sorted(classes.items())]).astype(np.float64)
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    return mean, np.where(std > 1e-12, std, 1.0)


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (images - mean[:, None, None]) / std[:, None, None]


# --------------------------------------------------------------------------
# synthetic fine-grained data


@dataclass
class SyntheticSpec:
    """Procedural dataset: genera share a silhouette, species differ only in a local glyph."""

    genera: int = 20
    species_per_genus: int = 4
    samples_per_species: int = 40
    image_size: int = 84
    part_size: int = 16
    max_rotation: float = 20.0       # degrees
    max_translation: float = 0.12    # fraction of the image side
    max_hue: float = 0.08            # fraction of a full hue turn
    max_part_shift: float = 0.0      # per-sample displacement of the part window, fraction of the side
    noise: float = 0.02
    split_genera: tuple[int, int, int] | None = None
    seed: int = 0

    def genus_split(self) -> tuple[int, int, int]:
        if self.split_genera is not None:
            split = tuple(int(x) for x in self.split_genera)
        else:
            val = max(1, round(self.genera * 0.2))
            split = (self.genera - 2 * val, val, val)
        if sum(split) != self.genera or min(split) < 1:
            raise PreconditionError(f"genus split {split} does not partition {self.genera} genera")
        return split


def _hue_matrix(turn: float) -> np.ndarray:
    """RGB rotation about the grey axis by ``turn`` of a full circle."""
    a = 2 * np.pi * turn
    c, s = np.cos(a), np.sin(a)
    k = 1.0 / 3.0
    r = np.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
        [k * (1 - c) + r * s, c + (1 - c) * k, k * (1 - c) - r * s],
        [k * (1 - c) - r * s, k * (1 - c) + r * s, c + (1 - c) * k],
    ])


class _Genus:
    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        n = spec.image_size
        self.background = rng.uniform(0.1, 0.9, 3)
        self.body = rng.uniform(0.1, 0.9, 3)
        self.accent = rng.uniform(0.1, 0.9, 3)
        yy, xx = np.mgrid[0:n, 0:n] + 0.5
        cx, cy = n / 2, n / 2
        theta = np.arctan2(yy - cy, xx - cx)
        radius = np.hypot(yy - cy, xx - cx)
        wobble = sum(rng.uniform(-0.15, 0.15) * np.cos(k * theta + rng.uniform(0, 2 * np.pi)) for k in (2, 3, 5))
        base_r = rng.uniform(0.30, 0.40) * n
        inside = radius < base_r * (1 + wobble)
        stripe_freq = rng.uniform(0.1, 0.3)
        stripe_dir = rng.uniform(0, np.pi)
        stripes = np.sin((xx * np.cos(stripe_dir) + yy * np.sin(stripe_dir)) * stripe_freq * 2 * np.pi) > 0.6
        canvas = np.empty((3, n, n))
        canvas[:] = self.background[:, None, None]
        body = np.where(stripes, 1, 0)[None] * self.accent[:, None, None] + np.where(stripes, 0, 1)[None] * self.body[:, None, None]
        canvas = np.where(inside[None], body, canvas)
        self.canvas = canvas
        p = spec.part_size
        # part window sits inside the silhouette, off-centre
        off = rng.uniform(-0.12, 0.12, 2) * n
        self.part_y = int(np.clip(round(cy + off[0] - p / 2), 0, n - p))
        self.part_x = int(np.clip(round(cx + off[1] - p / 2), 0, n - p))


def _species_glyph(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """A species is a blocky ``part x part`` ink mask plus an ink colour."""
    p = spec.part_size
    cells = 4
    grid = rng.random((cells, cells)) < 0.5
    grid[rng.integers(cells), rng.integers(cells)] = True
    ink = rng.uniform(0.0, 1.0, 3)
    rep = -(-p // cells)
    return np.kron(grid, np.ones((rep, rep), dtype=bool))[:p, :p], ink


@dataclass
class JitterDraw:
    rotation: float
    shift_x: float
    shift_y: float
    hue: float
    noise_seed: int
    part_dx: int = 0
    part_dy: int = 0


def draw_jitter(spec: SyntheticSpec, rng: np.random.Generator) -> JitterDraw:
    n = spec.image_size
    return JitterDraw(
        rotation=float(rng.uniform(-spec.max_rotation, spec.max_rotation)),
        shift_x=float(rng.uniform(-1, 1) * spec.max_translation * n),
        shift_y=float(rng.uniform(-1, 1) * spec.max_translation * n),
        hue=float(rng.uniform(-spec.max_hue, spec.max_hue)),
        noise_seed=int(rng.integers(2**31)),
        part_dx=int(round(rng.uniform(-1, 1) * spec.max_part_shift * n)),
        part_dy=int(round(rng.uniform(-1, 1) * spec.max_part_shift * n)),
    )


def render(canonical: np.ndarray, background: np.ndarray, jitter: JitterDraw, noise: float) -> np.ndarray:
    """Rotate/translate (nearest neighbour), hue-shift and add noise to a canonical image."""
    _, n, _ = canonical.shape
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    c = n / 2
    a = np.deg2rad(jitter.rotation)
    dx, dy = xx - c - jitter.shift_x, yy - c - jitter.shift_y
    sx = np.cos(a) * dx + np.sin(a) * dy + c
    sy = -np.sin(a) * dx + np.cos(a) * dy + c
    ix, iy = np.floor(sx).astype(int), np.floor(sy).astype(int)
    valid = (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n)
    out = np.empty_like(canonical)
    out[:] = background[:, None, None]
    out[:, valid] = canonical[:, iy[valid], ix[valid]]
    out = np.tensordot(_hue_matrix(jitter.hue), out, axes=1)
    if noise:
        out = out + np.random.default_rng(jitter.noise_seed).normal(0, noise, out.shape)
    return np.clip(out, 0.0, 1.0)


def part_window(spec: SyntheticSpec, genus: _Genus, jitter: JitterDraw) -> tuple[int, int]:
    """Top-left corner of the (possibly displaced) part window in canonical coordinates."""
    n, p = spec.image_size, spec.part_size
    y = int(np.clip(genus.part_y + jitter.part_dy, 0, n - p))
    x = int(np.clip(genus.part_x + jitter.part_dx, 0, n - p))
    return y, x


def part_footprint(spec: SyntheticSpec, genus: _Genus, jitter: JitterDraw) -> np.ndarray:
    """Boolean ``H x W`` mask of output pixels that sample the part window."""
    n, p = spec.image_size, spec.part_size
    y, x = part_window(spec, genus, jitter)
    marker = np.zeros((3, n, n))
    marker[:, y:y + p, x:x + p] = 1.0
    plain = JitterDraw(jitter.rotation, jitter.shift_x, jitter.shift_y, 0.0, 0)
    return render(marker, np.zeros(3), plain, 0.0)[0] > 0.5


class SyntheticWorld:
    """Deterministic genus/species definitions for a :class:`SyntheticSpec`."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.genera = [_Genus(spec, rng) for _ in range(spec.genera)]
        self.glyphs = [[_species_glyph(spec, rng) for _ in range(spec.species_per_genus)] for _ in self.genera]
        self.sample_rng = np.random.default_rng([spec.seed, 1])

    def canonical(self, genus: int, species: int, jitter: JitterDraw | None = None) -> np.ndarray:
        g = self.genera[genus]
        p = self.spec.part_size
        y, x = part_window(self.spec, g, jitter or JitterDraw(0.0, 0.0, 0.0, 0.0, 0))
        mask, ink = self.glyphs[genus][species]
        img = g.canvas.copy()
        img[:, y:y + p, x:x + p][:, mask] = ink[:, None]
        return img

    def sample(self, genus: int, species: int, jitter: JitterDraw) -> np.ndarray:
        return render(self.canonical(genus, species, jitter), self.genera[genus].background, jitter, self.spec.noise)

    @staticmethod
    def class_name(genus: int, species: int) -> str:
        return f"g{genus:03d}_s{species:02d}"


def generate_synthetic(spec: SyntheticSpec, root) -> Path:
    """Write the dataset tree under ``root`` as float32 raw tensors; returns ``root``."""
    root = Path(root)
    world = SyntheticWorld(spec)
    n_base, n_val, _ = spec.genus_split()
    for genus in range(spec.genera):
        split = "base" if genus < n_base else "val" if genus < n_base + n_val else "novel"
        for species in range(spec.species_per_genus):
            class_dir = root / split / world.class_name(genus, species)
            os.makedirs(class_dir, exist_ok=True)
            for i in range(spec.samples_per_species):
                jitter = draw_jitter(spec, world.sample_rng)
                img = world.sample(genus, species, jitter).astype(np.float32)
                write_raw_tensor(class_dir / f"{i:04d}.hxt", img)
    return root
