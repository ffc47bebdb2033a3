"""Conv-4 feature extractor and the relation-network scoring head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, PreconditionError
from .nn import ConvBlock, Linear, Module, count_params  # noqa: F401  (re-exported)
from .tensor import Tensor


@dataclass
class FeaturePair:
    f_S: Tensor
    f_Q: Tensor

    def __post_init__(self):
        if self.f_S.shape != self.f_Q.shape:
            raise DimensionError(f"feature pair shape mismatch {self.f_S.shape} vs {self.f_Q.shape}")


def backbone_output_size(image_size: int, pool_blocks: Sequence[int]) -> int:
    size = image_size
    for _ in pool_blocks:
        size //= 2
    return size


class Conv4Backbone(Module):
    """Four conv-BN-ReLU blocks; blocks listed in ``pool_blocks`` end in a 2x2 max pool.

    The default (pool after every block) maps 84x84 to 5x5.
    """

    def __init__(self, channels: int = 64, rng: np.random.Generator | None = None,
                 image_size: int = 84, pool_blocks: Sequence[int] = (0, 1, 2, 3), in_channels: int = 3):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.image_size = image_size
        self.in_channels = in_channels
        self.pool_blocks = tuple(pool_blocks)
        self.out_size = backbone_output_size(image_size, self.pool_blocks)
        if self.out_size < 1:
            raise DimensionError(f"{image_size}px input pools down to nothing with pools {self.pool_blocks}")
        cin = in_channels
        for i in range(4):
            setattr(self, f"block{i}", ConvBlock(cin, channels, rng, pool=i in self.pool_blocks))
            cin = channels

    def forward(self, images: Tensor) -> Tensor:
        squeeze = images.ndim == 3
        if squeeze:
            images = T.reshape(images, (1,) + images.shape)
        expected = (self.in_channels, self.image_size, self.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise DimensionError(f"backbone expects images of shape {expected}, got {images.shape[1:]}")
        x = images
        for i in range(4):
            x = getattr(self, f"block{i}")(x)
        return T.reshape(x, x.shape[1:]) if squeeze else x


class RelationHead(Module):
    """Scores a channel-concatenated (support, query) pair.

    conv(2C->C)-BN-ReLU-pool, conv(C->C)-BN-ReLU, global average pool,
    FC(C->C/2)-ReLU, FC(C/2->1).
    """

    def __init__(self, channels: int = 64, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.block0 = ConvBlock(2 * channels, channels, rng, pool=True)
        self.block1 = ConvBlock(channels, channels, rng, pool=False)
        hidden = max(channels // 2, 1)
        self.fc0 = Linear(channels, hidden, rng)
        self.fc1 = Linear(hidden, 1, rng)

    def forward(self, pair: Tensor) -> Tensor:
        """``P x 2C x H x W`` pairs -> ``P`` scores."""
        if pair.ndim != 4 or pair.shape[1] != 2 * self.channels:
            raise DimensionError(f"relation head expects P x {2 * self.channels} x H x W, got {pair.shape}")
        x = self.block1(self.block0(pair))
        x = T.reduce_mean(x, axis=(2, 3))
        x = self.fc1(T.relu(self.fc0(x)))
        return T.reshape(x, (x.shape[0],))

    def relation_score(self, fS_hat: Tensor, fQ_hat: Tensor) -> Tensor:
        """Score of a single pair of ``C x H x W`` maps (a scalar tensor)."""
        if fS_hat.shape != fQ_hat.shape:
            raise DimensionError(f"pair shape mismatch {fS_hat.shape} vs {fQ_hat.shape}")
        if fS_hat.ndim == 3:
            fS_hat = T.reshape(fS_hat, (1,) + fS_hat.shape)
            fQ_hat = T.reshape(fQ_hat, (1,) + fQ_hat.shape)
        return T.reshape(self(T.concat_channels(fS_hat, fQ_hat)), ())


def episode_logits(head: RelationHead, support_protos: Sequence[Tensor] | Tensor, query_feat: Tensor,
                   enhance=None) -> Tensor:
    """Relation scores of one query against every class prototype.

    ``enhance(f_S, f_Q) -> (f_S_hat, f_Q_hat)`` is applied per pair before the
    head; pass a HelixFormer stack here, or nothing for the plain baseline.
    """
    if isinstance(support_protos, Tensor):
        protos = support_protos
    else:
        if len(support_protos) == 0:
            raise PreconditionError("episode_logits needs at least one prototype")
        protos = T.concat([T.reshape(p, (1,) + p.shape) for p in support_protos], axis=0)
    n = protos.shape[0]
    if n < 2:
        raise PreconditionError(f"episode needs N >= 2 classes, got {n}")
    q = T.reshape(query_feat, (1,) + query_feat.shape) if query_feat.ndim == 3 else query_feat
    if q.shape[1:] != protos.shape[1:]:
        raise DimensionError(f"prototype shape {protos.shape[1:]} vs query {q.shape[1:]}")
    q = T.take(q, np.zeros(n, dtype=np.intp))
    if enhance is not None:
        protos, q = enhance(protos, q)
    return head(T.concat_channels(protos, q))
