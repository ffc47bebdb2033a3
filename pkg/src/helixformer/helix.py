"""Bidirectional cross-image attention between a support and a query feature map.

Each branch owns a query (``e``), key (``k``) and value (``v``) token
embedding plus a representation-enhancement block. For the support branch the
relation map is built from support queries against query-branch keys and
values; the query branch mirrors this. Both directions read the original
backbone features, so neither depends on the other's output.

Batches here are *pair* batches: row ``p`` of the support tensor goes with row
``p`` of the query tensor. Every forward also accepts optional gather indices
so unique images can be embedded once and expanded to pairs afterwards.
"""

from __future__ import annotations

import enum
import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor


class VariantKind(str, enum.Enum):
    QtoS = "qs"
    StoQ = "sq"
    AsymSQ = "asym-sq"
    AsymQS = "asym-qs"
    Symmetric = "sym"

    @classmethod
    def parse(cls, value) -> "VariantKind":
        if isinstance(value, cls):
            return value
        for member in cls:
            if value in (member.value, member.name):
                return member
        raise ConfigurationError(f"unknown variant {value!r}; expected one of {[m.value for m in cls]}")


# roles each branch needs per variant: (support roles, query roles, enhanced branches)
_LAYOUT = {
    VariantKind.Symmetric: ("ekv", "ekv", "SQ"),
    VariantKind.QtoS: ("e", "kv", "S"),
    VariantKind.StoQ: ("kv", "e", "Q"),
    VariantKind.AsymSQ: ("ekv", "ekv", "SQ"),
    VariantKind.AsymQS: ("ekv", "ekv", "SQ"),
}


# --------------------------------------------------------------------------
# token plumbing


def to_tokens(f: Tensor) -> Tensor:
    """``[B x] C x H x W`` -> ``[B x] HW x C``, row-major over (h, w)."""
    if f.ndim == 3:
        C, H, W = f.shape
        return T.transpose(T.reshape(f, (C, H * W)), (1, 0))
    B, C, H, W = f.shape
    return T.transpose(T.reshape(f, (B, C, H * W)), (0, 2, 1))


def from_tokens(t: Tensor, height: int, width: int) -> Tensor:
    """Inverse of :func:`to_tokens`."""
    if t.shape[-2] != height * width:
        raise DimensionError(f"{t.shape[-2]} tokens cannot form a {height}x{width} map")
    if t.ndim == 2:
        return T.reshape(T.transpose(t, (1, 0)), (t.shape[1], height, width))
    B, _, C = t.shape
    return T.reshape(T.transpose(t, (0, 2, 1)), (B, C, height, width))


class TokenEmbedding(Module):
    """C->C projection of every spatial token.

    ``conv``: 3x3 stride-1 pad-1 convolution without bias, then BatchNorm.
    ``fc``: one shared C x C linear map per token (a 1x1 convolution with bias).
    """

    def __init__(self, channels: int, rng: np.random.Generator, mode: str = "conv"):
        super().__init__()
        if mode not in ("conv", "fc"):
            raise ConfigurationError(f"unknown token embedding {mode!r}")
        self.mode = mode
        if mode == "conv":
            self.conv = Conv2d(channels, channels, 3, rng, padding=1)
            self.bn = BatchNorm2d(channels)
        else:
            self.proj = Linear(channels, channels, rng)

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim == 3:
            t = self(T.reshape(f, (1,) + f.shape))
            return T.reshape(t, t.shape[1:])
        if self.mode == "conv":
            return to_tokens(self.bn(self.conv(f)))
        return self.proj(to_tokens(f))


class REP(Module):
    """Mask backbone tokens by a relation map, LayerNorm, then a 1x1-conv MLP.

    The MLP is C->C->C with ReLU in between and no residual path.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(channels)
        self.fc0 = Linear(channels, channels, rng)
        self.fc1 = Linear(channels, channels, rng)

    def forward(self, f_tokens: Tensor, relation: Tensor) -> Tensor:
        x = self.norm(T.mul(f_tokens, relation))
        return self.fc1(T.relu(self.fc0(x)))


class Branch(Module):
    """Embeddings (any of e/k/v) and optional REP block of one branch."""

    def __init__(self, channels: int, roles: str, rng: np.random.Generator, embed: str, rep: bool):
        super().__init__()
        self.roles = roles
        for role in "ekv":
            if role in roles:
                setattr(self, role, TokenEmbedding(channels, rng, embed))
        self.rep = REP(channels, rng) if rep else None

    def embed(self, f: Tensor, role: str, idx=None) -> Tensor:
        tokens = getattr(self, role)(f)
        return tokens if idx is None else T.take(tokens, idx)


# --------------------------------------------------------------------------
# attention algebra


def attention_scores(K_other: Tensor, E_self: Tensor) -> Tensor:
    """Scores ``E_self @ K_other^T``: row i is the self-branch token i."""
    if K_other.shape[-1] != E_self.shape[-1]:
        raise DimensionError(f"channel mismatch between keys {K_other.shape} and queries {E_self.shape}")
    return T.matmul(E_self, T.transpose(K_other, _swap_last(K_other.ndim)))


def csrm(A: Tensor, V_other: Tensor, channels: int) -> Tensor:
    """Relation map ``softmax_rows(A / sqrt(channels)) @ V_other``."""
    P = T.softmax_rows(T.scale(A, 1.0 / math.sqrt(channels)))
    return T.matmul(P, V_other)


def multi_head(E_self: Tensor, K_other: Tensor, V_other: Tensor, heads: int) -> Tensor:
    """Split channels into ``heads`` groups, attend per group, concatenate back.

    Inputs are ``[B x] HW x C``; each head is scaled by sqrt(C / heads).
    """
    C = E_self.shape[-1]
    if heads < 1 or C % heads:
        raise ConfigurationError(f"{C} channels cannot be split into {heads} heads")
    squeeze = E_self.ndim == 2
    if squeeze:
        E_self, K_other, V_other = (T.reshape(t, (1,) + t.shape) for t in (E_self, K_other, V_other))
    B, L, _ = E_self.shape
    Lo = K_other.shape[1]
    d = C // heads

    def split(t, n):
        return T.transpose(T.reshape(t, (B, n, heads, d)), (0, 2, 1, 3))

    R = csrm(attention_scores(split(K_other, Lo), split(E_self, L)), split(V_other, Lo), d)
    R = T.reshape(T.transpose(R, (0, 2, 1, 3)), (B, L, C))
    return T.reshape(R, (L, C)) if squeeze else R


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _gather(t: Tensor, idx) -> Tensor:
    return t if idx is None else T.take(t, idx)


# --------------------------------------------------------------------------
# one HelixFormer layer


class HelixLayer(Module):
    def __init__(self, channels: int = 64, rng: np.random.Generator | None = None,
                 variant: VariantKind | str = VariantKind.Symmetric, heads: int = 2,
                 embed: str = "conv", rep: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.variant = VariantKind.parse(variant)
        if heads < 1 or channels % heads:
            raise ConfigurationError(f"{channels} channels cannot be split into {heads} heads")
        self.channels, self.heads, self.embed_mode, self.use_rep = channels, heads, embed, rep
        s_roles, q_roles, enhanced = _LAYOUT[self.variant]
        self.support = Branch(channels, s_roles, rng, embed, rep and "S" in enhanced)
        self.query = Branch(channels, q_roles, rng, embed, rep and "Q" in enhanced)

    def _enhance(self, own: Branch, other: Branch, f_own: Tensor, f_other: Tensor,
                 own_idx=None, other_idx=None, trace: dict | None = None, tag: str = ""):
        """Enhance ``f_own`` with values from the other branch; returns the paired result."""
        H, W = f_own.shape[-2:]
        E = own.embed(f_own, "e", own_idx)
        K = other.embed(f_other, "k", other_idx)
        V = other.embed(f_other, "v", other_idx)
        R = multi_head(E, K, V, self.heads)
        if trace is not None:
            trace["csrm_" + tag] = from_tokens(R, H, W).data
        if own.rep is None:
            out = from_tokens(R, H, W)
        else:
            f_tok = to_tokens(_gather(f_own, own_idx))
            out = from_tokens(own.rep(f_tok, R), H, W)
        if trace is not None:
            trace["rep_" + tag] = out.data
        return out

    def forward(self, f_S: Tensor, f_Q: Tensor, s_idx=None, q_idx=None, trace: dict | None = None):
        """Return enhanced ``(f_S_hat, f_Q_hat)``.

        With indices, ``f_S``/``f_Q`` hold unique maps and pair ``p`` is
        ``(f_S[s_idx[p]], f_Q[q_idx[p]])``; otherwise the inputs are already
        paired (or single ``C x H x W`` maps).
        """
        if f_S.shape[-3:] != f_Q.shape[-3:]:
            raise DimensionError(f"support/query feature mismatch {f_S.shape} vs {f_Q.shape}")
        single = f_S.ndim == 3
        if single:
            f_S, f_Q = T.reshape(f_S, (1,) + f_S.shape), T.reshape(f_Q, (1,) + f_Q.shape)
        S, Q, v = self.support, self.query, self.variant
        if v is VariantKind.Symmetric:
            out_S = self._enhance(S, Q, f_S, f_Q, s_idx, q_idx, trace, "S")
            out_Q = self._enhance(Q, S, f_Q, f_S, q_idx, s_idx, trace, "Q")
        elif v is VariantKind.QtoS:
            out_S = self._enhance(S, Q, f_S, f_Q, s_idx, q_idx, trace, "S")
            out_Q = _gather(f_Q, q_idx)
        elif v is VariantKind.StoQ:
            out_S = _gather(f_S, s_idx)
            out_Q = self._enhance(Q, S, f_Q, f_S, q_idx, s_idx, trace, "Q")
        elif v is VariantKind.AsymSQ:
            out_Q = self._enhance(Q, S, f_Q, f_S, q_idx, s_idx, trace, "Q")
            out_S = self._enhance(S, Q, f_S, out_Q, s_idx, None, trace, "S")
        else:
            out_S = self._enhance(S, Q, f_S, f_Q, s_idx, q_idx, trace, "S")
            out_Q = self._enhance(Q, S, f_Q, out_S, q_idx, None, trace, "Q")
        if single:
            out_S = out_S if out_S.ndim == 3 else T.reshape(out_S, out_S.shape[1:])
            out_Q = out_Q if out_Q.ndim == 3 else T.reshape(out_Q, out_Q.shape[1:])
        return out_S, out_Q

    def rmp_forward(self, f_S: Tensor, f_Q: Tensor):
        """Both relation maps ``(R_QS, R_SQ)`` as token matrices, from the same inputs."""
        S, Q = self.support, self.query
        R_QS = multi_head(S.embed(f_S, "e"), Q.embed(f_Q, "k"), Q.embed(f_Q, "v"), self.heads)
        R_SQ = multi_head(Q.embed(f_Q, "e"), S.embed(f_S, "k"), S.embed(f_S, "v"), self.heads)
        return R_QS, R_SQ


def embed_tokens(f: Tensor, branch: Branch):
    """``(E, K, V)`` token matrices of one branch (None for roles it lacks)."""
    return tuple(getattr(branch, r)(f) if r in branch.roles else None for r in "ekv")


def rep_enhance(f: Tensor, R: Tensor, rep: REP) -> Tensor:
    """Enhanced map ``MLP(Norm(f * R))`` with R given as HW x C tokens."""
    H, W = f.shape[-2:]
    return from_tokens(rep(to_tokens(f), R), H, W)


def rmp_forward(f_S: Tensor, f_Q: Tensor, layer: HelixLayer):
    return layer.rmp_forward(f_S, f_Q)


def helix_forward(f_S: Tensor, f_Q: Tensor, layer: HelixLayer):
    return layer(f_S, f_Q)


class HelixStack(Module):
    """``depth`` independently parameterised layers applied in sequence; depth 0 is the identity."""

    def __init__(self, depth: int = 1, channels: int = 64, rng: np.random.Generator | None = None, **layer_kw):
        super().__init__()
        if depth < 0:
            raise ConfigurationError(f"stack depth must be >= 0, got {depth}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.depth = depth
        for i in range(depth):
            setattr(self, f"layer{i}", HelixLayer(channels, rng, **layer_kw))

    @property
    def layers(self) -> list[HelixLayer]:
        return [getattr(self, f"layer{i}") for i in range(self.depth)]

    def forward(self, f_S: Tensor, f_Q: Tensor, s_idx=None, q_idx=None, trace: dict | None = None):
        if self.depth == 0:
            return _gather(f_S, s_idx), _gather(f_Q, q_idx)
        for i, layer in enumerate(self.layers):
            f_S, f_Q = layer(f_S, f_Q, s_idx, q_idx, trace if i == 0 else None)
            s_idx = q_idx = None
        return f_S, f_Q


def stack(f_S: Tensor, f_Q: Tensor, layers: Sequence[HelixLayer]):
    for layer in layers:
        f_S, f_Q = layer(f_S, f_Q)
    return f_S, f_Q


def helix_param_count(channels: int, variant="sym", embed: str = "conv", rep: bool = True) -> int:
    """Closed-form trainable parameter count of one layer."""
    s_roles, q_roles, enhanced = _LAYOUT[VariantKind.parse(variant)]
    C = channels
    per_embed = 9 * C * C + 2 * C if embed == "conv" else C * C + C
    per_rep = 2 * C + 2 * (C * C + C)
    n_rep = len(enhanced) if rep else 0
    return (len(s_roles) + len(q_roles)) * per_embed + n_rep * per_rep
