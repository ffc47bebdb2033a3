"""Layer containers built on :mod:`helixformer.tensor`.

Modules register parameters, buffers and children by attribute assignment,
much like the familiar deep-learning frameworks, so parameter paths come out
as dotted strings (``backbone.block0.conv.weight``).
"""

from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


class ParamSet(Mapping):
    """Read-only view of named parameters in lexicographic path order."""

    def __init__(self, items: Mapping[str, Tensor] | None = None, trainable: Mapping[str, bool] | None = None):
        items = dict(items or {})
        self._items = {k: items[k] for k in sorted(items)}
        self._trainable = {k: bool((trainable or {}).get(k, True)) for k in self._items}

    def __getitem__(self, key: str) -> Tensor:
        return self._items[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def is_trainable(self, key: str) -> bool:
        return self._trainable[key]

    def trainable(self) -> "ParamSet":
        return ParamSet({k: v for k, v in self._items.items() if self._trainable[k]})

    def __or__(self, other: "ParamSet") -> "ParamSet":
        clash = set(self._items) & set(other._items)
        if clash:
            raise ValueError(f"duplicate parameter paths: {sorted(clash)}")
        return ParamSet({**self._items, **other._items}, {**self._trainable, **other._trainable})


def count_params(params: Mapping[str, Tensor]) -> int:
    """Number of trainable scalars."""
    if isinstance(params, ParamSet):
        return sum(params[k].size for k in params if params.is_trainable(k))
    return sum(p.size for p in params.values())


class Module:
    training = True

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_frozen", set())

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor):
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def parameters(self, prefix: str = "") -> ParamSet:
        items, trainable = {}, {}
        for prefix, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                items[prefix + name] = p
                trainable[prefix + name] = name not in mod._frozen
        return ParamSet(items, trainable)

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mod in self.named_modules():
            for name, b in mod._buffers.items():
                out[prefix + name] = b
        return {k: out[k] for k in sorted(out)}

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and buffers as plain arrays (not copies)."""
        state = {k: p.data for k, p in self.parameters().items()}
        state.update(self.buffers())
        return {k: state[k] for k in sorted(state)}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        buffers = {}
        for prefix, mod in self.named_modules():
            for name in mod._buffers:
                buffers[prefix + name] = (mod, name)
        expected = set(params) | set(buffers)
        if strict:
            missing = expected - set(state)
            extra = set(state) - expected
            if missing or extra:
                raise DimensionError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for key, value in state.items():
            if key in params:
                p = params[key]
                if p.shape != tuple(value.shape):
                    raise DimensionError(f"{key}: expected shape {p.shape}, got {value.shape}")
                p.data = np.array(value, dtype=p.dtype)
            elif key in buffers:
                mod, name = buffers[key]
                current = mod._buffers[name]
                current[...] = np.asarray(value, dtype=current.dtype).reshape(current.shape)

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        for _, mod in self.named_modules():
            for name, b in list(mod._buffers.items()):
                mod.register_buffer(name, b.astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0, bias: bool = False):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = _param(he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel))
        self.bias = _param(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = _param(he_normal(rng, (fout, fin), fin))
        self.bias = _param(np.zeros(fout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        dtype = T.get_default_dtype()
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class ConvBlock(Module):
    """conv3x3 (no bias) -> batch norm -> relu -> optional 2x2 max pool."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, pool: bool):
        super().__init__()
        self.pool = pool
        self.conv = Conv2d(cin, cout, 3, rng, padding=1)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        x = T.relu(self.bn(self.conv(x)))
        return T.max_pool2d(x) if self.pool else x
