"""Central finite differences, used as an independent check on backward()."""

from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, no_grad


def finite_diff_grad(fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Numeric gradient of scalar ``fn()`` w.r.t. each tensor in ``params``.

    ``fn`` must be deterministic and read the parameters through the tensors
    passed here; entries are perturbed in place and restored afterwards.
    """
    out = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            g = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(fn().data)
                flat[i] = orig - h
                down = float(fn().data)
                flat[i] = orig
                g[i] = (up - down) / (2.0 * h)
            out[name] = g.reshape(p.shape)
    return out


def analytic_grad(fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    backward(fn())
    return {name: (p.grad if p.grad is not None else np.zeros(p.shape)) for name, p in params.items()}


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps gradients that are zero by symmetry (a bias feeding a
    softmax, say) from turning finite-difference noise into a huge ratio.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, params, h: float = 1e-5) -> dict[str, float]:
    """Per-parameter relative error between backward() and finite differences."""
    ana = analytic_grad(fn, params)
    num = finite_diff_grad(fn, params, h)
    return {name: relative_error(ana[name], num[name]) for name in params}
