"""SGD-with-momentum and Adam over a :class:`~helixformer.nn.ParamSet`."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .nn import ParamSet


@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparams(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "betas": list(self.betas),
                "eps": self.eps, "step": self.step}


class Optimizer:
    kind = ""

    def __init__(self, params: ParamSet, lr: float, **hyper):
        self.params = params.trainable() if isinstance(params, ParamSet) else ParamSet(params)
        self.state = OptimizerState(kind=self.kind, lr=lr, **hyper)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def _grads(self) -> dict[str, np.ndarray]:
        grads = {}
        for name, p in self.params.items():
            if p.grad is None:
                raise PreconditionError(f"parameter {name} has no gradient")
            grads[name] = p.grad
        return grads

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = self._grads()
        self.state.step += 1
        for name, p in self.params.items():
            p.data = self._update(name, p.data, grads[name])
            p.grad = None

    def _update(self, name, value, grad):
        raise NotImplementedError

    def load_state(self, state: OptimizerState) -> None:
        if state.kind != self.kind:
            raise PreconditionError(f"cannot load {state.kind} state into {self.kind}")
        for name, buf in state.buffers.items():
            if name.split(":", 1)[1] not in self.params:
                raise PreconditionError(f"optimizer buffer {name} has no parameter")
        self.state = dataclasses.replace(state, buffers={k: np.array(v, copy=True) for k, v in state.buffers.items()})


class SGD(Optimizer):
    """Momentum SGD; weight decay is added to the gradient before momentum."""

    kind = "sgd-momentum"

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr, momentum=momentum, weight_decay=weight_decay)

    def _update(self, name, value, grad):
        s = self.state
        g = grad + s.weight_decay * value if s.weight_decay else grad
        if s.momentum:
            key = "velocity:" + name
            v = s.buffers.get(key)
            v = g.copy() if v is None else s.momentum * v + g
            s.buffers[key] = v
            g = v
        return value - s.lr * g


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def _update(self, name, value, grad):
        s = self.state
        b1, b2 = s.betas
        g = grad + s.weight_decay * value if s.weight_decay else grad
        m = s.buffers.get("m:" + name)
        v = s.buffers.get("v:" + name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        s.buffers["m:" + name] = m
        s.buffers["v:" + name] = v
        m_hat = m / (1 - b1 ** s.step)
        v_hat = v / (1 - b2 ** s.step)
        return (value - s.lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(value.dtype)


def step_lr(base_lr: float, epoch: int, decay_epochs, factor: float = 0.1) -> float:
    """Piecewise-constant schedule: multiply by ``factor`` once per passed milestone."""
    drops = sum(1 for e in decay_epochs if epoch >= e)
    return base_lr * factor ** drops
