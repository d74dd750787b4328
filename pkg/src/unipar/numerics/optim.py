"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from unipar.errors import NumericalError
from unipar.numerics.tensor import Tensor


@dataclass
class Moments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(param: np.ndarray, grad: np.ndarray, moments: Moments, lr: float,
               weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8,
               name: str = "<param>") -> None:
    """One in-place AdamW update of ``param``; advances ``moments.t``.

    Decay multiplies the parameter by ``1 - lr * weight_decay`` before the
    adaptive step and never enters the moment estimates.
    """
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite gradient in parameter {name!r}")
    beta1, beta2 = betas
    moments.t += 1
    t = moments.t
    moments.m *= beta1
    moments.m += (1.0 - beta1) * grad
    moments.v *= beta2
    moments.v += (1.0 - beta2) * grad * grad
    m_hat = moments.m / (1.0 - beta1 ** t)
    v_hat = moments.v / (1.0 - beta2 ** t)
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class AdamW:
    params: dict[str, Tensor]
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    state: dict[str, Moments] = field(default_factory=dict)
    # name prefix -> multiplier on the scheduled lr; first match wins
    lr_scales: dict[str, float] = field(default_factory=dict)

    def lr_for(self, name: str, lr: float) -> float:
        for prefix, factor in self.lr_scales.items():
            if name.startswith(prefix):
                return lr * factor
        return lr

    def step(self, lr: float) -> None:
        """Update every parameter that received a gradient this round.

        Parameters left out of the graph (grad is None) are skipped, so
        other datasets' heads neither decay nor drift on momentum.
        """
        live = [(k, p) for k, p in self.params.items() if p.requires_grad and p.grad is not None]
        # validate all first so a bad gradient aborts before any update
        for name, p in live:
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in parameter {name!r}")
        for name, p in live:
            mom = self.state.get(name)
            if mom is None:
                mom = self.state[name] = Moments(np.zeros_like(p.data), np.zeros_like(p.data))
            adamw_step(p.data, p.grad, mom, self.lr_for(name, lr), self.weight_decay, self.betas, self.eps, name)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
