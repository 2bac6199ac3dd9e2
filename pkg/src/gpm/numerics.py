"""Dense float64 helpers, parameter containers and SGD with momentum.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The
helpers here add the explicit shape checks the rest of the package relies on
(no broadcasting between operands of different shapes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

NORM_FLOOR = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """A vector that must be normalized has (near) zero length."""


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("matmul produced non-finite values")
    return out


def l2_normalize(v) -> np.ndarray:
    """Return ``v / ||v||``; raises :class:`DegenerateInputError` if ``||v|| < 1e-12``."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if not n >= NORM_FLOOR:
        raise DegenerateInputError(f"cannot normalize vector of norm {n:.3g}")
    return v / n


def l2_normalize_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise normalization.  Returns ``(normalized, norms)``; norms has shape (B, 1)."""
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    bad = ~(norms[:, 0] >= NORM_FLOOR)
    if np.any(bad):
        rows = np.flatnonzero(bad).tolist()
        raise DegenerateInputError(f"rows {rows[:10]} have norm below {NORM_FLOOR}")
    return m / norms, norms


def l2_normalize_rows_backward(y: np.ndarray, norms: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    # d(u/|u|) = (I - y y^T) / |u|
    return (grad_y - y * np.sum(y * grad_y, axis=1, keepdims=True)) / norms


@dataclass
class ParamTensor:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    momentum_buffer: np.ndarray = field(init=False)
    name: str = ""

    def __post_init__(self):
        self.value = as_matrix(self.value).copy()
        self.grad = np.zeros_like(self.value)
        self.momentum_buffer = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {g.shape} != value shape {self.value.shape}")
        self.grad += g

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


@dataclass
class SgdConfig:
    learning_rate: float = 0.05
    momentum: float = 0.95
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.3
    lr_decay_every_epochs: int = 5

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every_epochs < 1:
            raise ValueError("lr_decay_every_epochs must be a positive integer")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every_epochs)


def sgd_step(params: Iterable[ParamTensor], cfg: SgdConfig, epoch: int) -> None:
    """Classic momentum SGD with L2 weight decay folded into the gradient.

    ``v <- mu * v + (g + wd * w)``; ``w <- w - lr(epoch) * v``; grads are zeroed.
    """
    lr = cfg.lr_at(epoch)
    for p in params:
        if p.grad.shape != p.value.shape or p.momentum_buffer.shape != p.value.shape:
            raise DimensionError(f"{p.name}: inconsistent parameter shapes")
        d = p.grad + cfg.weight_decay * p.value if cfg.weight_decay else p.grad
        p.momentum_buffer *= cfg.momentum
        p.momentum_buffer += d
        p.value -= lr * p.momentum_buffer
        p.zero_grad()


def finite_diff_check(
    f: Callable[[ParamTensor], float],
    p: ParamTensor,
    eps: float = 1e-6,
    floor: float = 1e-4,
) -> float:
    """Compare ``p.grad`` against central differences of ``f``.

    ``p.grad`` must already hold the analytic gradient of ``f`` at ``p.value``.
    Per coordinate the error is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps round-off on near-zero partials from dominating.  Returns the max.
    ``p.value`` is restored exactly afterwards.
    """
    analytic = p.grad.copy()
    worst = 0.0
    flat = p.value.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        fp = f(p)
        flat[j] = orig - eps
        fm = f(p)
        flat[j] = orig
        num = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[j]
        err = abs(a - num) / max(abs(a), abs(num), floor)
        worst = max(worst, err)
    return worst
