"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> AdamState:
    """One bias-corrected Adam update with decay ``p <- p - lr * wd * p`` applied first.

    Parameters are updated in place (their ``data`` arrays are replaced).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError(
            f"adamw: {len(params)} params, {len(grads)} grads, {len(state.m)}/{len(state.v)} moment slots"
        )
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape or state.v[i].shape != p.shape:
            raise ShapeError(
                f"adamw: param {p.name or i} shape {p.shape}, grad {g.shape}, "
                f"moments {state.m[i].shape}/{state.v[i].shape}"
            )
        m = b1 * state.m[i] + (1 - b1) * g
        v = b2 * state.v[i] + (1 - b2) * (g * g)
        state.m[i], state.v[i] = m, v
        data = p.data * p.data.dtype.type(1 - lr * weight_decay) if weight_decay else p.data
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (data - lr * update).astype(p.data.dtype)
    return state


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``; return (grads, pre-clip norm)."""
    total = float(np.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads)))
    if np.isfinite(max_norm) and total > max_norm > 0:
        scale = max_norm / (total + 1e-6)
        return [g * g.dtype.type(scale) for g in grads], total
    return list(grads), total


class AdamW:
    """Stateful convenience wrapper around :func:`adamw_step`."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState.zeros_like(self.params)

    def step(self, grads: Mapping[Tensor, np.ndarray] | Sequence[np.ndarray], clip: float | None = None) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        if isinstance(grads, Mapping):
            ordered = [grads.get(p, np.zeros_like(p.data)) for p in self.params]
        else:
            ordered = list(grads)
        ordered, norm = clip_grad_norm(ordered, clip if clip else float("inf"))
        adamw_step(self.params, ordered, self.state, self.lr, self.betas, self.eps, self.weight_decay)
        return norm


def scheduled_lr(base: float, schedule: str, step: int, total: int) -> float:
    """Learning rate at ``step`` of ``total``: fixed, or cosine decay to 5% of ``base``."""
    if schedule == "constant" or total <= 1:
        return base
    return base * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * step / total)))
