"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
    """One in-place AdamW update.

    ``params`` and ``grads`` map names to arrays; a name whose grad is None is
    skipped entirely (its moments are left untouched). Returns ``state``.
    """
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeMismatch(f"{name}: optimizer state does not match param shape")
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


class AdamW:
    """Optimizer over a ``{name: Tensor}`` mapping."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self):
        adamw_step(
            {n: t.data for n, t in self.params.items()},
            {n: t.grad for n, t in self.params.items()},
            self.state, self.lr, self.betas, self.eps, self.weight_decay,
        )
