"""Central finite-difference check of reverse-mode gradients.

Central differences are only an estimate of the derivative when ``f`` is
smooth over ``[x - h, x + h]``. ReLU-family ops are piecewise linear, so every
FD evaluation records their activation patterns; a stencil whose patterns
differ from the unperturbed point straddles a kink. With ``refine_kinks`` such
elements are re-checked with the step halved until the stencil stays
on one linear piece (down to ``min_step``).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, _state


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    kinks: dict = field(default_factory=dict)
    strict_max_rel_error: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def strict_worst(self) -> float:
        """Worst error using the nominal step everywhere, kinks included."""
        return max(self.strict_max_rel_error.values(), default=0.0)

    @property
    def num_kinks(self) -> int:
        return sum(self.kinks.values())

    @property
    def failures(self) -> list:
        return [n for n, e in self.max_rel_error.items() if not e <= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures


def relative_error(analytic, numeric, floor=1e-6):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero grads sane."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@contextlib.contextmanager
def _activation_patterns():
    prev = getattr(_state, "kink_patterns", None)
    _state.kink_patterns = patterns = []
    try:
        yield patterns
    finally:
        _state.kink_patterns = prev


def _evaluate(f):
    with _activation_patterns() as patterns:
        value = float(f().data)
    return value, patterns


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f, params, h=1e-3, tol=1e-4, max_elems=64, seed=0, floor=1e-6,
               refine_kinks=True, min_step=1e-7):
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` takes no arguments and returns a scalar tensor computed from the
    tensors in ``params`` (a ``{name: Tensor}`` mapping), which are perturbed
    in place and restored. At most ``max_elems`` randomly chosen elements per
    tensor are checked. Use 64-bit tensors; f must be deterministic.
    """
    rng = np.random.default_rng(seed)
    for t in params.values():
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    _, base = _evaluate(f)

    report = GradCheckReport(tol)
    for name, t in params.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        analytic = analytic.reshape(-1)
        flat = t.data.reshape(-1)
        picks = np.sort(rng.choice(flat.size, size=min(flat.size, max_elems), replace=False))
        worst = strict = 0.0
        kinks = 0
        for idx in picks:
            orig = flat[idx]
            step = h
            first = True
            while True:
                flat[idx] = orig + step
                fp, pp = _evaluate(f)
                flat[idx] = orig - step
                fm, pm = _evaluate(f)
                flat[idx] = orig
                err = relative_error(float(analytic[idx]), (fp - fm) / (2 * step), floor)
                smooth = _same_pattern(pp, base) and _same_pattern(pm, base)
                if first:
                    strict = max(strict, err)
                    kinks += not smooth
                    first = False
                if smooth or not refine_kinks or step / 2 < min_step:
                    break
                step /= 2
            worst = max(worst, err)
        report.max_rel_error[name] = worst
        report.strict_max_rel_error[name] = strict
        report.checked[name] = len(picks)
        report.kinks[name] = kinks
    return report
