"""Finite-difference verification of analytic gradients.

Run in float64. Inputs are expected to stay clear of activation kink
points (|v - kink| > 10*eps); callers sample accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError
from .tensor import Tape, Tensor, backward

__all__ = ["GradCheckEntry", "GradCheckReport", "grad_check"]


@dataclass
class GradCheckEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol

    def table(self) -> str:
        lines = [f"{'param':<28}{'index':>8}{'analytic':>16}{'numeric':>16}{'rel_err':>12}"]
        for e in self.entries:
            lines.append(f"{e.param:<28}{e.index:>8}{e.analytic:>16.8e}{e.numeric:>16.8e}{e.rel_err:>12.3e}")
        lines.append(f"max_rel_err={self.max_rel_err:.3e}")
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the scalar loss from ``params`` on every call.
    With ``max_entries`` set, that many coordinates per parameter are
    sampled (by ``rng``) instead of sweeping all of them.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ParameterError("grad_check requires float64 parameters")
        p.requires_grad = True
        p.zero_grad()

    tape = Tape()
    with tape:
        loss = fn()
    backward(tape, loss, params=params)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    tape.clear()

    if rng is None:
        rng = np.random.default_rng(0)

    entries: list[GradCheckEntry] = []
    max_err = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        size = flat.size
        if max_entries is not None and size > max_entries:
            idxs = rng.choice(size, size=max_entries, replace=False)
        else:
            idxs = np.arange(size)
        name = p.name or f"param{pi}"
        for idx in idxs:
            idx = int(idx)
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = fn().item()
            flat[idx] = orig - eps
            f_minus = fn().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[pi].reshape(-1)[idx])
            err = _rel_err(a, numeric)
            entries.append(GradCheckEntry(name, idx, a, numeric, err))
            max_err = max(max_err, err)
    return GradCheckReport(max_rel_err=max_err, entries=entries)
