"""Central-difference gradient checking against the tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import ContractError, Tensor, no_grad

# gradients below this magnitude are compared in absolute terms
REL_FLOOR = 1e-5


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    worst_index: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"gradcheck {verdict}: max rel err {self.max_rel_error:.3e} over {self.n_checked} entries (tol {self.tol:g})"


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` with central differences.

    ``f`` closes over ``params`` and is re-evaluated after each in-place
    perturbation.  With ``samples`` set, that many (tensor, index) entries
    are drawn uniformly over all parameter elements instead of checking all.
    """
    if isinstance(params, Tensor):
        params = [params]
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ContractError(f"finite_difference_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    entries = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if samples is not None and samples < len(entries):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(entries), size=samples, replace=False)
        entries = [entries[j] for j in sorted(pick)]

    worst, worst_at = 0.0, None
    with no_grad():
        for i, idx in entries:
            p = params[i]
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = f().item()
            p.data[idx] = orig - h
            fm = f().item()
            p.data[idx] = orig
            numeric = (fp - fm) / (2 * h)
            err = relative_error(float(analytic[i][idx]), numeric)
            if err > worst:
                worst, worst_at = err, (i,) + tuple(idx)
    return GradCheckReport(worst, len(entries), tol, worst_at)
