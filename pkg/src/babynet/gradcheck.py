"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .ops import record_branches
from .tensor import Tensor, backward, no_grad, precision, zero_grad


@dataclass
class GradCheckEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tol: float = 1e-2
    skipped_kinks: int = 0

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def per_parameter(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.name] = max(out.get(e.name, 0.0), e.rel_error)
        return out

    @property
    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.rel_error, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def summary(self) -> str:
        w = self.worst
        status = "PASS" if self.passed else "FAIL"
        if w is None:
            return f"{status}: no entries checked"
        return (
            f"{status}: {len(self.entries)} entries ({self.skipped_kinks} kink-straddling skipped), max relative error {self.max_rel_error:.3e} "
            f"(tol {self.tol:g}); worst {w.name}{list(w.index)} analytic={w.analytic:.6e} "
            f"numeric={w.numeric:.6e}"
        )


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps entries whose true gradient is near zero from dividing
    float32 rounding noise by a vanishing denominator.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-3,
    tol: float = 1e-2,
    num_samples: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
    numeric_dtype=np.float64,
    skip_kinks: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` to central differences.

    ``f`` must be deterministic and re-read parameter values on each call.
    With ``num_samples`` set, that many (parameter, index) pairs are drawn by
    first picking a parameter uniformly, then an index within it; otherwise
    every scalar is checked.

    The analytic gradient comes from the normal float32 path.  The central
    differences are evaluated with parameters and intermediates held in
    ``numeric_dtype`` so that round-off in ``f`` does not swamp the
    difference quotient; pass ``np.float32`` for a pure single-precision check.

    With ``skip_kinks``, an entry whose +eps and -eps evaluations take
    different ReLU branches is not a valid finite-difference sample: it is
    counted in ``skipped_kinks`` and, when sampling, replaced by a fresh draw.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-4, 1e-2] for float32, got {eps}")
    tensors = list(params.values())
    zero_grad(tensors)
    backward(f())
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    names = list(params)
    rng = np.random.default_rng(seed)

    def draw():
        n = names[rng.integers(len(names))]
        flat = int(rng.integers(params[n].size))
        return n, tuple(int(i) for i in np.unravel_index(flat, params[n].shape))

    if num_samples is None:
        picks = iter([(n, idx) for n in names for idx in np.ndindex(params[n].shape)])
        target = None
    else:
        picks = iter(draw, None)
        target = num_samples
    max_draws = None if target is None else 50 * target

    def evaluate():
        with record_branches() as masks:
            value = float(f().data)
        return value, masks

    report = GradCheckReport(tol=tol)
    originals = {name: p.data for name, p in params.items()}
    try:
        for name, p in params.items():
            p.data = originals[name].astype(numeric_dtype)
        with no_grad(), precision(numeric_dtype):
            for draws, (n, idx) in enumerate(picks, 1):
                p = params[n]
                orig = p.data[idx].copy()
                p.data[idx] = orig + eps
                fp, masks_p = evaluate()
                p.data[idx] = orig - eps
                fm, masks_m = evaluate()
                p.data[idx] = orig
                if skip_kinks and any(not np.array_equal(a, b) for a, b in zip(masks_p, masks_m)):
                    report.skipped_kinks += 1
                else:
                    numeric = (fp - fm) / (2 * eps)
                    a = float(analytic[n][idx])
                    report.entries.append(GradCheckEntry(n, idx, a, numeric, relative_error(a, numeric, floor)))
                if target is not None and (len(report.entries) >= target or draws >= max_draws):
                    break
    finally:
        for name, p in params.items():
            p.data = originals[name]
    return report
