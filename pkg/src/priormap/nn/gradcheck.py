"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .layers import Parameter

# multiple of the unit round-off used to bound finite-difference and 32-bit noise
NOISE_FACTOR = 8.0


@dataclass
class GradCheckReport:
    rel_tol: float
    abs_tol: float = 0.0
    max_rel_error: dict[str, float] = field(default_factory=dict)
    max_abs_error: dict[str, float] = field(default_factory=dict)
    failures: list[tuple[str, int, float, float, float]] = field(default_factory=list)
    checked: int = 0
    resolved: int = 0

    @property
    def passed(self) -> bool:
        return self.checked > 0 and not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        status = "PASS" if self.passed else f"FAIL ({len(self.failures)} entries)"
        return (f"gradcheck {status}: {self.checked} entries ({self.resolved} above noise), "
                f"worst rel err {self.worst:.3e} (rel_tol {self.rel_tol:.0e}, abs_tol {self.abs_tol:.1e})")


def relative_error(analytic: float, numeric: float, floor: float = 1e-30) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def noise_tolerance(loss: float, h: float, grads: Sequence[np.ndarray]) -> float:
    """Absolute error attributable to round-off rather than to a wrong gradient.

    Two sources: the 64-bit central difference itself (``eps * |loss| / h``) and,
    when the analytic gradients were computed in lower precision, that
    precision's round-off relative to the largest gradient entry.
    """
    fd = NOISE_FACTOR * np.finfo(np.float64).eps * max(abs(loss), 1.0) / h
    scale = max((float(np.max(np.abs(g))) for g in grads if g.size), default=0.0)
    eps_a = max(np.finfo(g.dtype).eps if np.issubdtype(g.dtype, np.floating) else 0.0
                for g in grads)
    return max(fd, NOISE_FACTOR * eps_a * scale)


def grad_check(loss_fn: Callable[[bool], float],
               params: Sequence[Parameter] | Mapping[str, Parameter],
               rel_tol: float = 1e-6, samples: int | None = None, seed: int = 0,
               analytic: Sequence[np.ndarray] | None = None,
               abs_tol: float | None = None) -> GradCheckReport:
    """Compare analytic gradients with 64-bit central differences.

    ``loss_fn(backward)`` evaluates the loss from the current parameter values;
    with ``backward=True`` it must also leave fresh gradients in ``params``.
    ``samples`` entries are drawn uniformly over all parameter entries
    (``None`` checks everything). ``analytic`` may supply gradients computed
    elsewhere, e.g. by a 32-bit copy of the model.

    Entries whose gradient magnitude is at least ``abs_tol / rel_tol`` are
    judged by relative error (and counted in ``resolved``); smaller ones, whose
    relative error is dominated by round-off, must agree within ``abs_tol``
    (by default :func:`noise_tolerance`).
    """
    if isinstance(params, Mapping):
        names, params = list(params.keys()), list(params.values())
    else:
        params = list(params)
        names = [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        if p.value.dtype != np.float64:
            p.value = p.value.astype(np.float64)
    for p in params:
        p.grad = np.zeros_like(p.value)
    loss0 = float(loss_fn(True))
    if analytic is not None:
        raw = [np.asarray(g) for g in analytic]
        if [g.shape for g in raw] != [p.value.shape for p in params]:
            raise ValueError("analytic gradients do not match parameter shapes")
    else:
        raw = [p.grad.copy() for p in params]
    grads = [g.astype(np.float64) for g in raw]

    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    if samples is None or samples >= total:
        picks = np.arange(total)
    else:
        picks = np.sort(np.random.default_rng(seed).choice(total, size=samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    if abs_tol is None:
        # the smallest step (|theta| <= 1) has the largest round-off
        abs_tol = noise_tolerance(loss0, 1e-5, raw)
    report = GradCheckReport(rel_tol, abs_tol)
    for flat in picks:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[pi])
        p = params[pi]
        theta = p.value.flat[idx]
        h = 1e-5 * max(1.0, abs(theta))
        p.value.flat[idx] = theta + h
        up = loss_fn(False)
        p.value.flat[idx] = theta - h
        down = loss_fn(False)
        p.value.flat[idx] = theta
        numeric = (up - down) / (2 * h)
        a = float(grads[pi].flat[idx])
        err = relative_error(a, numeric)
        aerr = abs(a - numeric)
        name = names[pi]
        report.max_abs_error[name] = max(report.max_abs_error.get(name, 0.0), aerr)
        report.checked += 1
        if max(abs(a), abs(numeric)) * rel_tol >= abs_tol:
            report.resolved += 1
            report.max_rel_error[name] = max(report.max_rel_error.get(name, 0.0), err)
            if err > rel_tol:
                report.failures.append((name, idx, a, numeric, err))
        elif aerr > abs_tol:
            report.failures.append((name, idx, a, numeric, err))
    return report
