"""Break date estimation from refined slope matrices or their factors, a
per-unit sup-F test for a break, and sequential detection of several
breaks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import CoefSet, DimensionError, PanelData, SingularDesignError
from .hac import KernelConfig
from .ife import ConvergenceError, fit_ife_hetero, unit_sandwich

log = logging.getLogger(__name__)

FLAT_TOL = 1e-10
DEFAULT_CRITICAL = 15.37
DEFAULT_EPSILON = 0.15


class DegenerateFactorError(ValueError):
    """A factor row has zero norm and cannot be normalized."""

    def __init__(self, t: int, j: int):
        super().__init__(f"zero factor row at period {t}, block {j}")
        self.t = t
        self.j = j


@dataclass(frozen=True)
class BreakResult:
    """``t1_hat`` is the number of pre-break periods (the last pre-break
    period in 1-based counting); ``profile[s - 2]`` is the objective at s."""

    t1_hat: int
    profile: np.ndarray
    method: str
    flat: bool = False


@dataclass(frozen=True)
class SupFResult:
    f_nt: float
    per_unit: np.ndarray
    candidate_break: int
    epsilon: float
    critical_value: float
    reject: bool
    skipped: int = 0
    argmax_unit: int = -1
    per_unit_break: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def _slope_stack(theta_dot) -> np.ndarray:
    """(p, N, T) array of the slope blocks, intercept dropped."""
    thetas = theta_dot.thetas if isinstance(theta_dot, CoefSet) else tuple(theta_dot)
    slopes = thetas[1:]
    if not slopes:
        raise DimensionError("break objective needs at least one slope block")
    return np.stack([np.asarray(s, dtype=float) for s in slopes])


def _split_ssr(a: np.ndarray, s: int) -> float:
    """Within-segment sum of squares along the last axis for a split at s."""
    pre, post = a[..., :s], a[..., s:]
    return float(
        np.sum((pre - pre.mean(axis=-1, keepdims=True)) ** 2)
        + np.sum((post - post.mean(axis=-1, keepdims=True)) ** 2)
    )


def break_objective(theta_dot, s: int) -> float:
    """Average within-segment variation of the slope matrices for a split
    after period ``s`` (intercept excluded), normalized by pNT."""
    stack = _slope_stack(theta_dot)
    p, n, t_len = stack.shape
    if not 2 <= s <= t_len - 1:
        raise ValueError(f"split {s} outside [2, {t_len - 1}]")
    return _split_ssr(stack, s) / (p * n * t_len)


def _argmin_profile(profile: np.ndarray, method: str) -> BreakResult:
    flat = bool(np.ptp(profile) < FLAT_TOL)
    idx = 0 if flat else int(np.argmin(profile))
    return BreakResult(t1_hat=idx + 2, profile=profile, method=method, flat=flat)


def estimate_break(theta_dot) -> BreakResult:
    """Minimize :func:`break_objective` over s = 2..T-1 (smallest s on ties)."""
    stack = _slope_stack(theta_dot)
    p, n, t_len = stack.shape
    if t_len < 4:
        raise DimensionError("need at least 4 periods")
    profile = np.array([_split_ssr(stack, s) for s in range(2, t_len)]) / (p * n * t_len)
    return _argmin_profile(profile, "slope_matrix")


def normalized_factor_rows(factors) -> np.ndarray:
    """Stack the unit-normalized factor rows of every slope block, (T, sum r_j)."""
    blocks = []
    for j, pair in enumerate(factors.pairs[1:], start=1):
        if pair.rank == 0:
            continue
        norms = np.linalg.norm(pair.v, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise DegenerateFactorError(int(zero[0]) + 1, j)
        blocks.append(pair.v / norms[:, None])
    if not blocks:
        raise ValueError("all slope blocks have rank 0")
    return np.concatenate(blocks, axis=1)


def estimate_break_sv(factors) -> BreakResult:
    """Break estimate from the normalized right singular vectors of the
    slope blocks; requires every slope rank to be at most 2."""
    ranks = factors.ranks[1:]
    if max(ranks, default=0) > 2:
        raise ValueError(f"singular-vector break estimator needs ranks <= 2, got {ranks}")
    v = normalized_factor_rows(factors).T  # (r, T)
    t_len = v.shape[1]
    if t_len < 4:
        raise DimensionError("need at least 4 periods")
    profile = np.array([_split_ssr(v, s) for s in range(2, t_len)]) / t_len
    return _argmin_profile(profile, "singular_vector")


def trimmed_range(t_len: int, epsilon: float) -> range:
    """Candidate breaks T1 with eps*T <= T1 <= (1 - eps)*T."""
    lo = math.ceil(epsilon * t_len - 1e-12)
    hi = math.floor((1.0 - epsilon) * t_len + 1e-12)
    return range(lo, hi + 1)


def _unit_covariances(panel: PanelData, fit, kernel: KernelConfig, leverage: str):
    """Per-unit sandwich covariances S^-1 Omega S^-1 / T of the unit slopes."""
    s_ii, omega, _ = unit_sandwich(panel, fit, kernel, leverage)
    s_inv = np.linalg.inv(s_ii)
    return s_inv @ omega @ s_inv / panel.t_len


def supf_test(
    panel: PanelData,
    r0: int,
    epsilon: float = DEFAULT_EPSILON,
    critical_value: float = DEFAULT_CRITICAL,
    kernel: KernelConfig | None = None,
    tol: float = 1e-6,
    max_iter: int = 500,
    leverage: str = "hc3",
) -> SupFResult:
    """Largest per-unit sup-F statistic for a single slope break.

    For every candidate T1 the unit-specific slopes are estimated on each
    side with common factors, and
    ``F_i(T1) = (T - 2p)/(pT) * d' V^{-1} d`` where d is the pre/post slope
    difference and V the sum of the two sandwich covariances; T V estimates
    the asymptotic variance of sqrt(T) d.
    """
    kernel = kernel or KernelConfig()
    n, t_len = panel.shape
    p = panel.p
    if not 0 < epsilon <= 0.5:
        raise ValueError("epsilon must lie in (0, 0.5]")
    if p < 1:
        raise ValueError("sup-F test needs at least one regressor")
    if math.ceil(epsilon * t_len) < p + 2:
        raise DimensionError(
            f"trimmed segments too short: ceil(eps*T)={math.ceil(epsilon * t_len)} < p+2={p + 2}"
        )
    cands = trimmed_range(t_len, epsilon)
    if len(cands) == 0:
        raise DimensionError(f"no candidate break for T={t_len}, epsilon={epsilon}")
    per_unit = np.full(n, -np.inf)
    per_unit_break = np.full(n, -1, dtype=int)
    skipped = 0
    scale = (t_len - 2 * p) / (p * t_len)
    warm = {0: None, 1: None}
    for t1 in cands:
        try:
            parts = []
            for side, (a, b) in enumerate(((0, t1), (t1, t_len))):
                sub = panel.periods(a, b)
                fit = fit_ife_hetero(sub, r0, tol=tol, max_iter=max_iter, f_init=warm[side])
                if r0:
                    warm[side] = np.vstack([fit.f_hat, fit.f_hat[-1:]]) if side == 0 else fit.f_hat[1:]
                parts.append((fit.thetas, _unit_covariances(sub, fit, kernel, leverage)))
        except (SingularDesignError, DimensionError, np.linalg.LinAlgError) as exc:
            log.debug("skipping candidate %d: %s", t1, exc)
            skipped += 1
            warm = {0: None, 1: None}
            continue
        d = parts[0][0] - parts[1][0]
        v = parts[0][1] + parts[1][1]
        stat = scale * np.einsum("np,np->n", d, np.linalg.solve(v, d[..., None])[..., 0])
        better = stat > per_unit
        per_unit = np.where(better, stat, per_unit)
        per_unit_break = np.where(better, t1, per_unit_break)
    if skipped == len(cands):
        raise DimensionError("every candidate break was skipped")
    if skipped:
        log.warning("sup-F skipped %d of %d candidate breaks", skipped, len(cands))
    unit = int(np.argmax(per_unit))
    f_nt = float(per_unit[unit])
    return SupFResult(
        f_nt=f_nt,
        per_unit=per_unit,
        candidate_break=int(per_unit_break[unit]),
        epsilon=epsilon,
        critical_value=critical_value,
        reject=bool(f_nt > critical_value),
        skipped=skipped,
        argmax_unit=unit,
        per_unit_break=per_unit_break,
    )


def sequential_breaks(
    panel: PanelData,
    r0: int,
    epsilon: float = DEFAULT_EPSILON,
    critical_value: float = DEFAULT_CRITICAL,
    max_b: int = 5,
    locate: Callable[[PanelData], int] | None = None,
    kernel: KernelConfig | None = None,
) -> list[int]:
    """Test, split at the estimated break, and recurse on both segments.

    Every segment keeps the full-sample minimum regime length
    h = ceil(epsilon * T): a segment is tested only if it is at least 2h
    long, and candidate breaks leave h periods on each side.  ``locate``
    maps a segment to its estimated break (number of pre-break periods); by
    default the penalized fit, refinement and :func:`estimate_break` are
    re-run on the segment.  Returns break positions relative to the full
    sample, sorted.
    """
    if max_b < 0:
        raise ValueError("max_b must be nonnegative")
    if not 0 < epsilon < 0.5:
        raise ValueError("epsilon must lie in (0, 0.5)")
    if locate is None:
        from .pipeline import locate_break

        locate = lambda seg: locate_break(seg).t1_hat
    h = math.ceil(epsilon * panel.t_len - 1e-12)
    breaks: list[int] = []
    pending = [(0, panel.t_len)]
    while pending and len(breaks) < max_b:
        start, stop = pending.pop(0)
        length = stop - start
        if length < 2 * h or h < panel.p + 2:
            log.info("segment [%d, %d) too short, skipped", start, stop)
            continue
        seg = panel.periods(start, stop)
        try:
            res = supf_test(seg, r0, h / length, critical_value, kernel=kernel)
        except (DimensionError, SingularDesignError, ConvergenceError) as exc:
            log.info("segment [%d, %d) not testable: %s", start, stop, exc)
            continue
        if not res.reject:
            continue
        t1 = min(max(int(locate(seg)), 1), length - 1)
        breaks.append(start + t1)
        pending.extend([(start, start + t1), (start + t1, stop)])
    return sorted(breaks)
