"""Sequential testing K-means: per-regime slope profiles, K-means
clustering, per-group homogeneity statistics and the stopping rule that
fixes the number of groups."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc

from .core import CoefSet, DimensionError, PanelData
from .hac import HacWarning, KernelConfig, hac_covariance
from .ife import homogeneity_gamma

log = logging.getLogger(__name__)

__all__ = [
    "BetaProfiles",
    "GroupStructure",
    "GammaReport",
    "StkResult",
    "build_beta",
    "kmeans",
    "kmeans_objective",
    "hac_covariance",
    "group_gamma",
    "critical_value",
    "stk_run",
]


@dataclass(frozen=True)
class BetaProfiles:
    """Rows are unit slope paths for one regime: block j = 1..p, then time,
    scaled by 1/sqrt(T_l)."""

    regime: str
    betas: np.ndarray
    t_len_regime: int


@dataclass(frozen=True)
class GroupStructure:
    """``labels`` are 0-based group indices; ``centers`` is k x dim."""

    k: int
    labels: np.ndarray
    centers: np.ndarray
    objective: float = float("nan")

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


@dataclass(frozen=True)
class GammaReport:
    m: int
    per_group: np.ndarray
    gamma_m: float
    critical: float
    reject: bool


@dataclass(frozen=True)
class StkResult:
    k_hat: int
    groups: GroupStructure
    reports: tuple[GammaReport, ...]
    converged: bool


def build_beta(theta_dot, t1_hat: int) -> dict[str, BetaProfiles]:
    """Split the slope matrices after period ``t1_hat`` into scaled profiles."""
    thetas = theta_dot.thetas if isinstance(theta_dot, CoefSet) else tuple(theta_dot)
    slopes = [np.asarray(s, dtype=float) for s in thetas[1:]]
    if not slopes:
        raise DimensionError("need at least one slope block")
    t_len = slopes[0].shape[1]
    if not 2 <= t1_hat <= t_len - 2:
        raise ValueError(f"break {t1_hat} outside [2, {t_len - 2}]")
    t2 = t_len - t1_hat
    pre = np.concatenate([s[:, :t1_hat] for s in slopes], axis=1) / np.sqrt(t1_hat)
    post = np.concatenate([s[:, t1_hat:] for s in slopes], axis=1) / np.sqrt(t2)
    return {
        "pre": BetaProfiles("pre", pre, t1_hat),
        "post": BetaProfiles("post", post, t2),
    }


def _sq_dist(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = np.sum(x * x, axis=1)[:, None] - 2.0 * x @ centers.T + np.sum(centers * centers, axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_objective(x: np.ndarray, labels: np.ndarray) -> float:
    """(1/N) sum_i ||x_i - mean of its group||^2."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for k in np.unique(labels):
        pts = x[labels == k]
        total += float(np.sum((pts - pts.mean(axis=0)) ** 2))
    return total / x.shape[0]


def _plus_plus(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    d = _sq_dist(x, x[idx])[:, 0]
    for _ in range(1, m):
        total = d.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d / total))
        idx.append(nxt)
        d = np.minimum(d, _sq_dist(x, x[[nxt]])[:, 0])
    return x[idx].copy()


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int):
    m = centers.shape[0]
    labels = None
    for _ in range(max_iter):
        dist = _sq_dist(x, centers)
        new = np.argmin(dist, axis=1)
        counts = np.bincount(new, minlength=m)
        for k in np.flatnonzero(counts == 0):
            # move the point farthest from its own center into the empty cluster,
            # never emptying a singleton donor
            own = dist[np.arange(x.shape[0]), new]
            donors = counts[new] > 1
            far = int(np.argmax(np.where(donors, own, -1.0)))
            counts[new[far]] -= 1
            new[far] = k
            counts[k] = 1
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.stack([x[labels == k].mean(axis=0) for k in range(m)])
    return _transfer(x, labels, centers)


def _transfer(x: np.ndarray, labels: np.ndarray, centers: np.ndarray, max_pass: int = 100):
    """Single-point moves that lower the objective once centers are updated.

    Moving point i from k to l changes the sum of squares by
    n_l/(n_l+1) |x_i - c_l|^2 - n_k/(n_k-1) |x_i - c_k|^2, which can be
    negative at a Lloyd fixed point.
    """
    labels = labels.copy()
    centers = centers.copy()
    counts = np.bincount(labels, minlength=centers.shape[0]).astype(float)
    for _ in range(max_pass):
        moved = False
        for i in range(x.shape[0]):
            k = labels[i]
            if counts[k] <= 1:
                continue
            d = np.sum((centers - x[i]) ** 2, axis=1)
            gain = counts / (counts + 1.0) * d
            gain[k] = np.inf
            l = int(np.argmin(gain))
            if gain[l] < counts[k] / (counts[k] - 1.0) * d[k] * (1.0 - 1e-12):
                centers[k] = (counts[k] * centers[k] - x[i]) / (counts[k] - 1.0)
                centers[l] = (counts[l] * centers[l] + x[i]) / (counts[l] + 1.0)
                counts[k] -= 1.0
                counts[l] += 1.0
                labels[i] = l
                moved = True
        if not moved:
            break
    centers = np.stack([x[labels == k].mean(axis=0) for k in range(centers.shape[0])])
    return labels, centers


def _canonical(labels: np.ndarray, centers: np.ndarray):
    """Relabel groups by first appearance so equal partitions compare equal."""
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    return remap[labels], centers[order]


def kmeans(
    profiles,
    m: int,
    restarts: int = 20,
    seed: int = 0,
    max_iter: int = 200,
    init_labels: np.ndarray | None = None,
) -> GroupStructure:
    """Best of ``restarts`` Lloyd runs from k-means++ starts.

    ``profiles`` is a :class:`BetaProfiles` or an (N, d) array.  When
    ``init_labels`` is supplied, the partition it defines seeds one extra
    run.  Labels are canonicalized by order of first appearance.
    """
    x = np.asarray(getattr(profiles, "betas", profiles), dtype=float)
    n = x.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"number of groups {m} outside [1, {n}]")
    if m == 1:
        labels = np.zeros(n, dtype=int)
        centers = x.mean(axis=0, keepdims=True)
        return GroupStructure(1, labels, centers, kmeans_objective(x, labels))
    seeds = np.random.SeedSequence([int(seed), m]).spawn(restarts)
    starts = [_plus_plus(x, m, np.random.Generator(np.random.Philox(s))) for s in seeds]
    if init_labels is not None:
        init_labels = np.asarray(init_labels, dtype=int)
        starts.append(np.stack([x[init_labels == k].mean(axis=0) for k in range(m)]))
    best = None
    for c0 in starts:
        labels, centers = _lloyd(x, c0, max_iter)
        obj = kmeans_objective(x, labels)
        if best is None or obj < best[0] - 1e-12 * max(1.0, abs(best[0])):
            best = (obj, labels, centers)
    obj, labels, centers = best
    labels, centers = _canonical(labels, centers)
    return GroupStructure(m, labels, centers, obj)


def group_gamma(
    regime_panel: PanelData,
    group,
    r0: int,
    kernel: KernelConfig | None = None,
    tol: float = 1e-8,
    max_iter: int = 1000,
) -> float:
    """Homogeneity statistic for the units in ``group`` (indices or mask)."""
    idx = np.asarray(group)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    if idx.size < 2:
        raise ValueError("group needs at least 2 units")
    if regime_panel.t_len <= regime_panel.p + r0:
        raise DimensionError(
            f"regime too short: T={regime_panel.t_len} <= p + r0 = {regime_panel.p + r0}"
        )
    return homogeneity_gamma(regime_panel.units(idx), r0, kernel=kernel, tol=tol, max_iter=max_iter)


def chi2_1_cdf(z: float) -> float:
    """P(chi2(1) <= z) via the regularized upper incomplete gamma."""
    if z <= 0:
        return 0.0
    return float(1.0 - gammaincc(0.5, z / 2.0))


def critical_value(m: int, varsigma: float, tol: float = 1e-10) -> float:
    """Level-``varsigma`` critical value of the maximum of m independent
    chi2(1) variables, found by bisection on the upper tail."""
    if m < 1:
        raise ValueError("m must be at least 1")
    if not 0.0 < varsigma < 1.0:
        raise ValueError("varsigma must lie in (0, 1)")
    # target upper tail q = 1 - (1 - varsigma)^(1/m) for a single chi2(1)
    q = -np.expm1(np.log1p(-varsigma) / m)

    def upper(z):
        return float(gammaincc(0.5, z / 2.0))

    lo, hi = 0.0, 1.0
    while upper(hi) > q:
        hi *= 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if upper(mid) > q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gamma_report(
    regime_panel: PanelData,
    groups: GroupStructure,
    r0: int,
    varsigma: float,
    kernel: KernelConfig | None = None,
) -> GammaReport:
    """Per-group statistics for one partition; singleton groups contribute 0."""
    per_group = np.zeros(groups.k)
    for k in range(groups.k):
        idx = np.flatnonzero(groups.labels == k)
        if idx.size >= 2:
            per_group[k] = group_gamma(regime_panel, idx, r0, kernel=kernel)
    gamma_m = float(np.max(per_group**2))
    crit = critical_value(groups.k, varsigma)
    return GammaReport(groups.k, per_group, gamma_m, crit, bool(gamma_m > crit))


def stk_run(
    regime_panel: PanelData,
    profiles,
    r0: int,
    varsigma: float | None = None,
    max_m: int = 8,
    kernel: KernelConfig | None = None,
    seed: int = 0,
    restarts: int = 20,
) -> StkResult:
    """Increase the number of groups until no group rejects homogeneity.

    ``varsigma`` defaults to N^-2.  If every m up to ``max_m`` rejects, the
    ``max_m`` partition is returned with ``converged=False``.
    """
    if max_m < 1:
        raise ValueError("max_m must be at least 1")
    n = regime_panel.n
    if varsigma is None:
        varsigma = float(n) ** -2
    reports = []
    groups = None
    for m in range(1, min(max_m, n) + 1):
        groups = kmeans(profiles, m, restarts=restarts, seed=seed)
        report = gamma_report(regime_panel, groups, r0, varsigma, kernel)
        reports.append(report)
        log.debug("m=%d gamma=%.3f crit=%.3f", m, report.gamma_m, report.critical)
        if not report.reject:
            return StkResult(m, groups, tuple(reports), True)
    log.warning("number of groups hit the cap max_m=%d", max_m)
    return StkResult(groups.k, groups, tuple(reports), False)
