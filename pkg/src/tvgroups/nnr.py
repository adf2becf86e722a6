"""Nuclear-norm-regularized panel regression solved by cyclic singular value
thresholding, plus the plug-in tuning rule and the SVT rank criterion."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import CoefSet, NumericError, PanelData, composite_residual

NU_FLOOR = 1e-8
MAD_SCALE = 1.4826
DEFAULT_C_NU = 2.0


class TuningWarning(UserWarning):
    """Tuning parameters were clamped to the floor value."""


@dataclass(frozen=True)
class NnrConfig:
    """Solver settings.

    ``nu`` holds the p + 1 penalty levels (intercept first).  ``step`` is
    the proximal step size for the slope blocks, or ``"auto"`` for
    0.5 / max(1 + sum_j X_j^2).
    """

    nu: tuple[float, ...]
    step: float | str = "auto"
    tol: float = 1e-8
    max_iter: int = 5000

    def __post_init__(self):
        nu = tuple(float(v) for v in np.atleast_1d(self.nu))
        if not nu or any(not np.isfinite(v) or v <= 0 for v in nu):
            raise ValueError(f"nu entries must be positive and finite, got {nu}")
        if self.step != "auto" and not (isinstance(self.step, (int, float)) and self.step > 0):
            raise ValueError(f"step must be positive or 'auto', got {self.step!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be at least 1")
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "max_iter", int(self.max_iter))


@dataclass(frozen=True)
class NnrResult:
    coefs: CoefSet
    objective_trace: np.ndarray
    iterations: int
    converged: bool
    nu: tuple[float, ...] = field(default=())


def soft_threshold_svd(m, lam: float) -> np.ndarray:
    """Singular value soft-thresholding, the prox of ``lam * ||.||_*``.

    Returns ``U diag(max(s - lam, 0)) V'``, the unique minimizer of
    ``0.5 * ||m - Z||_F^2 + lam * ||Z||_*``.
    """
    if lam < 0:
        raise ValueError(f"threshold must be nonnegative, got {lam}")
    a = np.asarray(m, dtype=float)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    s = np.maximum(s - lam, 0.0)
    k = int(np.count_nonzero(s))
    if k == 0:
        return np.zeros_like(a)
    return (u[:, :k] * s[:k]) @ vt[:k]


def nnr_objective(panel: PanelData, coefs: CoefSet, nu: Sequence[float]) -> float:
    """(1/NT) ||residual||_F^2 + sum_j nu_j ||Theta_j||_*."""
    r = composite_residual(panel, coefs)
    val = float(np.sum(r * r)) / r.size
    for nu_j, th in zip(nu, coefs.thetas):
        val += nu_j * float(np.sum(np.linalg.svd(th, compute_uv=False)))
    return val


def auto_step(panel: PanelData) -> float:
    total = np.ones(panel.shape)
    for xj in panel.x:
        total = total + xj * xj
    return 0.5 / float(np.max(total))


def solve_nnr(panel: PanelData, cfg: NnrConfig, init: CoefSet | None = None) -> NnrResult:
    """Minimize the penalized least-squares criterion by cyclic SVT sweeps.

    Each sweep updates the intercept block by its exact prox and then every
    slope block by one proximal-gradient step; the objective is recorded
    once per sweep.
    """
    if len(cfg.nu) != panel.p + 1:
        raise ValueError(f"need {panel.p + 1} penalty levels, got {len(cfg.nu)}")
    n, t_len = panel.shape
    nt = n * t_len
    tau = auto_step(panel) if cfg.step == "auto" else float(cfg.step)
    if init is None:
        thetas = [np.zeros((n, t_len)) for _ in range(panel.p + 1)]
    else:
        thetas = [np.array(th, dtype=float) for th in init.thetas]

    y = panel.y
    xs = panel.x
    lam0 = cfg.nu[0] * nt / 2.0
    lams = [tau * nu_j * nt / 2.0 for nu_j in cfg.nu[1:]]

    def objective(ths):
        return nnr_objective(panel, CoefSet(tuple(ths)), cfg.nu)

    # slope-part fit, kept up to date so every block sees the latest iterates
    fit = np.zeros((n, t_len))
    for xj, th in zip(xs, thetas[1:]):
        fit += xj * th

    trace = []
    prev = objective(thetas)
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        thetas[0] = soft_threshold_svd(y - fit, lam0)
        for j, xj in enumerate(xs, start=1):
            resid = y - thetas[0] - fit
            new = soft_threshold_svd(thetas[j] + tau * xj * resid, lams[j - 1])
            fit += xj * (new - thetas[j])
            thetas[j] = new
        if not all(np.all(np.isfinite(th)) for th in thetas):
            raise NumericError(f"non-finite iterate at sweep {it}")
        cur = objective(thetas)
        trace.append(cur)
        if abs(prev - cur) <= cfg.tol * max(abs(prev), np.finfo(float).tiny):
            converged = True
            break
        prev = cur

    return NnrResult(
        coefs=CoefSet(tuple(thetas)),
        objective_trace=np.asarray(trace),
        iterations=it,
        converged=converged,
        nu=cfg.nu,
    )


def mad_scale(a) -> float:
    """Normal-consistent median absolute deviation."""
    a = np.ravel(np.asarray(a, dtype=float))
    return MAD_SCALE * float(np.median(np.abs(a - np.median(a))))


def two_way_demean(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y - y.mean(axis=1, keepdims=True) - y.mean(axis=0, keepdims=True) + y.mean()


def select_tuning(panel: PanelData, sigma: float | None = None, c_nu: float = DEFAULT_C_NU) -> np.ndarray:
    """Plug-in penalty levels.

    ``nu_j = c_nu * max(sqrt(N), sqrt(T log T)) / (NT) * sigma_j`` where
    ``sigma_0 = sigma`` and ``sigma_j = sigma * rms(X_j)``, the natural
    scale of ``||X_j * E||_op`` relative to ``||E||_op``.  ``sigma``
    defaults to the MAD of two-way demeaned Y.  Entries are floored at
    1e-8 with a :class:`TuningWarning`.
    """
    n, t_len = panel.shape
    if sigma is None:
        sigma = mad_scale(two_way_demean(panel.y))
    rate = c_nu * max(np.sqrt(n), np.sqrt(t_len * np.log(t_len))) / (n * t_len)
    scales = [1.0] + [float(np.sqrt(np.mean(xj * xj))) for xj in panel.x]
    nu = np.array([rate * sigma * s for s in scales])
    bad = ~(nu >= NU_FLOOR)
    if np.any(bad):
        warnings.warn(
            f"degenerate scale for blocks {np.flatnonzero(bad).tolist()}; "
            f"penalty floored at {NU_FLOOR}",
            TuningWarning,
            stacklevel=2,
        )
        nu[bad] = NU_FLOOR
    return nu


def solve_nnr_auto(
    panel: PanelData,
    c_nu: float = DEFAULT_C_NU,
    tol: float = 1e-8,
    max_iter: int = 5000,
) -> NnrResult:
    """Two-pass tuned fit.

    Pass 1 uses the MAD scale of two-way demeaned Y; pass 2 takes the MAD of
    the pass-1 residuals and re-solves once, warm-started.
    """
    nu1 = select_tuning(panel, c_nu=c_nu)
    first = solve_nnr(panel, NnrConfig(tuple(nu1), tol=tol, max_iter=max_iter))
    sigma = mad_scale(composite_residual(panel, first.coefs))
    nu2 = select_tuning(panel, sigma=sigma, c_nu=c_nu)
    return solve_nnr(
        panel, NnrConfig(tuple(nu2), tol=tol, max_iter=max_iter), init=first.coefs
    )


def estimate_rank(theta, nu_j: float) -> int:
    """Count singular values at or above ``0.5 * sqrt(nu_j * ||theta||_op)``."""
    if not nu_j > 0:
        raise ValueError(f"nu_j must be positive, got {nu_j}")
    s = np.linalg.svd(np.asarray(theta, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    thresh = 0.5 * np.sqrt(nu_j * s[0])
    return int(np.count_nonzero(s >= thresh))
