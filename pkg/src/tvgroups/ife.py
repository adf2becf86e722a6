"""Interactive-fixed-effects estimators: unit-specific slopes, group-pooled
slopes with shared factors, the slope-homogeneity statistic, and the
bias correction and sandwich variance for the grouped slopes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core import DimensionError, PanelData, SingularDesignError, sign_fix
from .hac import KernelConfig, auto_bandwidth, floor_psd, hac_batch

log = logging.getLogger(__name__)

COND_LIMIT = 1e12


class ConvergenceError(RuntimeError):
    """An alternating fit stopped at ``max_iter`` where convergence was required."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class HeteroFit:
    thetas: np.ndarray
    f_hat: np.ndarray
    lambdas: np.ndarray
    v_nt: np.ndarray
    objective: float
    converged: bool
    iterations: int = 0
    objective_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def residuals(self, panel: PanelData) -> np.ndarray:
        return panel.y - np.einsum("ntp,np->nt", panel.xstack(), self.thetas) - self.lambdas @ self.f_hat.T


@dataclass(frozen=True)
class GroupFit:
    """Grouped slopes ``alphas`` (K x p) with shared factors.

    ``bias`` is the amount subtracted by the correction, so the corrected
    slopes are ``alphas - bias``; ``cov``/``se`` refer to the corrected
    slopes.  Both stay empty until :func:`bias_and_variance` runs.
    """

    alphas: np.ndarray
    f_hat: np.ndarray
    lambdas: np.ndarray
    labels: np.ndarray
    objective: float
    converged: bool
    iterations: int = 0
    objective_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bias: np.ndarray | None = None
    cov: tuple[np.ndarray, ...] = ()
    se: np.ndarray | None = None
    rho: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.alphas.shape[0]

    @property
    def corrected(self) -> np.ndarray:
        return self.alphas if self.bias is None else self.alphas - self.bias

    def residuals(self, panel: PanelData) -> np.ndarray:
        slopes = self.alphas[self.labels]
        return panel.y - np.einsum("ntp,np->nt", panel.xstack(), slopes) - self.lambdas @ self.f_hat.T


def _check_dims(panel: PanelData, r0: int):
    n, t_len = panel.shape
    if r0 < 0:
        raise ValueError("r0 must be nonnegative")
    if t_len <= panel.p + r0:
        raise DimensionError(
            f"need more periods than regressors plus factors: T={t_len}, p={panel.p}, r0={r0}"
        )
    if n < max(r0, 1):
        raise DimensionError(f"need at least r0={r0} units, got {n}")


def _mf_project(f: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Apply M_F = I - F F'/T along the time axis (axis 1) of ``a``."""
    t_len = f.shape[0]
    if f.shape[1] == 0:
        return a
    coef = np.tensordot(a, f, axes=([1], [0])) / t_len  # (n, ..., r)
    proj = np.tensordot(coef, f, axes=([-1], [1]))  # (n, ..., T)
    return a - np.moveaxis(proj, -1, 1)


def _solve_units(gram: np.ndarray, rhs: np.ndarray, axis: str = "unit", offset=None) -> np.ndarray:
    cond = np.linalg.cond(gram)
    bad = np.flatnonzero(~(cond < COND_LIMIT))
    if bad.size:
        i = int(bad[0]) if offset is None else int(offset[bad[0]])
        raise SingularDesignError(f"singular X'M_F X for {axis} {i}", index=i, axis=axis)
    return np.linalg.solve(gram, rhs[..., None])[..., 0]


def _hetero_thetas(x: np.ndarray, y: np.ndarray, f: np.ndarray) -> np.ndarray:
    mx = _mf_project(f, x)
    gram = np.einsum("ntp,ntq->npq", mx, x)
    rhs = np.einsum("ntp,nt->np", mx, y)
    return _solve_units(gram, rhs)


def _pca_factors(w: np.ndarray, r0: int) -> tuple[np.ndarray, np.ndarray]:
    """Leading r0 eigenvectors (scaled by sqrt(T)) and eigenvalues of W'W/(nT)."""
    n, t_len = w.shape
    if r0 == 0:
        return np.zeros((t_len, 0)), np.zeros(0)
    _, s, vt = np.linalg.svd(w, full_matrices=False)
    f = sign_fix(vt[:r0].T) * np.sqrt(t_len)
    return f, s[:r0] ** 2 / (n * t_len)


def _concentrated_objective(w: np.ndarray, f: np.ndarray) -> float:
    n, t_len = w.shape
    total = float(np.sum(w * w))
    if f.shape[1]:
        wf = w @ f
        total -= float(np.sum(wf * wf)) / t_len
    return total / (n * t_len)


def _normalize_factors(f: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(np.asarray(f, dtype=float))
    return sign_fix(q) * np.sqrt(f.shape[0])


def ols_by_unit(panel: PanelData) -> np.ndarray:
    """Per-unit least squares slopes, (N, p)."""
    x = panel.xstack()
    return _hetero_thetas(x, panel.y, np.zeros((panel.t_len, 0)))


def initial_factors(panel: PanelData, r0: int) -> np.ndarray:
    """PCA of Y after removing per-unit least-squares fits."""
    if r0 == 0:
        return np.zeros((panel.t_len, 0))
    x = panel.xstack()
    w = panel.y - np.einsum("ntp,np->nt", x, ols_by_unit(panel))
    return _pca_factors(w, r0)[0]


def fit_ife_hetero(
    panel: PanelData,
    r0: int,
    tol: float = 1e-8,
    max_iter: int = 1000,
    f_init: np.ndarray | None = None,
) -> HeteroFit:
    """Unit-specific slopes with common factors by alternating least squares.

    Alternates per-unit slopes given F and principal components of the
    slope residuals.  Iteration stops once no slope moves by more than
    ``tol``; the reported objective is the concentrated criterion
    (1/nT) sum_i W_i' M_F W_i.
    """
    _check_dims(panel, r0)
    x, y = panel.xstack(), panel.y
    n, t_len = y.shape
    if r0 == 0:
        thetas = _hetero_thetas(x, y, np.zeros((t_len, 0)))
        w = y - np.einsum("ntp,np->nt", x, thetas)
        obj = _concentrated_objective(w, np.zeros((t_len, 0)))
        return HeteroFit(thetas, np.zeros((t_len, 0)), np.zeros((n, 0)), np.zeros((0, 0)),
                         obj, True, 1, np.array([obj]))

    f = initial_factors(panel, r0) if f_init is None else _normalize_factors(f_init)
    thetas = _hetero_thetas(x, y, f)
    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = y - np.einsum("ntp,np->nt", x, thetas)
        f, _ = _pca_factors(w, r0)
        trace.append(_concentrated_objective(w, f))
        new = _hetero_thetas(x, y, f)
        step = float(np.max(np.abs(new - thetas)))
        thetas = new
        if step <= tol:
            converged = True
            break
    w = y - np.einsum("ntp,np->nt", x, thetas)
    f, evals = _pca_factors(w, r0)
    obj = _concentrated_objective(w, f)
    trace.append(obj)
    lambdas = w @ f / t_len
    return HeteroFit(thetas, f, lambdas, np.diag(evals), obj, converged, it, np.asarray(trace))


def _group_alphas(x, y, f, labels, k):
    mx = _mf_project(f, x)
    gram_i = np.einsum("ntp,ntq->npq", mx, x)
    rhs_i = np.einsum("ntp,nt->np", mx, y)
    p = x.shape[2]
    gram = np.zeros((k, p, p))
    rhs = np.zeros((k, p))
    np.add.at(gram, labels, gram_i)
    np.add.at(rhs, labels, rhs_i)
    return _solve_units(gram, rhs, axis="group")


def _check_labels(labels, n) -> tuple[np.ndarray, int]:
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (n,):
        raise DimensionError(f"labels must have length {n}")
    if labels.min() < 0:
        raise ValueError("labels must be nonnegative")
    k = int(labels.max()) + 1
    sizes = np.bincount(labels, minlength=k)
    if np.any(sizes == 0):
        raise ValueError(f"empty groups: {np.flatnonzero(sizes == 0).tolist()}")
    return labels, k


def fit_ife_grouped(
    panel: PanelData,
    labels,
    r0: int,
    tol: float = 1e-8,
    max_iter: int = 1000,
    f_init: np.ndarray | None = None,
) -> GroupFit:
    """Group-pooled slopes, unit loadings and common factors.

    ``labels`` are 0-based group indices.  Minimizes
    (1/NT) sum_i sum_t (Y_it - lambda_i' f_t - X_it' a_{g_i})^2 by
    alternating pooled within-group slopes and principal components.
    """
    _check_dims(panel, r0)
    x, y = panel.xstack(), panel.y
    n, t_len = y.shape
    labels, k = _check_labels(labels, n)

    if r0 == 0:
        f = np.zeros((t_len, 0))
    elif f_init is None:
        f = initial_factors(panel, r0)
    else:
        f = _normalize_factors(f_init)
    alphas = _group_alphas(x, y, f, labels, k)
    trace = []
    converged = r0 == 0
    it = 1 if r0 == 0 else 0
    for it in range(1, (max_iter if r0 else 0) + 1):
        w = y - np.einsum("ntp,np->nt", x, alphas[labels])
        f, _ = _pca_factors(w, r0)
        trace.append(_concentrated_objective(w, f))
        new = _group_alphas(x, y, f, labels, k)
        step = float(np.max(np.abs(new - alphas)))
        alphas = new
        if step <= tol:
            converged = True
            break
    w = y - np.einsum("ntp,np->nt", x, alphas[labels])
    f, _ = _pca_factors(w, r0)
    obj = _concentrated_objective(w, f)
    trace.append(obj)
    lambdas = w @ f / t_len
    return GroupFit(alphas, f, lambdas, labels, obj, converged, it, np.asarray(trace))


def _annihilator(a: np.ndarray) -> np.ndarray:
    """I - A (A'A)^+ A'."""
    m = a.shape[0]
    if a.shape[1] == 0:
        return np.eye(m)
    return np.eye(m) - a @ np.linalg.pinv(a.T @ a) @ a.T


def _band_matrix(t_len: int, weights: np.ndarray, include_diag: bool = True) -> np.ndarray:
    """Symmetric Toeplitz weight matrix with unit diagonal and w_j off it."""
    idx = np.abs(np.subtract.outer(np.arange(t_len), np.arange(t_len)))
    full = np.concatenate([[1.0 if include_diag else 0.0], weights])
    return full[idx]


def bias_and_variance(
    fit: GroupFit,
    panel: PanelData,
    kernel: KernelConfig | None = None,
    correct: bool = True,
) -> GroupFit:
    """Plug-in bias correction and sandwich covariance for grouped slopes.

    For group k with loadings L and factors F, the regressors are
    double-projected, ``Xc_j = M_L X_j M_F``, giving
    ``W = (1/N_k T) sum Xc Xc'`` and ``Omega = (1/N_k T) sum e^2 Xc Xc'``.
    The three bias terms replace conditional error moments by residual
    products: lagged error/regressor products over a uniform truncation
    window for the first, cross-section residual variances for the second,
    and kernel-weighted time autocovariances for the third.  The slopes are
    corrected by ``W^{-1} B / sqrt(N_k T)`` and the covariance is
    ``W^{-1} Omega W^{-1} / (N_k T)``.
    """
    kernel = kernel or KernelConfig()
    x, y = panel.xstack(), panel.y
    n, t_len, p = x.shape
    if fit.labels.shape != (n,):
        raise DimensionError("fit and panel disagree on the number of units")
    e = fit.residuals(panel)
    f = fit.f_hat
    r0 = f.shape[1]
    k_count = fit.k
    bias = np.zeros((k_count, p))
    covs = []
    se = np.zeros((k_count, p))
    rho = np.zeros(k_count)
    m_f = np.eye(t_len) - f @ f.T / t_len
    p_f = f @ f.T / t_len
    t_weights = _band_matrix(t_len, kernel.lag_weights(t_len))
    b1_window = max(auto_bandwidth(t_len), 1)
    # lead structure: entry (s, t) kept when 1 <= t - s <= window
    diff = np.subtract.outer(np.arange(t_len), np.arange(t_len))
    lead_mask = ((-diff >= 1) & (-diff <= b1_window)).astype(float)

    for k in range(k_count):
        idx = np.flatnonzero(fit.labels == k)
        nk = idx.size
        xk = x[idx]  # (nk, T, p)
        ek = e[idx]
        lam = fit.lambdas[idx]
        m_l = _annihilator(lam)
        xc = np.einsum("ab,btp->atp", m_l, xk)
        xc = np.einsum("atp,ts->asp", xc, m_f)
        scale = nk * t_len
        w_mat = np.einsum("ntp,ntq->pq", xc, xc) / scale
        omega = np.einsum("nt,ntp,ntq->pq", ek * ek, xc, xc) / scale
        try:
            w_inv = np.linalg.inv(w_mat)
            if np.linalg.cond(w_mat) > COND_LIMIT:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            raise SingularDesignError(f"singular weight matrix for group {k}", index=k, axis="group")
        rho_k = np.sqrt(nk / t_len)
        rho[k] = rho_k

        b = np.zeros(p)
        if correct and r0 > 0:
            lam_gram_inv = np.linalg.pinv(lam.T @ lam)
            f_gram_inv = np.linalg.inv(f.T @ f)
            sig_n = np.diag(np.sum(ek * ek, axis=1))
            sig_t = (ek.T @ ek) * t_weights
            b1 = np.zeros(p)
            b2 = np.zeros(p)
            b3 = np.zeros(p)
            for j in range(p):
                xj = xk[:, :, j]
                # A[s, t] = sum_i e_is X_it, regressors led by the error
                a_mat = (ek.T @ xj) * lead_mask
                b1[j] = np.trace(p_f @ a_mat) / nk
                b2[j] = np.trace(sig_n @ m_l @ xj @ f @ f_gram_inv @ lam_gram_inv @ lam.T) / t_len
                b3[j] = np.trace(sig_t @ m_f @ xj.T @ lam @ lam_gram_inv @ f_gram_inv @ f.T) / nk
            b = -rho_k * b1 - b2 / rho_k - rho_k * b3
        bias[k] = w_inv @ b / np.sqrt(scale)
        cov = w_inv @ omega @ w_inv / scale
        cov = 0.5 * (cov + cov.T)
        covs.append(cov)
        se[k] = np.sqrt(np.maximum(np.diag(cov), 0.0))

    return replace(fit, bias=bias, cov=tuple(covs), se=se, rho=rho)


LEVERAGE_POWER = {"none": 0.0, "hc2": 0.5, "hc3": 1.0}


def unit_sandwich(panel: PanelData, fit: HeteroFit, kernel: KernelConfig, leverage: str = "hc3"):
    """Per-unit ``S_ii = X_i' M_F X_i / T`` and long-run covariance of
    ``(M_F X_i)_t e_it``.

    ``leverage`` rescales residuals by ``(1 - h_t)^-1/2`` (hc2) or
    ``(1 - h_t)^-1`` (hc3), where h_t is the leverage of period t in the
    unit's regression on its own regressors and the factors.  Returns
    ``(s_ii, omega, flagged)`` with ``flagged`` marking floored omegas.
    """
    if leverage not in LEVERAGE_POWER:
        raise ValueError(f"leverage must be one of {sorted(LEVERAGE_POWER)}")
    t_len = panel.t_len
    x = panel.xstack()
    e = fit.residuals(panel)
    z = _mf_project(fit.f_hat, x)  # rows of M_F X_i
    s_ii = np.einsum("ntp,ntq->npq", z, x) / t_len
    power = LEVERAGE_POWER[leverage]
    if power:
        zz_inv = np.linalg.inv(np.einsum("ntp,ntq->npq", z, z))
        h = np.einsum("ntp,npq,ntq->nt", z, zz_inv, z)
        h = h + np.sum(fit.f_hat**2, axis=1)[None, :] / t_len
        e = e / np.maximum(1.0 - h, 1e-8) ** power
    weights = kernel.lag_weights(t_len, z * e[:, :, None])
    omega, flagged = floor_psd(hac_batch(z, e, weights))
    return s_ii, omega, flagged


@dataclass(frozen=True)
class GammaDetail:
    gamma: float
    s_stats: np.ndarray
    fit: HeteroFit
    floored_units: tuple[int, ...] = ()


def homogeneity_gamma(
    panel: PanelData,
    r0: int,
    kernel: KernelConfig | None = None,
    tol: float = 1e-8,
    max_iter: int = 1000,
    f_init: np.ndarray | None = None,
    require_convergence: bool = True,
    detail: bool = False,
    leverage: str = "hc3",
):
    """Standardized slope-homogeneity statistic for a set of units.

    Fits unit-specific slopes with common factors, then averages the
    HAC-weighted squared deviations of each unit's slope from the set mean,
    ``S_i = T (th_i - th_bar)' S_ii Omega_i^{-1} S_ii (th_i - th_bar)
    (1 - a_ii/n)^2``, and returns ``sqrt(n) (mean S_i - p) / sqrt(2p)``.
    """
    kernel = kernel or KernelConfig()
    n, t_len = panel.shape
    p = panel.p
    if n < 2:
        raise DimensionError("need at least 2 units")
    fit = fit_ife_hetero(panel, r0, tol=tol, max_iter=max_iter, f_init=f_init)
    if require_convergence and not fit.converged:
        raise ConvergenceError(
            f"heterogeneous fit did not converge in {max_iter} iterations",
            {"iterations": fit.iterations, "objective": fit.objective, "n": n, "t_len": t_len},
        )
    s_ii, omega, flagged = unit_sandwich(panel, fit, kernel, leverage)
    if r0:
        lam = fit.lambdas
        gram_inv = np.linalg.pinv(lam.T @ lam / n)
        a_ii = np.einsum("nr,rs,ns->n", lam, gram_inv, lam)
    else:
        a_ii = np.zeros(n)
    dev = fit.thetas - fit.thetas.mean(axis=0)
    g = np.einsum("npq,nq->np", s_ii, dev)
    quad = np.einsum("np,np->n", g, np.linalg.solve(omega, g[..., None])[..., 0])
    s_stats = t_len * quad * (1.0 - a_ii / n) ** 2
    gamma = float(np.sqrt(n) * (np.mean(s_stats) - p) / np.sqrt(2.0 * p))
    if flagged.any():
        log.warning("floored %d singular HAC matrices", int(flagged.sum()))
    if detail:
        return GammaDetail(gamma, s_stats, fit, tuple(np.flatnonzero(flagged).tolist()))
    return gamma
