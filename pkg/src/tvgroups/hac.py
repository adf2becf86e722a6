"""Kernel-weighted long-run covariance estimators."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

PSD_FLOOR = 1e-12
KERNELS = ("bartlett", "parzen", "truncated", "none")


class HacWarning(UserWarning):
    """A long-run covariance estimate was not positive definite and was floored."""


def kernel_weight(u, kernel: str = "bartlett"):
    """Kernel value k(u); zero outside |u| <= 1 for the truncated kernels."""
    u = np.abs(np.asarray(u, dtype=float))
    if kernel == "bartlett":
        return np.where(u <= 1.0, 1.0 - u, 0.0)
    if kernel == "parzen":
        inner = 1.0 - 6.0 * u**2 + 6.0 * u**3
        outer = 2.0 * (1.0 - u) ** 3
        return np.where(u <= 0.5, inner, np.where(u <= 1.0, outer, 0.0))
    if kernel == "truncated":
        return np.where(u <= 1.0, 1.0, 0.0)
    if kernel == "none":
        return np.where(u == 0.0, 1.0, 0.0)
    raise ValueError(f"unknown kernel {kernel!r}; choose from {KERNELS}")


def auto_bandwidth(t_len: int) -> int:
    """Newey-West rule floor(4 (T/100)^(2/9))."""
    return int(math.floor(4.0 * (t_len / 100.0) ** (2.0 / 9.0)))


ANDREWS_CONST = {"bartlett": (1.1447, 3.0), "parzen": (2.6614, 5.0), "truncated": (0.6611, 5.0)}


def andrews_bandwidth(u: np.ndarray, kernel: str = "bartlett") -> float:
    """AR(1) plug-in bandwidth pooled over units.

    ``u`` is (n, T, p): the score series z_t e_t of every unit.  One AR(1)
    coefficient per score coordinate is estimated from all units jointly,
    then the usual plug-in S = c (alpha T)^(1/q) is applied.
    """
    if kernel not in ANDREWS_CONST:
        return 0.0
    u = np.asarray(u, dtype=float)
    if u.ndim == 2:
        u = u[..., None]
    t_len = u.shape[1]
    if t_len < 3:
        return 0.0
    lead, lag = u[:, 1:], u[:, :-1]
    den = np.sum(lag * lag, axis=(0, 1))
    ok = den > 0
    if not np.any(ok):
        return 0.0
    rho = np.clip(np.sum(lead * lag, axis=(0, 1))[ok] / den[ok], -0.97, 0.97)
    resid = lead[..., ok] - rho * lag[..., ok]
    sig2 = np.mean(resid * resid, axis=(0, 1))
    const, q = ANDREWS_CONST[kernel]
    if q == 3.0:
        num = np.sum(4 * rho**2 * sig2**2 / ((1 - rho) ** 6 * (1 + rho) ** 2))
    else:
        num = np.sum(4 * rho**2 * sig2**2 / (1 - rho) ** 8)
    den_a = np.sum(sig2**2 / (1 - rho) ** 4)
    if den_a <= 0:
        return 0.0
    alpha = num / den_a
    return float(const * (alpha * t_len) ** (1.0 / q))


@dataclass(frozen=True)
class KernelConfig:
    """Kernel choice and bandwidth: an int, ``"auto"`` (Newey-West rule
    floor(4 (T/100)^(2/9))) or ``"andrews"`` (AR(1) plug-in estimated from
    the scores being averaged).  ``dynamic`` forces bandwidth 0,
    appropriate for martingale-difference errors."""

    kernel: str = "bartlett"
    bandwidth: int | str = "andrews"
    dynamic: bool = False

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; choose from {KERNELS}")
        if self.bandwidth not in ("auto", "andrews"):
            if int(self.bandwidth) != self.bandwidth or int(self.bandwidth) < 0:
                raise ValueError("bandwidth must be a nonnegative integer, 'auto' or 'andrews'")
            object.__setattr__(self, "bandwidth", int(self.bandwidth))

    def resolve(self, t_len: int, scores: np.ndarray | None = None) -> float:
        """Bandwidth for a sample of length ``t_len``; the data-driven rule
        needs the (n, T, p) ``scores`` and falls back to the fixed rule
        without them."""
        if self.dynamic or self.kernel == "none":
            return 0
        if self.bandwidth == "andrews":
            if scores is None:
                return auto_bandwidth(t_len)
            return andrews_bandwidth(scores, self.kernel)
        if self.bandwidth == "auto":
            return auto_bandwidth(t_len)
        return int(self.bandwidth)

    def lag_weights(self, t_len: int, scores: np.ndarray | None = None) -> np.ndarray:
        """Weights k(j/S) for lags j = 1..T-1 (zeros when S = 0)."""
        s_t = self.resolve(t_len, scores)
        lags = np.arange(1, t_len)
        if s_t <= 0:
            return np.zeros(lags.shape)
        return kernel_weight(lags / s_t, self.kernel)


def lag_weights(t_len: int, kernel: str, s_t: int) -> np.ndarray:
    lags = np.arange(1, t_len)
    if s_t <= 0:
        return np.zeros(lags.shape)
    return kernel_weight(lags / s_t, kernel)


def hac_batch(z: np.ndarray, e: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Long-run covariance for a stack of units.

    ``z`` is (n, T, p), ``e`` is (n, T) and ``weights[j-1]`` is the weight of
    lag j.  Returns (n, p, p) matrices
    Gamma_0 + sum_j w_j (Gamma_j + Gamma_j') with
    Gamma_j = (1/T) sum_t z_t z_{t+j}' e_t e_{t+j}.
    """
    t_len = z.shape[1]
    ze = z * e[:, :, None]
    out = np.einsum("ntp,ntq->npq", ze, ze) / t_len
    for lag in np.flatnonzero(weights) + 1:
        g = np.einsum("ntp,ntq->npq", ze[:, :-lag], ze[:, lag:]) / t_len
        out += weights[lag - 1] * (g + np.swapaxes(g, 1, 2))
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def floor_psd(m: np.ndarray, floor: float = PSD_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Raise eigenvalues of a stack of symmetric matrices to ``floor``.

    Returns the repaired stack and a boolean flag per matrix.
    """
    vals, vecs = np.linalg.eigh(m)
    flagged = vals.min(axis=-1) < floor
    if np.any(flagged):
        vals = np.maximum(vals, floor)
        fixed = np.einsum("npk,nk,nqk->npq", vecs, vals, vecs)
        m = np.where(flagged[:, None, None], fixed, m)
    return m, flagged


def hac_covariance(z, e, kernel: str = "bartlett", s_t: int | str = "auto") -> np.ndarray:
    """Kernel HAC estimate of the long-run covariance of ``z_t * e_t``.

    Parameters
    ----------
    z : (T, p) array
    e : (T,) array
    kernel : one of ``"bartlett"``, ``"parzen"``, ``"truncated"``, ``"none"``
    s_t : bandwidth S_T, or ``"auto"`` for the Newey-West rule

    Returns
    -------
    (p, p) symmetric matrix.  Estimates with an eigenvalue below 1e-12 are
    floored there and a :class:`HacWarning` is issued.
    """
    z = np.asarray(z, dtype=float)
    e = np.asarray(e, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    t_len = z.shape[0]
    if e.shape != (t_len,):
        raise ValueError(f"e must have length {t_len}")
    bw = auto_bandwidth(t_len) if s_t == "auto" else int(s_t)
    if bw < 0:
        raise ValueError("bandwidth must be nonnegative")
    omega = hac_batch(z[None], e[None], lag_weights(t_len, kernel, bw))
    repaired, flagged = floor_psd(omega)
    if flagged[0]:
        warnings.warn("HAC estimate not positive definite; eigenvalues floored", HacWarning, stacklevel=2)
    return repaired[0]
