"""Panel containers, matrix norms and SVD helpers shared by every estimator.

The panel model is

    Y = Theta_0 + sum_j X_j * Theta_j + E

with all matrices N x T and ``*`` the elementwise product.  Theta_0 is the
interactive-fixed-effects intercept (loadings times factors) and
Theta_1..Theta_p are the slope matrices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SVD_TOL = 1e-10


class DimensionError(ValueError):
    """Matrices with incompatible shapes were combined."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class SingularDesignError(np.linalg.LinAlgError):
    """A least-squares design is rank deficient.

    ``index`` names the unit (row problems) or period (column problems)
    whose design failed, ``axis`` says which.
    """

    def __init__(self, message: str, index: int | None = None, axis: str = "unit"):
        super().__init__(message)
        self.index = index
        self.axis = axis


def _as_matrix(a, name: str) -> np.ndarray:
    m = np.array(a, dtype=float, copy=True)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be two-dimensional, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class PanelData:
    """Outcome matrix ``y`` (N x T) and regressors ``x`` (p matrices, N x T).

    Units are rows, periods are columns.  Arrays are copied and made
    read-only on construction.
    """

    y: np.ndarray
    x: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        y = _as_matrix(self.y, "y")
        xs = tuple(_as_matrix(xj, f"x[{j}]") for j, xj in enumerate(self.x))
        for j, xj in enumerate(xs):
            if xj.shape != y.shape:
                raise DimensionError(
                    f"x[{j}] has shape {xj.shape}, expected {y.shape}"
                )
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", xs)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def t_len(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return len(self.x)

    @property
    def shape(self) -> tuple[int, int]:
        return self.y.shape

    def xstack(self) -> np.ndarray:
        """Regressors as an (N, T, p) array."""
        if not self.x:
            return np.zeros(self.shape + (0,))
        return np.stack(self.x, axis=-1)

    def periods(self, start: int, stop: int) -> "PanelData":
        """Sub-panel of the 0-based period range ``[start, stop)``."""
        return PanelData(self.y[:, start:stop], tuple(xj[:, start:stop] for xj in self.x))

    def units(self, index) -> "PanelData":
        """Sub-panel restricted to the given unit indices (or boolean mask)."""
        idx = np.asarray(index)
        return PanelData(self.y[idx], tuple(xj[idx] for xj in self.x))


def require_full_panel(panel: PanelData) -> None:
    """Full-sample estimators need at least 2 units and 4 periods."""
    if panel.n < 2 or panel.t_len < 4:
        raise DimensionError(
            f"panel needs N >= 2 and T >= 4, got N={panel.n}, T={panel.t_len}"
        )


@dataclass(frozen=True)
class CoefSet:
    """Intercept matrix followed by the p slope matrices (p + 1 in total)."""

    thetas: tuple[np.ndarray, ...]

    def __post_init__(self):
        thetas = tuple(_as_matrix(t, f"theta[{j}]") for j, t in enumerate(self.thetas))
        if not thetas:
            raise DimensionError("CoefSet needs at least the intercept matrix")
        for j, t in enumerate(thetas):
            if t.shape != thetas[0].shape:
                raise DimensionError(
                    f"theta[{j}] has shape {t.shape}, expected {thetas[0].shape}"
                )
        object.__setattr__(self, "thetas", thetas)

    @classmethod
    def zeros(cls, n: int, t_len: int, p: int) -> "CoefSet":
        return cls(tuple(np.zeros((n, t_len)) for _ in range(p + 1)))

    @property
    def p(self) -> int:
        return len(self.thetas) - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.thetas[0].shape

    @property
    def slopes(self) -> tuple[np.ndarray, ...]:
        return self.thetas[1:]

    def __getitem__(self, j: int) -> np.ndarray:
        return self.thetas[j]

    def __len__(self) -> int:
        return len(self.thetas)


@dataclass(frozen=True)
class SvdTriple:
    """Leading singular triples: ``m ~ u @ diag(s) @ v.T``."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return self.s.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def composite_residual(panel: PanelData, coefs: CoefSet) -> np.ndarray:
    """Return ``Y - Theta_0 - sum_j X_j * Theta_j``."""
    if coefs.shape != panel.shape or coefs.p != panel.p:
        raise DimensionError(
            f"coefficients (p={coefs.p}, shape {coefs.shape}) do not match "
            f"panel (p={panel.p}, shape {panel.shape})"
        )
    r = panel.y - coefs[0]
    for xj, tj in zip(panel.x, coefs.slopes):
        r = r - xj * tj
    return r


def norms(m) -> dict[str, float]:
    """Frobenius, operator, nuclear and max-abs norms of a real matrix."""
    a = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix contains non-finite entries")
    if a.size == 0:
        return {"frobenius": 0.0, "operator": 0.0, "nuclear": 0.0, "max_abs": 0.0}
    s = np.linalg.svd(np.atleast_2d(a), compute_uv=False)
    return {
        "frobenius": float(np.sqrt(np.sum(a * a))),
        "operator": float(s[0]),
        "nuclear": float(np.sum(s)),
        "max_abs": float(np.max(np.abs(a))),
    }


def sign_fix(u: np.ndarray, v: np.ndarray | None = None):
    """Flip column signs so each column of ``u`` has a nonnegative
    largest-magnitude entry; ``v`` receives the same flips."""
    u = np.array(u, dtype=float)
    if u.shape[1] == 0:
        return (u, v) if v is not None else u
    pivot = u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])]
    flip = np.where(pivot < 0, -1.0, 1.0)
    u = u * flip
    if v is None:
        return u
    return u, np.asarray(v, dtype=float) * flip


def svd_truncated(m, r: int) -> SvdTriple:
    """Leading ``r`` singular triples of ``m`` under the sign convention.

    Ties among equal singular values keep LAPACK's order; only spans and
    products ``u v'`` are used downstream, so the rotation freedom is benign.
    """
    a = np.asarray(m, dtype=float)
    if a.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix contains non-finite entries")
    kmax = min(a.shape)
    if not 0 <= r <= kmax:
        raise ValueError(f"rank {r} outside [0, {kmax}]")
    if r == 0:
        return SvdTriple(np.zeros((a.shape[0], 0)), np.zeros(0), np.zeros((a.shape[1], 0)))
    uu, s, vt = np.linalg.svd(a, full_matrices=False)
    u, v = sign_fix(uu[:, :r], vt[:r].T)
    return SvdTriple(u, s[:r].copy(), v)
