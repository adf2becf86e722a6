"""Factor extraction from the penalized estimates and one pass of row-wise
then column-wise least squares that sharpens them entry by entry."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import CoefSet, DimensionError, PanelData, SingularDesignError, svd_truncated

RANK_RTOL = 1e-10


class SingularDesignWarning(UserWarning):
    """Some per-unit or per-period design was rank deficient."""


@dataclass(frozen=True)
class FactorPair:
    """Loadings ``u`` (N x r) and factors ``v`` (T x r); ``u @ v.T`` is the
    rank-r coefficient matrix."""

    u: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    def product(self) -> np.ndarray:
        return self.u @ self.v.T


@dataclass(frozen=True)
class FactorSet:
    """One factor pair per coefficient block, intercept first."""

    pairs: tuple[FactorPair, ...]
    flagged_units: tuple[int, ...] = ()
    flagged_periods: tuple[int, ...] = ()

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(pair.rank for pair in self.pairs)

    def coefs(self) -> CoefSet:
        return CoefSet(tuple(pair.product() for pair in self.pairs))


def extract_factors(theta_tilde, r_j: int, n: int | None = None, t_len: int | None = None) -> FactorPair:
    """Leading-r factor pair of ``theta_tilde`` normalized so that v'v/T = I.

    ``v = sqrt(T) * (leading right singular vectors)`` and
    ``u = theta_tilde @ v / T``, so ``u @ v.T`` is the rank-r truncation.
    """
    th = np.asarray(theta_tilde, dtype=float)
    n = th.shape[0] if n is None else n
    t_len = th.shape[1] if t_len is None else t_len
    if th.shape != (n, t_len):
        raise DimensionError(f"theta has shape {th.shape}, expected {(n, t_len)}")
    if not 0 <= r_j <= min(n, t_len):
        raise ValueError(f"rank {r_j} outside [0, {min(n, t_len)}]")
    trip = svd_truncated(th / np.sqrt(n * t_len), r_j)
    v = np.sqrt(t_len) * trip.v
    u = th @ v / t_len
    return FactorPair(u, v)


def _solve_blocks(designs: np.ndarray, targets: np.ndarray, axis: str, strict: bool):
    """Least squares for a stack of designs (m, obs, k) against targets (m, obs).

    Rank-deficient systems fall back to the minimum-norm solution and are
    reported, or raise when ``strict``.
    """
    m, _, k = designs.shape
    coef = np.zeros((m, k))
    flagged = []
    gram = np.einsum("mok,mol->mkl", designs, designs)
    rhs = np.einsum("mok,mo->mk", designs, targets)
    for i in range(m):
        s = np.linalg.svd(designs[i], compute_uv=False)
        if s.size < k or s[0] == 0.0 or s[-1] <= RANK_RTOL * s[0]:
            if strict:
                raise SingularDesignError(
                    f"rank-deficient design for {axis} {i}", index=i, axis=axis
                )
            flagged.append(i)
            coef[i] = np.linalg.lstsq(designs[i], targets[i], rcond=None)[0]
        else:
            coef[i] = np.linalg.solve(gram[i], rhs[i])
    if flagged:
        warnings.warn(
            f"{len(flagged)} rank-deficient {axis} designs solved by minimum-norm "
            f"least squares (first: {flagged[0]})",
            SingularDesignWarning,
            stacklevel=3,
        )
    return coef, tuple(flagged)


def _regressor_blocks(panel: PanelData) -> list[np.ndarray]:
    return [np.ones(panel.shape)] + list(panel.x)


def _split(coef: np.ndarray, ranks) -> list[np.ndarray]:
    out, start = [], 0
    for r in ranks:
        out.append(coef[:, start : start + r])
        start += r
    return out


def row_regressions(panel: PanelData, v_set: FactorSet, strict: bool = False) -> FactorSet:
    """Per-unit least squares of Y_it on (v_t0, v_t1 X_1it, ..., v_tp X_pit).

    Returns a FactorSet whose ``u`` blocks are the fitted loadings and whose
    ``v`` blocks are the supplied factors.
    """
    ranks = v_set.ranks
    if len(ranks) != panel.p + 1:
        raise DimensionError(f"need {panel.p + 1} factor blocks, got {len(ranks)}")
    if sum(ranks) < 1:
        raise ValueError("at least one block must have positive rank")
    n, t_len = panel.shape
    cols = []
    for xj, pair in zip(_regressor_blocks(panel), v_set.pairs):
        if pair.rank:
            # design[i, t, :] = v_t * X_jit
            cols.append(xj[:, :, None] * pair.v[None, :, :])
    design = np.concatenate(cols, axis=2)
    coef, flagged = _solve_blocks(design, panel.y, "unit", strict)
    pairs = tuple(
        FactorPair(u, pair.v) for u, pair in zip(_split(coef, ranks), v_set.pairs)
    )
    return FactorSet(pairs, flagged_units=flagged, flagged_periods=v_set.flagged_periods)


def col_regressions(panel: PanelData, u_set: FactorSet, strict: bool = False) -> FactorSet:
    """Per-period least squares of Y_it on (u_i0, u_i1 X_1it, ..., u_ip X_pit)."""
    ranks = u_set.ranks
    if len(ranks) != panel.p + 1:
        raise DimensionError(f"need {panel.p + 1} factor blocks, got {len(ranks)}")
    if sum(ranks) < 1:
        raise ValueError("at least one block must have positive rank")
    cols = []
    for xj, pair in zip(_regressor_blocks(panel), u_set.pairs):
        if pair.rank:
            # design[t, i, :] = u_i * X_jit
            cols.append(xj.T[:, :, None] * pair.u[None, :, :])
    design = np.concatenate(cols, axis=2)
    coef, flagged = _solve_blocks(design, panel.y.T, "period", strict)
    pairs = tuple(
        FactorPair(pair.u, v) for v, pair in zip(_split(coef, ranks), u_set.pairs)
    )
    return FactorSet(pairs, flagged_units=u_set.flagged_units, flagged_periods=flagged)


def initial_factors(thetas, ranks) -> FactorSet:
    n, t_len = np.asarray(thetas[0]).shape
    return FactorSet(
        tuple(extract_factors(th, r, n, t_len) for th, r in zip(thetas, ranks))
    )


def refine(panel: PanelData, nnr_coefs, ranks, strict: bool = False) -> tuple[CoefSet, FactorSet]:
    """One row pass and one column pass started from the truncated SVD of
    the penalized estimates.

    ``nnr_coefs`` is a CoefSet (or an NnrResult carrying one).  Returns the
    refined coefficient matrices ``u_ij' v_tj`` and the factor set.
    """
    coefs = getattr(nnr_coefs, "coefs", nnr_coefs)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != panel.p + 1:
        raise DimensionError(f"need {panel.p + 1} ranks, got {len(ranks)}")
    if sum(ranks) == 0:
        n, t_len = panel.shape
        empty = FactorSet(
            tuple(FactorPair(np.zeros((n, 0)), np.zeros((t_len, 0))) for _ in ranks)
        )
        return CoefSet.zeros(n, t_len, panel.p), empty
    init = initial_factors(coefs.thetas, ranks)
    rows = row_regressions(panel, init, strict=strict)
    both = col_regressions(panel, rows, strict=strict)
    return both.coefs(), both


def ls_objective(panel: PanelData, fs: FactorSet) -> float:
    """Sum of squared residuals of Y on the factor-structured coefficients."""
    r = panel.y.copy()
    for xj, pair in zip(_regressor_blocks(panel), fs.pairs):
        r -= xj * pair.product()
    return float(np.sum(r * r))
