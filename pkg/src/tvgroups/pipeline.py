"""End-to-end estimation: penalized fit, ranks, refinement, break date,
groups per regime and post-classification slopes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .breakpoint import BreakResult, estimate_break, estimate_break_sv
from .core import CoefSet, PanelData, require_full_panel
from .factors import FactorSet, refine
from .hac import KernelConfig
from .ife import GroupFit, bias_and_variance, fit_ife_grouped
from .nnr import DEFAULT_C_NU, NnrResult, estimate_rank, solve_nnr_auto
from .stk import BetaProfiles, StkResult, build_beta, kmeans, stk_run

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """Estimation settings.

    ``r0`` is the number of factors used by the interactive-effects fits;
    ``None`` takes the estimated rank of the intercept matrix.
    ``varsigma=None`` means N^-2.  ``known_k`` fixes the number of groups
    per regime (``{"pre": 2, "post": 2}``) and skips the testing loop.
    """

    r0: int | None = None
    c_nu: float = DEFAULT_C_NU
    nnr_tol: float = 1e-8
    nnr_max_iter: int = 5000
    varsigma: float | None = None
    max_m: int = 8
    kernel: KernelConfig = field(default_factory=KernelConfig)
    seed: int = 0
    restarts: int = 20
    break_method: str = "slope_matrix"
    bias_correct: bool = True
    known_k: dict | None = None
    ife_tol: float = 1e-8
    ife_max_iter: int = 1000


@dataclass(frozen=True)
class RegimeResult:
    regime: str
    start: int
    stop: int
    profiles: BetaProfiles
    stk: StkResult
    fit: GroupFit


@dataclass(frozen=True)
class EstimateResult:
    nnr: NnrResult
    ranks: tuple[int, ...]
    theta_dot: CoefSet
    factors: FactorSet
    brk: BreakResult
    r0: int
    regimes: dict[str, RegimeResult]


@dataclass(frozen=True)
class Step1to3:
    nnr: NnrResult
    ranks: tuple[int, ...]
    theta_dot: CoefSet
    factors: FactorSet
    brk: BreakResult


def low_rank_steps(panel: PanelData, cfg: PipelineConfig | None = None) -> Step1to3:
    """Penalized fit, SVT ranks, refinement and the break estimate."""
    cfg = cfg or PipelineConfig()
    require_full_panel(panel)
    nnr = solve_nnr_auto(panel, c_nu=cfg.c_nu, tol=cfg.nnr_tol, max_iter=cfg.nnr_max_iter)
    ranks = tuple(estimate_rank(th, nu) for th, nu in zip(nnr.coefs.thetas, nnr.nu))
    theta_dot, factors = refine(panel, nnr, ranks)
    if cfg.break_method == "singular_vector":
        brk = estimate_break_sv(factors)
    elif cfg.break_method == "slope_matrix":
        brk = estimate_break(theta_dot)
    else:
        raise ValueError(f"unknown break method {cfg.break_method!r}")
    return Step1to3(nnr, ranks, theta_dot, factors, brk)


def locate_break(panel: PanelData, r0: int | None = None, cfg: PipelineConfig | None = None) -> BreakResult:
    """Break estimate for one (sub)sample; ``r0`` is unused by these steps
    and accepted for call-site symmetry."""
    return low_rank_steps(panel, cfg).brk


def estimate_regime(
    sub: PanelData,
    profiles: BetaProfiles,
    r0: int,
    cfg: PipelineConfig,
    known_k: int | None = None,
) -> tuple[StkResult, GroupFit]:
    if known_k is not None:
        groups = kmeans(profiles, known_k, restarts=cfg.restarts, seed=cfg.seed)
        stk = StkResult(known_k, groups, (), True)
    else:
        stk = stk_run(sub, profiles, r0, varsigma=cfg.varsigma, max_m=cfg.max_m,
                      kernel=cfg.kernel, seed=cfg.seed, restarts=cfg.restarts)
    fit = fit_ife_grouped(sub, stk.groups.labels, r0, tol=cfg.ife_tol, max_iter=cfg.ife_max_iter)
    fit = bias_and_variance(fit, sub, cfg.kernel, correct=cfg.bias_correct)
    return stk, fit


def estimate(panel: PanelData, cfg: PipelineConfig | None = None) -> EstimateResult:
    """Run every step on a full panel."""
    cfg = cfg or PipelineConfig()
    steps = low_rank_steps(panel, cfg)
    t_len = panel.t_len
    t1 = min(max(steps.brk.t1_hat, 2), t_len - 2)
    if t1 != steps.brk.t1_hat:
        log.warning("break %d moved to %d so both regimes have two periods", steps.brk.t1_hat, t1)
    r0 = steps.ranks[0] if cfg.r0 is None else int(cfg.r0)
    profiles = build_beta(steps.theta_dot, t1)
    regimes = {}
    for name, (a, b) in (("pre", (0, t1)), ("post", (t1, t_len))):
        sub = panel.periods(a, b)
        known = None if cfg.known_k is None else cfg.known_k.get(name)
        stk, fit = estimate_regime(sub, profiles[name], r0, cfg, known)
        regimes[name] = RegimeResult(name, a, b, profiles[name], stk, fit)
    return EstimateResult(steps.nnr, steps.ranks, steps.theta_dot, steps.factors,
                          steps.brk, r0, regimes)
