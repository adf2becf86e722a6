"""Panel regressions with interactive fixed effects and latent group
slopes that may change at an unknown break date."""

from .breakpoint import BreakResult, SupFResult, estimate_break, estimate_break_sv, sequential_breaks, supf_test
from .core import CoefSet, PanelData
from .factors import FactorSet, refine
from .hac import KernelConfig, hac_covariance
from .ife import GroupFit, HeteroFit, bias_and_variance, fit_ife_grouped, fit_ife_hetero, homogeneity_gamma
from .mc import DgpSpec, generate, replicate
from .nnr import NnrConfig, NnrResult, estimate_rank, soft_threshold_svd, solve_nnr, solve_nnr_auto
from .pipeline import PipelineConfig, estimate
from .stk import build_beta, critical_value, kmeans, stk_run

__all__ = [
    "BreakResult", "CoefSet", "DgpSpec", "FactorSet", "GroupFit", "HeteroFit", "KernelConfig",
    "NnrConfig", "NnrResult", "PanelData", "PipelineConfig", "SupFResult", "bias_and_variance",
    "build_beta", "critical_value", "estimate", "estimate_break", "estimate_break_sv",
    "estimate_rank", "fit_ife_grouped", "fit_ife_hetero", "generate", "hac_covariance",
    "homogeneity_gamma", "kmeans", "refine", "replicate", "sequential_breaks",
    "soft_threshold_svd", "solve_nnr", "solve_nnr_auto", "stk_run", "supf_test",
]
