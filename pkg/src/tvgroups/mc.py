"""Simulation designs with grouped, break-affected slopes and the
replication harness that turns pipeline runs into frequency and coverage
tables."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from .core import CoefSet, PanelData

log = logging.getLogger(__name__)

FAMILIES = ("dgp1", "dgp2", "dgp3", "dgp4")
VARIANTS = ("v1", "v2", "v3")

# group slope levels per regime, shared by both regressors unless overridden
# for the lagged-outcome regressor of the dynamic design
SLOPES = {
    "v1": {"pre": [0.1, 0.9], "post": [0.05, 0.45]},
    "v2": {"pre": [0.1, 0.9], "post": [0.1, 0.9]},
    "v3": {"pre": [0.1, 0.9], "post": [0.1, 0.5, 0.9]},
}
LAG_SLOPES = {
    "v1": {"pre": [0.1, 0.7], "post": [0.05, 0.35]},
    "v2": {"pre": [0.1, 0.7], "post": [0.1, 0.7]},
    "v3": {"pre": [0.1, 0.7], "post": [0.1, 0.4, 0.7]},
}
SHARES = {"pre": [0.5, 0.5], "post3": [0.4, 0.3, 0.3]}
R0 = 1
AR_COEF = 0.2
DYNAMIC_ERROR_VAR = 0.5


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator; ``seed`` may be an int or a sequence of ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def replication_seed(master: int, rep: int) -> int:
    """Independent per-replication seed derived from (master, rep)."""
    return int(np.random.SeedSequence([master, rep]).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class DgpSpec:
    family: str = "dgp1"
    variant: str = "v1"
    n: int = 100
    t_len: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n < 2:
            raise ValueError("need at least 2 units")
        if self.t_len < 4:
            raise ValueError("need at least 4 periods")

    @property
    def name(self) -> str:
        return f"{self.family}.{self.variant[1]}"

    @classmethod
    def parse(cls, name: str, **kw) -> "DgpSpec":
        """Build from names like ``"dgp1.1"`` or ``"dgp2.v3"``."""
        fam, _, var = name.lower().partition(".")
        if not var:
            var = "1"
        if not var.startswith("v"):
            var = "v" + var
        return cls(family=fam, variant=var, **kw)


@dataclass(frozen=True)
class GroundTruth:
    """True break (last pre-break period, 1-based), 0-based group labels,
    K x p slope tables and true ranks (intercept first)."""

    t1: int
    k_pre: int
    k_post: int
    labels_pre: np.ndarray
    labels_post: np.ndarray
    alpha_pre: np.ndarray
    alpha_post: np.ndarray
    ranks: tuple[int, ...]


@dataclass(frozen=True)
class Shocks:
    """Primitive draws from which a design's outcome is assembled."""

    lam: np.ndarray
    f: np.ndarray
    e: np.ndarray
    x: tuple[np.ndarray, ...]
    y0: np.ndarray | None = None


def draw_groups(rng: np.random.Generator, n: int, shares) -> np.ndarray:
    """Shuffle units and assign the first floor(share * N) to each group in
    turn; the remainder joins the last group."""
    perm = rng.permutation(n)
    labels = np.empty(n, dtype=int)
    start = 0
    for k, share in enumerate(shares):
        stop = n if k == len(shares) - 1 else start + int(math.floor(share * n))
        labels[perm[start:stop]] = k
        start = stop
    return labels


def theta_from_groups(truth: GroundTruth, n: int, t_len: int) -> list[np.ndarray]:
    """Piecewise-constant slope matrices Theta_1..Theta_p from the truth tables."""
    p = truth.alpha_pre.shape[1]
    out = []
    for j in range(p):
        th = np.empty((n, t_len))
        th[:, : truth.t1] = truth.alpha_pre[truth.labels_pre, j][:, None]
        th[:, truth.t1 :] = truth.alpha_post[truth.labels_post, j][:, None]
        out.append(th)
    return out


def _errors(rng, family: str, n: int, t_len: int) -> np.ndarray:
    if family == "dgp1":
        return rng.standard_normal((n, t_len))
    if family == "dgp4":
        return math.sqrt(DYNAMIC_ERROR_VAR) * rng.standard_normal((n, t_len))
    sd = np.sqrt(rng.uniform(0.5, 1.0, size=(n, t_len)))
    eta = sd * rng.standard_normal((n, t_len))
    if family == "dgp2":
        return eta
    e = np.empty_like(eta)
    e[:, 0] = eta[:, 0]
    for t in range(1, t_len):
        e[:, t] = AR_COEF * e[:, t - 1] + eta[:, t]
    return e


def build_outcome(shocks: Shocks, thetas: list[np.ndarray], dynamic: bool) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
    """Assemble Y (and the lagged-outcome regressor when ``dynamic``)."""
    common = np.outer(shocks.lam, shocks.f) if shocks.lam.ndim == 1 else shocks.lam @ shocks.f.T
    if not dynamic:
        y = common + shocks.e
        for xj, th in zip(shocks.x, thetas):
            y = y + xj * th
        return y, shocks.x
    n, t_len = shocks.e.shape
    y = np.empty((n, t_len))
    lag = np.empty((n, t_len))
    prev = shocks.y0
    for t in range(t_len):
        lag[:, t] = prev
        y[:, t] = common[:, t] + thetas[0][:, t] * prev + shocks.e[:, t]
        for xj, th in zip(shocks.x, thetas[1:]):
            y[:, t] += xj[:, t] * th[:, t]
        prev = y[:, t]
    return y, (lag,) + shocks.x


def generate(spec: DgpSpec, return_shocks: bool = False):
    """Draw one panel from ``spec``.

    Returns ``(panel, truth)``, or ``(panel, truth, shocks)`` when
    ``return_shocks`` is set.
    """
    rng = make_rng(spec.seed)
    n, t_len = spec.n, spec.t_len
    lo, hi = int(math.floor(0.4 * t_len)), int(math.ceil(0.6 * t_len))
    t1 = int(rng.integers(lo, hi + 1))
    t1 = min(max(t1, 2), t_len - 2)

    labels_pre = draw_groups(rng, n, SHARES["pre"])
    if spec.variant == "v1":
        labels_post = labels_pre.copy()
    elif spec.variant == "v2":
        labels_post = draw_groups(rng, n, SHARES["pre"])
    else:
        labels_post = draw_groups(rng, n, SHARES["post3"])

    lam = rng.standard_normal(n)
    f = rng.standard_normal(t_len)
    dynamic = spec.family == "dgp4"
    p = 2
    if dynamic:
        y0 = rng.standard_normal(n)
        x = (rng.uniform(-2.0, 2.0, size=(n, t_len)),)
    else:
        y0 = None
        x = tuple(rng.uniform(-2.0, 2.0, size=(n, t_len)) for _ in range(p))
    e = _errors(rng, spec.family, n, t_len)

    base = SLOPES[spec.variant]
    first = LAG_SLOPES[spec.variant] if dynamic else base
    alpha_pre = np.column_stack([first["pre"], base["pre"]])
    alpha_post = np.column_stack([first["post"], base["post"]])

    partial = GroundTruth(
        t1=t1,
        k_pre=alpha_pre.shape[0],
        k_post=alpha_post.shape[0],
        labels_pre=labels_pre,
        labels_post=labels_post,
        alpha_pre=alpha_pre,
        alpha_post=alpha_post,
        ranks=(),
    )
    thetas = theta_from_groups(partial, n, t_len)
    ranks = (R0,) + tuple(int(np.linalg.matrix_rank(th)) for th in thetas)
    if max(ranks[1:]) > 2:
        raise AssertionError(f"slope matrix rank {ranks} exceeds 2")
    truth = replace(partial, ranks=ranks)

    shocks = Shocks(lam=lam, f=f, e=e, x=x, y0=y0)
    y, xs = build_outcome(shocks, thetas, dynamic)
    panel = PanelData(y, xs)
    if return_shocks:
        return panel, truth, shocks
    return panel, truth


def same_partition(a, b) -> bool:
    """True when two label vectors define the same partition of units."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        return False
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))


def _label_map(est, truth) -> dict[int, int]:
    """Estimated label -> true label for matching partitions."""
    return {int(e): int(t) for e, t in zip(est, truth)}


MODES = ("full", "oracle_k", "oracle", "steps")


def _pipeline_config(spec: DgpSpec, cfg, truth: GroundTruth | None, mode: str):
    from .pipeline import PipelineConfig

    cfg = cfg or PipelineConfig()
    if spec.family == "dgp4" and not cfg.kernel.dynamic:
        cfg = replace(cfg, kernel=replace(cfg.kernel, dynamic=True))
    if mode == "oracle_k" and truth is not None:
        cfg = replace(cfg, known_k={"pre": truth.k_pre, "post": truth.k_post})
    return cfg


def _slope_records(rec: dict, regime: str, fit, truth_labels, alpha_true, est_labels=None):
    """Per group/regressor errors and 95% interval coverage."""
    mapping = (
        {k: k for k in range(alpha_true.shape[0])}
        if est_labels is None
        else _label_map(est_labels, truth_labels)
    )
    for k_est, k_true in sorted(mapping.items()):
        for j in range(alpha_true.shape[1]):
            key = f"{regime}_g{k_true + 1}_x{j + 1}"
            est = fit.corrected[k_est, j]
            se = fit.se[k_est, j]
            rec[f"err_{key}"] = float(est - alpha_true[k_true, j])
            rec[f"err_raw_{key}"] = float(fit.alphas[k_est, j] - alpha_true[k_true, j])
            rec[f"cover_{key}"] = float(abs(est - alpha_true[k_true, j]) <= 1.959963984540054 * se)


def run_replication(spec: DgpSpec, cfg=None, mode: str = "full") -> dict[str, Any]:
    """One replication: simulate, estimate, score against the truth.

    ``mode`` is ``"full"`` (every step estimated), ``"oracle_k"`` (group
    counts known), ``"oracle"`` (true break and memberships; only the
    post-classification fits run) or ``"steps"`` (penalized fit, ranks and
    break only).  Full runs also record memberships obtained by clustering
    the estimated profiles into the true number of groups.
    """
    from .ife import bias_and_variance, fit_ife_grouped
    from .pipeline import estimate, low_rank_steps
    from .stk import kmeans

    rec: dict[str, Any] = {"seed": spec.seed, "failed": 0, "error": ""}
    try:
        panel, truth = generate(spec)
        cfg = _pipeline_config(spec, cfg, truth, mode)
        rec["t1"] = truth.t1
        if mode == "oracle":
            r0 = R0 if cfg.r0 is None else cfg.r0
            for regime, (a, b), labels, alpha in (
                ("pre", (0, truth.t1), truth.labels_pre, truth.alpha_pre),
                ("post", (truth.t1, spec.t_len), truth.labels_post, truth.alpha_post),
            ):
                sub = panel.periods(a, b)
                fit = fit_ife_grouped(sub, labels, r0, tol=cfg.ife_tol, max_iter=cfg.ife_max_iter)
                fit = bias_and_variance(fit, sub, cfg.kernel, correct=cfg.bias_correct)
                _slope_records(rec, regime, fit, labels, alpha)
            return rec

        res = low_rank_steps(panel, cfg) if mode == "steps" else estimate(panel, cfg)
        for j, (r_hat, r_true) in enumerate(zip(res.ranks, truth.ranks)):
            rec[f"rank{j}"] = r_hat
            rec[f"rank{j}_ok"] = float(r_hat == r_true)
        rec["t1_hat"] = res.brk.t1_hat
        rec["break_ok"] = float(res.brk.t1_hat == truth.t1)
        if mode == "steps":
            return rec
        for regime, k_true, labels_true, alpha in (
            ("pre", truth.k_pre, truth.labels_pre, truth.alpha_pre),
            ("post", truth.k_post, truth.labels_post, truth.alpha_post),
        ):
            reg = res.regimes[regime]
            rec[f"k_{regime}"] = reg.stk.k_hat
            rec[f"k_{regime}_ok"] = float(reg.stk.k_hat == k_true)
            member = same_partition(reg.stk.groups.labels, labels_true)
            rec[f"member_{regime}_ok"] = float(member)
            if mode == "full":
                known = kmeans(reg.profiles, k_true, restarts=cfg.restarts, seed=cfg.seed)
                rec[f"member_{regime}_knownk_ok"] = float(same_partition(known.labels, labels_true))
            if member and rec["break_ok"] == 1.0:
                _slope_records(rec, regime, reg.fit, labels_true, alpha, reg.stk.groups.labels)
    except Exception as exc:  # a failed replication is recorded, not fatal
        log.warning("replication seed %d failed: %s", spec.seed, exc)
        rec["failed"] = 1
        rec["error"] = f"{type(exc).__name__}: {exc}"
    return rec


def _run_one(args):
    spec, cfg, mode = args
    return run_replication(spec, cfg, mode)


def replicate(
    template: DgpSpec,
    reps: int,
    cfg=None,
    mode: str = "full",
    workers: int = 1,
) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    """Run ``reps`` replications and aggregate them.

    Replication r uses the seed derived from ``(template.seed, r)``, so the
    output does not depend on ``workers``.  Returns the summary record and
    the per-replication records in replication order.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    tasks = [
        (replace(template, seed=replication_seed(template.seed, r)), cfg, mode)
        for r in range(reps)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, tasks, chunksize=1))
    else:
        records = [_run_one(t) for t in tasks]
    for r, rec in enumerate(records):
        rec["rep"] = r
    return summarize(template, reps, mode, records), records


def _mean(records, key):
    vals = [rec[key] for rec in records if key in rec]
    return (float(np.mean(vals)) if vals else float("nan")), len(vals)


def summarize(template: DgpSpec, reps: int, mode: str, records) -> dict[str, Any]:
    """Fold per-replication records into one summary row."""
    ok = [rec for rec in records if not rec["failed"]]
    out: dict[str, Any] = {
        "dgp": template.name,
        "n": template.n,
        "t": template.t_len,
        "seed": template.seed,
        "mode": mode,
        "reps": reps,
        "failures": reps - len(ok),
        "failure_rate": (reps - len(ok)) / reps,
    }
    keys = sorted({k for rec in ok for k in rec})
    for key in [k for k in keys if k.endswith("_ok")]:
        out[key.replace("_ok", "_freq")] = _mean(ok, key)[0]
    for regime in ("pre", "post"):
        ks = [rec[f"k_{regime}"] for rec in ok if f"k_{regime}" in rec]
        if ks:
            vals, counts = np.unique(ks, return_counts=True)
            out[f"k_{regime}_dist"] = ";".join(f"{v}:{c}" for v, c in zip(vals, counts))
    for key in [k for k in keys if k.startswith("err_") and not k.startswith("err_raw_")]:
        name = key[4:]
        errs = np.array([rec[key] for rec in ok if key in rec])
        raw = np.array([rec["err_raw_" + name] for rec in ok if key in rec])
        out[f"bias_{name}"] = float(errs.mean())
        out[f"rmse_{name}"] = float(np.sqrt(np.mean(errs**2)))
        out[f"bias_raw_{name}"] = float(raw.mean())
        out[f"coverage_{name}"] = _mean(ok, "cover_" + name)[0]
        out[f"count_{name}"] = int(errs.size)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def write_summary_csv(path, rows: list[dict[str, Any]]) -> None:
    """One row per cell; the column set is the union of the rows' keys in
    first-seen order."""
    columns: list[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) if c in row else "" for c in columns])
