"""Command-line entry point: ``estimate``, ``test``, ``simulate`` and
``replicate``.

Panels are read from long-format CSV files with header
``unit,time,y,x1,...,xp``.  Settings come from flags, optionally on top of
a flat ``key = value`` config file (``#`` starts a comment); flags win.
Recognized config keys are the long flag names with ``-`` or ``_``
(``input``, ``output_dir``, ``r0``, ``epsilon``, ``varsigma``, ``kernel``,
``bandwidth``, ``seed``, ``reps``, ``dgp``, ``n``, ``t``, ``workers``,
``mode``, ``critical``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .breakpoint import DEFAULT_CRITICAL, DEFAULT_EPSILON, supf_test
from .core import PanelData, require_full_panel
from .hac import KERNELS, KernelConfig
from .mc import MODES, DgpSpec, generate, replicate, write_summary_csv
from .pipeline import PipelineConfig, estimate

log = logging.getLogger(__name__)

COMMANDS = ("estimate", "test", "simulate", "replicate")


class InputError(ValueError):
    """Malformed or incomplete panel file."""


@dataclass(frozen=True)
class IngestedPanel:
    panel: PanelData
    units: tuple[str, ...]
    times: tuple[str, ...]


def _sort_labels(labels) -> list[str]:
    """Numeric order when every label parses as a number, text order otherwise."""
    labels = list(labels)
    try:
        return sorted(labels, key=float)
    except ValueError:
        return sorted(labels)


def ingest_csv(path) -> IngestedPanel:
    """Read a long-format balanced panel.

    Raises
    ------
    InputError
        On a bad header, a non-numeric cell (the message gives the file row
        number), duplicate (unit, time) pairs or missing pairs (all of them
        are listed).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if header[:3] != ["unit", "time", "y"]:
            raise InputError(f"{path}: header must start with unit,time,y; got {header[:3]}")
        xcols = header[3:]
        if xcols != [f"x{j + 1}" for j in range(len(xcols))]:
            raise InputError(f"{path}: regressor columns must be x1..xp; got {xcols}")
        cells: dict[tuple[str, str], list[float]] = {}
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}: row {row_no} has {len(row)} fields, expected {len(header)}")
            key = (row[0].strip(), row[1].strip())
            try:
                vals = [float(c) for c in row[2:]]
            except ValueError:
                raise InputError(f"{path}: row {row_no}: non-numeric value in {row[2:]}") from None
            if not all(math.isfinite(v) for v in vals):
                raise InputError(f"{path}: row {row_no}: non-finite value")
            if key in cells:
                raise InputError(f"{path}: row {row_no}: duplicate pair unit={key[0]} time={key[1]}")
            cells[key] = vals
    if not cells:
        raise InputError(f"{path}: no data rows")
    units = _sort_labels(dict.fromkeys(k[0] for k in cells))
    times = _sort_labels(dict.fromkeys(k[1] for k in cells))
    missing = [(u, t) for u in units for t in times if (u, t) not in cells]
    if missing:
        shown = ", ".join(f"(unit={u}, time={t})" for u, t in missing[:20])
        more = f" and {len(missing) - 20} more" if len(missing) > 20 else ""
        raise InputError(f"{path}: unbalanced panel, missing {shown}{more}")
    data = np.array([[cells[(u, t)] for t in times] for u in units])  # (N, T, 1 + p)
    panel = PanelData(data[..., 0], tuple(data[..., 1 + j] for j in range(len(xcols))))
    log.info("read %s: N=%d T=%d p=%d", path, panel.n, panel.t_len, panel.p)
    return IngestedPanel(panel, tuple(units), tuple(times))


def write_panel_csv(path, panel: PanelData, units=None, times=None) -> None:
    units = units or [str(i + 1) for i in range(panel.n)]
    times = times or [str(t + 1) for t in range(panel.t_len)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "time", "y"] + [f"x{j + 1}" for j in range(panel.p)])
        for i, u in enumerate(units):
            for t, tl in enumerate(times):
                w.writerow([u, tl, repr(float(panel.y[i, t]))] + [repr(float(x[i, t])) for x in panel.x])


# -- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one command.  ``r0`` and ``varsigma`` of
    ``None`` mean "auto" (estimated intercept rank and N^-2)."""

    command: str
    input: str | None = None
    output_dir: str = "."
    r0: int | None = None
    epsilon: float = DEFAULT_EPSILON
    critical: float = DEFAULT_CRITICAL
    varsigma: float | None = None
    kernel: str = "bartlett"
    bandwidth: int | str = "andrews"
    seed: int = 0
    reps: int = 10
    dgp: str = "dgp1.1"
    n: int = 100
    t: int = 100
    workers: int = 1
    mode: str = "full"

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"command must be one of {COMMANDS}")
        if self.command in ("estimate", "test") and not self.input:
            raise ValueError(f"{self.command} needs --input")
        if self.r0 is not None and self.r0 < 0:
            raise ValueError("r0 must be nonnegative")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        if self.varsigma is not None and not 0 < self.varsigma < 1:
            raise ValueError("varsigma must lie in (0, 1)")
        if self.reps < 1 or self.workers < 1:
            raise ValueError("reps and workers must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        KernelConfig(self.kernel, self.bandwidth)

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(self.kernel, self.bandwidth)

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(r0=self.r0, varsigma=self.varsigma,
                              kernel=self.kernel_config(), seed=self.seed)


def read_config_file(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{line_no}: expected key = value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _parse_auto(value, cast):
    if value is None or str(value).lower() in ("auto", "none", ""):
        return None
    return cast(value)


def _parse_bandwidth(value):
    value = str(value).lower()
    return value if value in ("auto", "andrews") else int(value)


CASTS = {
    "input": str, "output_dir": str, "r0": lambda v: _parse_auto(v, int),
    "epsilon": float, "critical": float, "varsigma": lambda v: _parse_auto(v, float),
    "kernel": str, "bandwidth": _parse_bandwidth, "seed": int, "reps": int,
    "dgp": str, "n": int, "t": int, "workers": int, "mode": str,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tvgroups", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int)

    def model(p):
        p.add_argument("--input")
        p.add_argument("--r0", help="number of factors, or 'auto'")
        p.add_argument("--kernel", choices=KERNELS)
        p.add_argument("--bandwidth", help="'andrews' (default), 'auto' (Newey-West rule) or an integer")

    def design(p):
        p.add_argument("--dgp", help="design name such as dgp1.1")
        p.add_argument("--n", type=int)
        p.add_argument("--t", type=int)

    p = sub.add_parser("estimate", help="full estimation on a panel CSV")
    common(p), model(p)
    p.add_argument("--varsigma", help="group-testing significance level, or 'auto' for N^-2")
    p = sub.add_parser("test", help="sup-F test for a slope break")
    common(p), model(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--critical", type=float)
    p = sub.add_parser("simulate", help="write one simulated panel")
    common(p), design(p)
    p = sub.add_parser("replicate", help="Monte Carlo summary for one design cell")
    common(p), design(p)
    p.add_argument("--reps", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--varsigma")
    p.add_argument("--kernel", choices=KERNELS)
    p.add_argument("--bandwidth")
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge config-file values under explicit flags."""
    merged: dict[str, Any] = {}
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            if key not in CASTS:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = value
    for key in CASTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    kw = {key: CASTS[key](value) for key, value in merged.items()}
    return RunConfig(command=args.command, **kw)


# -- artifact writing ------------------------------------------------------

def _num(v) -> str:
    return repr(float(v))


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def emit_estimate(out: Path, cfg: RunConfig) -> None:
    data = ingest_csv(cfg.input)
    panel = data.panel
    require_full_panel(panel)
    res = estimate(panel, cfg.pipeline())

    _write_rows(out / "ranks.csv", ["block", "rank", "nu"],
                [[j, r, _num(nu)] for j, (r, nu) in enumerate(zip(res.ranks, res.nnr.nu))])
    t1 = res.brk.t1_hat
    _write_rows(out / "break.csv", ["s", "time", "objective", "selected"],
                [[s, data.times[s - 1], _num(v), int(s == t1)]
                 for s, v in enumerate(res.brk.profile, start=2)])
    slope_rows = []
    diag: dict[str, Any] = {
        "n": panel.n, "t": panel.t_len, "p": panel.p, "seed": cfg.seed,
        "ranks": list(res.ranks), "nu": list(res.nnr.nu), "r0": res.r0,
        "nnr_iterations": res.nnr.iterations, "nnr_converged": res.nnr.converged,
        "nnr_objective_trace_tail": list(res.nnr.objective_trace[-10:]),
        "t1_hat": t1, "t1_hat_time": data.times[t1 - 1], "break_flat": res.brk.flat,
    }
    for name, reg in res.regimes.items():
        labels = reg.stk.groups.labels
        _write_rows(out / f"groups_{name}.csv", ["unit", "group"],
                    [[u, int(g) + 1] for u, g in zip(data.units, labels)])
        fit = reg.fit
        sizes = np.bincount(labels, minlength=fit.k)
        for k in range(fit.k):
            for j in range(panel.p):
                slope_rows.append([name, k + 1, f"x{j + 1}", int(sizes[k]), _num(fit.alphas[k, j]),
                                   _num(fit.corrected[k, j]), _num(fit.se[k, j])])
        diag.update({
            f"k_{name}": reg.stk.k_hat,
            f"stk_converged_{name}": reg.stk.converged,
            f"gamma_trace_{name}": [r.gamma_m for r in reg.stk.reports],
            f"critical_trace_{name}": [r.critical for r in reg.stk.reports],
            f"ife_iterations_{name}": fit.iterations,
            f"ife_converged_{name}": fit.converged,
            f"periods_{name}": [reg.start + 1, reg.stop],
        })
    _write_rows(out / "slopes.csv",
                ["regime", "group", "regressor", "size", "alpha", "alpha_corrected", "se"], slope_rows)
    _write_json(out / "diagnostics.json", {k: _jsonable(v) for k, v in diag.items()})


def emit_test(out: Path, cfg: RunConfig) -> None:
    data = ingest_csv(cfg.input)
    panel = data.panel
    require_full_panel(panel)
    r0 = 1 if cfg.r0 is None else cfg.r0
    res = supf_test(panel, r0, cfg.epsilon, cfg.critical, kernel=cfg.kernel_config())
    brk = res.candidate_break
    _write_json(out / "supf.json", {
        "f_nt": _jsonable(res.f_nt), "reject": res.reject, "critical_value": res.critical_value,
        "epsilon": res.epsilon, "r0": r0, "candidate_break": brk,
        "candidate_break_time": data.times[brk - 1], "argmax_unit": data.units[res.argmax_unit],
        "skipped_candidates": res.skipped, "n": panel.n, "t": panel.t_len, "p": panel.p,
    })
    _write_rows(out / "supf_units.csv", ["unit", "sup_f", "break"],
                [[u, _num(f), int(b)] for u, f, b in zip(data.units, res.per_unit, res.per_unit_break)])


def emit_simulate(out: Path, cfg: RunConfig) -> None:
    spec = DgpSpec.parse(cfg.dgp, n=cfg.n, t_len=cfg.t, seed=cfg.seed)
    panel, truth = generate(spec)
    write_panel_csv(out / "panel.csv", panel)
    _write_json(out / "truth.json", {
        "dgp": spec.name, "seed": spec.seed, "n": spec.n, "t": spec.t_len, "t1": truth.t1,
        "k_pre": truth.k_pre, "k_post": truth.k_post, "ranks": list(truth.ranks),
        "labels_pre": [int(g) + 1 for g in truth.labels_pre],
        "labels_post": [int(g) + 1 for g in truth.labels_post],
        "alpha_pre": _jsonable(truth.alpha_pre), "alpha_post": _jsonable(truth.alpha_post),
    })


def emit_replicate(out: Path, cfg: RunConfig) -> None:
    spec = DgpSpec.parse(cfg.dgp, n=cfg.n, t_len=cfg.t, seed=cfg.seed)
    summary, records = replicate(spec, cfg.reps, cfg.pipeline(), mode=cfg.mode, workers=cfg.workers)
    write_summary_csv(out / "summary.csv", [summary])
    write_summary_csv(out / "replications.csv", records)


EMITTERS = {"estimate": emit_estimate, "test": emit_test,
            "simulate": emit_simulate, "replicate": emit_replicate}


def run(cfg: RunConfig) -> int:
    """Execute one command.  Artifacts are staged in a scratch directory and
    moved into place only when every one was written."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".partial-", dir=out))
    try:
        EMITTERS[cfg.command](stage, cfg)
        for f in sorted(stage.iterdir()):
            os.replace(f, out / f.name)
    except Exception as exc:
        log.error("%s failed: %s: %s", cfg.command, type(exc).__name__, exc)
        return 1
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ValueError, OSError) as exc:
        log.error("bad configuration: %s", exc)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
