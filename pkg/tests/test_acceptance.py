"""Acceptance suite: frequency and coverage targets from Monte Carlo runs at
desk scale, exact property checks, and CLI determinism.

Every check appends one PASS/FAIL line that is printed at the end of the
pytest run.  The file also runs as a script:

    python3 tests/test_acceptance.py            # everything
    python3 tests/test_acceptance.py c6 c7      # a subset by name prefix
"""

import functools
import itertools
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))
from conftest import ACCEPTANCE_LINES  # noqa: E402

from tvgroups.breakpoint import DEFAULT_CRITICAL, estimate_break, normalized_factor_rows, sequential_breaks, supf_test
from tvgroups.cli import main as cli_main
from tvgroups.core import CoefSet, PanelData
from tvgroups.factors import FactorSet, extract_factors
from tvgroups.ife import fit_ife_hetero, homogeneity_gamma
from tvgroups.mc import DgpSpec, make_rng, replicate
from tvgroups.nnr import soft_threshold_svd
from tvgroups.stk import BetaProfiles, critical_value, kmeans, stk_run

N = T = 100
REPS = 200
COVERAGE_REPS = 500


def report(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def check(name: str, ok: bool, detail: str) -> None:
    report(name, ok, detail)
    assert ok, detail


# cached Monte Carlo cells, shared between criteria


@functools.lru_cache(maxsize=None)
def cell(dgp: str, mode: str, reps: int = REPS, seed: int = 2024):
    t0 = time.time()
    summary, _ = replicate(DgpSpec.parse(dgp, n=N, t_len=T, seed=seed), reps, mode=mode)
    summary["seconds"] = time.time() - t0
    return summary


def freq(summary, key) -> float:
    return float(summary.get(key, float("nan")))


def fmt_cell(summary, keys) -> str:
    vals = " ".join(f"{k}={freq(summary, k):.3f}" for k in keys)
    return f"{summary['dgp']} {vals} failures={summary['failures']}/{summary['reps']}"


# frequency and coverage targets


@pytest.mark.slow
def test_c1_rank_recovery():
    a = cell("dgp1.1", "full")
    b = cell("dgp1.2", "steps")
    keys = [f"rank{j}_freq" for j in range(3)]
    ok = all(freq(s, k) >= 0.95 for s in (a, b) for k in keys)
    check("C1 rank recovery (>= 0.95 every block)", ok, fmt_cell(a, keys) + "; " + fmt_cell(b, keys))


@pytest.mark.slow
def test_c2_break_detection():
    a = cell("dgp1.1", "full")
    b = cell("dgp1.3", "steps")
    ok = freq(a, "break_freq") >= 0.95 and freq(b, "break_freq") >= 0.97
    check("C2 break detection (dgp1.1 >= 0.95, dgp1.3 >= 0.97)", ok,
          fmt_cell(a, ["break_freq"]) + "; " + fmt_cell(b, ["break_freq"]))


@pytest.mark.slow
def test_c3_membership_known_k():
    a = cell("dgp1.1", "full")
    keys = ["member_pre_knownk_freq", "member_post_knownk_freq"]
    ok = all(freq(a, k) >= 0.99 for k in keys)
    check("C3 membership with known K (>= 0.99 both regimes)", ok, fmt_cell(a, keys))


@pytest.mark.slow
def test_c4_number_of_groups():
    a = cell("dgp1.1", "full")
    b = cell("dgp2.3", "full")
    ok = freq(a, "k_pre_freq") >= 0.95 and freq(a, "k_post_freq") >= 0.95 and freq(b, "k_post_freq") >= 0.85
    detail = (fmt_cell(a, ["k_pre_freq", "k_post_freq"]) + f" dist_pre={a.get('k_pre_dist')} dist_post={a.get('k_post_dist')}; "
              + fmt_cell(b, ["k_post_freq"]) + f" dist_post={b.get('k_post_dist')}")
    check("C4 number of groups (dgp1.1 >= 0.95 both, dgp2.3 post >= 0.85)", ok, detail)


@pytest.mark.slow
def test_c5_coverage():
    s = cell("dgp1.1", "oracle", COVERAGE_REPS)
    keys = sorted(k for k in s if k.startswith("coverage_"))
    ok = bool(keys) and all(abs(freq(s, k) - 0.95) <= 0.03 for k in keys)
    check("C5 95% interval coverage within 0.95 +- 0.03", ok, fmt_cell(s, keys))


# exact property checks


def test_c6_two_regime_rank_and_separation():
    rng = np.random.default_rng(6)
    worst_rank, worst_gap = 0, 0.0
    for _ in range(50):
        n, t_len = int(rng.integers(4, 21)), int(rng.integers(6, 31))
        t1 = int(rng.integers(2, t_len - 1))
        k_pre, k_post = int(rng.integers(2, 4)), int(rng.integers(2, 4))
        lab_pre, lab_post = rng.integers(0, k_pre, n), rng.integers(0, k_post, n)
        a_pre, a_post = rng.uniform(-1, 1, k_pre), rng.uniform(-1, 1, k_post)
        pre, post = a_pre[lab_pre], a_post[lab_post]
        theta = np.where(np.arange(t_len) < t1, pre[:, None], post[:, None])
        worst_rank = max(worst_rank, int(np.linalg.matrix_rank(theta)))
        fs = FactorSet((extract_factors(np.zeros((n, t_len)), 0), extract_factors(theta, 2)))
        rows = normalized_factor_rows(fs)
        dist = np.linalg.norm(rows[:t1, None, :] - rows[None, t1:, :], axis=2)
        within = max(np.ptp(rows[:t1], axis=0).max(), np.ptp(rows[t1:], axis=0).max())
        worst_gap = max(worst_gap, float(np.abs(dist - math.sqrt(2)).max()), float(within))
    ok = worst_rank <= 2 and worst_gap <= 1e-10
    check("C6 rank <= 2 and sqrt(2) separation across the break", ok,
          f"max rank={worst_rank}, max deviation={worst_gap:.2e} over 50 constructions")


def prox_objective(m, z, lam):
    return 0.5 * np.sum((m - z) ** 2) + lam * np.linalg.svd(z, compute_uv=False).sum()


def test_c7_prox_optimality_and_shrinkage():
    rng = np.random.default_rng(7)
    violations, worst = 0, 0.0
    for _ in range(20):
        shape = tuple(int(v) for v in rng.integers(2, 7, 2))
        m = rng.standard_normal(shape)
        lam = float(rng.uniform(0.05, 1.5))
        z = soft_threshold_svd(m, lam)
        base = prox_objective(m, z, lam)
        for _ in range(1000):
            d = rng.standard_normal(shape)
            d *= rng.uniform(1e-4, 0.1) / np.linalg.norm(d)
            violations += prox_objective(m, z + d, lam) < base - 1e-12
        s_in = np.linalg.svd(m, compute_uv=False)
        s_out = np.linalg.svd(z, compute_uv=False)
        worst = max(worst, float(np.abs(s_out - np.maximum(s_in - lam, 0.0)).max()))
    ok = violations == 0 and worst <= 1e-10
    check("C7 singular value soft-thresholding", ok,
          f"{violations} of 20000 perturbations improved the objective, max shrinkage error={worst:.2e}")


def brute_force_break(slopes, t_len):
    vals = []
    for s in range(2, t_len):
        total = 0.0
        for th in slopes:
            for row in th:
                a, b = row[:s], row[s:]
                total += sum((v - a.mean()) ** 2 for v in a) + sum((v - b.mean()) ** 2 for v in b)
        vals.append(total)
    return 2 + int(np.argmin(vals))


def test_c8_break_brute_force_and_identity():
    rng = np.random.default_rng(8)
    mismatches, worst = 0, 0.0
    for _ in range(100):
        n, t_len, p = int(rng.integers(1, 6)), int(rng.integers(4, 13)), int(rng.integers(1, 4))
        slopes = [rng.standard_normal((n, t_len)) for _ in range(p)]
        coefs = CoefSet((np.zeros((n, t_len)),) + tuple(slopes))
        res = estimate_break(coefs)
        mismatches += res.t1_hat != brute_force_break(slopes, t_len)
        x = np.stack(slopes)
        total = np.sum((x - x.mean(axis=-1, keepdims=True)) ** 2)
        for s in range(2, t_len):
            m1, m2 = x[..., :s].mean(axis=-1), x[..., s:].mean(axis=-1)
            between = np.sum(s * (t_len - s) / t_len * (m1 - m2) ** 2)
            within = res.profile[s - 2] * p * n * t_len
            worst = max(worst, abs(total - within - between))
    ok = mismatches == 0 and worst <= 1e-10
    check("C8 break estimate equals brute force", ok,
          f"{mismatches} mismatches in 100 instances, max identity error={worst:.2e}")


def exhaustive_two_group(x):
    n = x.shape[0]
    best = np.inf
    for bits in itertools.product((0, 1), repeat=n - 1):
        labels = np.array((0,) + bits)
        if labels.min() == labels.max():
            continue
        obj = sum(np.sum((x[labels == k] - x[labels == k].mean(axis=0)) ** 2) for k in (0, 1)) / n
        best = min(best, obj)
    return best


def test_c9_kmeans_exhaustive():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        n, d = int(rng.integers(3, 9)), int(rng.integers(1, 4))
        x = rng.standard_normal((n, d))
        worst = max(worst, kmeans(x, 2).objective - exhaustive_two_group(x))
    ok = worst <= 1e-12
    check("C9 two-group k-means equals exhaustive minimum (N <= 8)", ok,
          f"max excess over exhaustive minimum={worst:.2e} on 50 instances")


def test_c10_critical_values():
    rng = np.random.default_rng(10)
    gaps = []
    for m in (1, 2, 3):
        draws = rng.chisquare(1, (10**6, m)).max(axis=1)
        for varsigma in (0.05, 0.01):
            gaps.append((m, varsigma, float(np.mean(draws > critical_value(m, varsigma))) - varsigma))
    ok = all(abs(g) <= 0.001 for *_, g in gaps)
    check("C10 max-of-m chi2(1) critical values", ok,
          ", ".join(f"m={m} s={v}: {g:+.4f}" for m, v, g in gaps))


def snapshot(path: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_c11_cli_determinism(tmp_path):
    sim = tmp_path / "sim"
    assert cli_main(["simulate", "--dgp", "dgp1.1", "--n", "60", "--t", "60", "--seed", "11", "--output-dir", str(sim)]) == 0
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli_main(["estimate", "--input", str(sim / "panel.csv"), "--seed", "11", "--output-dir", str(out)]) == 0
        runs.append(snapshot(out))
    reps = []
    for workers in ("1", "4"):
        out = tmp_path / f"rep{workers}"
        assert cli_main(["replicate", "--dgp", "dgp1.1", "--n", "40", "--t", "40", "--reps", "4", "--seed", "11",
                         "--workers", workers, "--output-dir", str(out)]) == 0
        reps.append(snapshot(out))
    ok = runs[0] == runs[1] and reps[0] == reps[1]
    check("C11 byte-identical CLI artifacts", ok,
          f"estimate twice identical={runs[0] == runs[1]}, replicate 1 vs 4 workers identical={reps[0] == reps[1]}")


# module-level Monte Carlo examples


def two_group_panel(rng, n, t_len, noise=1.0):
    labels = np.arange(n) % 2
    lam, f = rng.standard_normal(n), rng.standard_normal(t_len)
    x = [rng.uniform(-2, 2, (n, t_len)) for _ in range(2)]
    level = np.array([0.1, 0.9])[labels]
    thetas = [np.repeat(level[:, None], t_len, axis=1) for _ in range(2)]
    return lam, f, x, thetas


def assemble(lam, f, x, thetas, noise, rng):
    y = np.outer(lam, f) + sum(xj * th for xj, th in zip(x, thetas))
    return PanelData(y + noise * rng.standard_normal(y.shape), tuple(x))


@pytest.mark.slow
def test_m1_supf_null_size():
    rejects = 0
    for r in range(100):
        rng = make_rng([101, r])
        lam, f, x, thetas = two_group_panel(rng, 20, 100)
        rejects += supf_test(assemble(lam, f, x, thetas, 1.0, rng), 1).reject
    check("M1 sup-F rejection rate without a break (<= 0.10)", rejects <= 10, f"{rejects}/100 rejections at {DEFAULT_CRITICAL}")


@pytest.mark.slow
def test_m2_supf_power():
    hits = 0
    for r in range(100):
        rng = make_rng([102, r])
        lam, f, x, thetas = two_group_panel(rng, 20, 100)
        thetas[0] = thetas[0].copy()
        thetas[0][0, 50:] += 2.0
        res = supf_test(assemble(lam, f, x, thetas, 0.1, rng), 1)
        hits += bool(res.per_unit[0] > DEFAULT_CRITICAL and abs(res.per_unit_break[0] - 50) <= 2)
    check("M2 sup-F detects a one-unit jump (>= 95/100)", hits >= 95, f"{hits}/100 detected within 2 periods")


@pytest.mark.slow
def test_m3_two_breaks():
    hits = 0
    n, t_len = 50, 150
    for r in range(100):
        rng = make_rng([103, r])
        lam, f = rng.standard_normal(n), rng.standard_normal(t_len)
        x = rng.uniform(-2, 2, (n, t_len))
        level = np.where((np.arange(t_len) >= 50) & (np.arange(t_len) < 100), 0.9, 0.1)
        y = np.outer(lam, f) + x * level[None, :] + 0.1 * rng.standard_normal((n, t_len))
        found = sequential_breaks(PanelData(y, (x,)), 1)
        hits += len(found) == 2 and abs(found[0] - 50) <= 2 and abs(found[1] - 100) <= 2
    check("M3 sequential detection of two breaks (>= 90/100)", hits >= 90, f"{hits}/100 recovered both within 2 periods")


@pytest.mark.slow
def test_m4_gamma_null_distribution():
    rng = np.random.default_rng(104)
    vals = []
    for _ in range(500):
        lam, f, x, _ = two_group_panel(rng, 50, 100)
        thetas = [np.full((50, 100), 0.5) for _ in range(2)]
        vals.append(homogeneity_gamma(assemble(lam, f, x, thetas, 1.0, rng), 1))
    mean, sd = float(np.mean(vals)), float(np.std(vals, ddof=1))
    ok = abs(mean) <= 0.15 and 0.8 <= sd <= 1.25
    check("M4 homogeneity statistic under the null (mean +-0.15, sd in [0.8, 1.25])", ok,
          f"mean={mean:+.3f} sd={sd:.3f} over 500 groups")


@pytest.mark.slow
def test_m5_gamma_power_grows_with_t():
    means = {}
    for t_len in (50, 100):
        rng = np.random.default_rng(105)
        vals = []
        for _ in range(20):
            lam, f, x, thetas = two_group_panel(rng, 50, t_len)
            vals.append(homogeneity_gamma(assemble(lam, f, x, thetas, 1.0, rng), 1) / math.sqrt(math.log(50)))
        means[t_len] = float(np.mean(vals))
    ratio = means[100] / means[50]
    check("M5 homogeneity statistic at least doubles from T=50 to T=100", ratio >= 2.0,
          f"mean at T=50 {means[50]:.1f}, at T=100 {means[100]:.1f}, ratio={ratio:.2f}")


@pytest.mark.slow
def test_m6_stk_single_group():
    hits = 0
    n = 50
    for r in range(100):
        rng = make_rng([106, r])
        lam, f, x, _ = two_group_panel(rng, n, 100)
        panel = assemble(lam, f, x, [np.full((n, 100), 0.5) for _ in range(2)], 1.0, rng)
        profiles = BetaProfiles("pre", fit_ife_hetero(panel, 1).thetas, 100)
        hits += stk_run(panel, profiles, 1).k_hat == 1
    check("M6 group count 1 on single-group data (>= 90/100)", hits >= 90, f"{hits}/100 with one group")


if __name__ == "__main__":
    import tempfile

    wanted = [a.lower() for a in sys.argv[1:]]
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith("test_") and callable(fn)]
    failed = 0
    for name, fn in tests:
        tag = name[5:]
        if wanted and not any(tag.startswith(w) for w in wanted):
            continue
        try:
            if "tmp_path" in fn.__code__.co_varnames[: fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
