import csv
from dataclasses import replace

import numpy as np
import pytest

from tvgroups.core import PanelData
from tvgroups.factors import extract_factors
from tvgroups.mc import (
    FAMILIES,
    VARIANTS,
    DgpSpec,
    GroundTruth,
    build_outcome,
    generate,
    replicate,
    replication_seed,
    run_replication,
    same_partition,
    theta_from_groups,
    write_summary_csv,
)
from tvgroups.pipeline import PipelineConfig


def test_spec_parsing_and_validation():
    spec = DgpSpec.parse("dgp2.3", n=10, t_len=20, seed=4)
    assert (spec.family, spec.variant, spec.name) == ("dgp2", "v3", "dgp2.3")
    assert DgpSpec.parse("dgp4.v1").variant == "v1"
    with pytest.raises(ValueError):
        DgpSpec("dgp5")
    with pytest.raises(ValueError):
        DgpSpec(t_len=3)


def test_slope_tables():
    _, truth = generate(DgpSpec("dgp1", "v1", 20, 20, seed=0))
    np.testing.assert_allclose(truth.alpha_pre[:, 0], [0.1, 0.9])
    np.testing.assert_allclose(truth.alpha_post[:, 0], [0.05, 0.45])
    _, truth = generate(DgpSpec("dgp4", "v1", 20, 20, seed=0))
    np.testing.assert_allclose(truth.alpha_pre[:, 0], [0.1, 0.7])
    np.testing.assert_allclose(truth.alpha_pre[:, 1], [0.1, 0.9])


def test_group_shares():
    _, truth = generate(DgpSpec("dgp1", "v1", 100, 20, seed=3))
    assert np.bincount(truth.labels_pre).tolist() == [50, 50]
    assert np.array_equal(truth.labels_pre, truth.labels_post)
    _, truth = generate(DgpSpec("dgp2", "v3", 100, 20, seed=3))
    assert (truth.k_pre, truth.k_post) == (2, 3)
    assert np.bincount(truth.labels_post).tolist() == [40, 30, 30]


def test_break_date_range_and_determinism():
    seen = set()
    for seed in range(40):
        a, ta = generate(DgpSpec("dgp1", "v1", 10, 50, seed=seed))
        assert 20 <= ta.t1 <= 30
        seen.add(ta.t1)
    assert len(seen) > 5
    a, _ = generate(DgpSpec("dgp3", "v2", 10, 30, seed=9))
    b, _ = generate(DgpSpec("dgp3", "v2", 10, 30, seed=9))
    c, _ = generate(DgpSpec("dgp3", "v2", 10, 30, seed=10))
    assert np.array_equal(a.y, b.y) and not np.array_equal(a.y, c.y)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("variant", VARIANTS)
def test_every_design_has_low_rank_slopes(family, variant):
    panel, truth = generate(DgpSpec(family, variant, 30, 20, seed=1))
    assert panel.p == 2 and truth.ranks[0] == 1
    for th in theta_from_groups(truth, 30, 20):
        assert np.linalg.matrix_rank(th) <= 2


def test_no_break_single_group_is_rank_one():
    truth = GroundTruth(10, 1, 1, np.zeros(6, int), np.zeros(6, int), np.array([[0.4]]), np.array([[0.4]]), ())
    theta = theta_from_groups(truth, 6, 20)[0]
    assert np.linalg.matrix_rank(theta) == 1
    pair = extract_factors(theta, 1)
    np.testing.assert_allclose(pair.u[:, 0], 0.4 * np.ones(6), atol=1e-12)
    np.testing.assert_allclose(pair.v[:, 0], np.ones(20), atol=1e-12)


def test_membership_change_with_same_values_has_rank_two():
    _, truth = generate(DgpSpec("dgp1", "v2", 40, 30, seed=2))
    assert not same_partition(truth.labels_pre, truth.labels_post)
    assert truth.ranks[1:] == (2, 2)


def test_error_laws():
    big = DgpSpec("dgp1", "v1", 400, 200, seed=0)
    _, _, s1 = generate(big, return_shocks=True)
    _, _, s2 = generate(replace(big, family="dgp2"), return_shocks=True)
    _, _, s3 = generate(replace(big, family="dgp3"), return_shocks=True)
    _, _, s4 = generate(replace(big, family="dgp4"), return_shocks=True)
    assert np.var(s1.e) == pytest.approx(1.0, abs=0.02)
    assert np.var(s2.e) == pytest.approx(0.75, abs=0.02)
    e = s3.e
    ac = np.sum(e[:, 1:] * e[:, :-1]) / np.sum(e[:, :-1] ** 2)
    assert ac == pytest.approx(0.2, abs=0.02)
    assert np.var(s4.e) == pytest.approx(0.5, abs=0.02)


def test_dynamic_design_rebuilds_from_shocks():
    spec = DgpSpec("dgp4", "v3", 20, 25, seed=8)
    panel, truth, shocks = generate(spec, return_shocks=True)
    y, xs = build_outcome(shocks, theta_from_groups(truth, 20, 25), dynamic=True)
    assert np.array_equal(y, panel.y)
    assert np.array_equal(xs[0][:, 1:], panel.y[:, :-1])
    assert np.array_equal(xs[0][:, 0], shocks.y0)


def test_replication_seeds_are_distinct():
    seeds = {replication_seed(7, r) for r in range(100)}
    assert len(seeds) == 100
    assert replication_seed(7, 3) == replication_seed(7, 3)


def test_single_replication_summary_equals_record():
    spec = DgpSpec("dgp1", "v1", 30, 30, seed=4)
    summary, records = replicate(spec, 1, mode="steps")
    rec = records[0]
    for key in ("break", "rank0", "rank1", "rank2"):
        assert summary[f"{key}_freq"] == rec[f"{key}_ok"]
    assert summary["failures"] == 0 and rec["rep"] == 0


def test_replicate_is_worker_independent():
    spec = DgpSpec("dgp1", "v1", 30, 30, seed=2)
    a, ra = replicate(spec, 3, mode="oracle", workers=1)
    b, rb = replicate(spec, 3, mode="oracle", workers=2)
    assert a == b and ra == rb


def test_failures_are_recorded_not_raised():
    spec = DgpSpec("dgp1", "v1", 10, 12, seed=0)
    summary, records = replicate(spec, 2, PipelineConfig(r0=50), mode="oracle")
    assert summary["failures"] == 2 and summary["failure_rate"] == 1.0
    assert all(rec["failed"] == 1 and "DimensionError" in rec["error"] for rec in records)
    with pytest.raises(ValueError):
        replicate(spec, 0)
    with pytest.raises(ValueError):
        replicate(spec, 1, mode="bogus")


def test_full_replication_record():
    rec = run_replication(DgpSpec("dgp1", "v1", 60, 60, seed=replication_seed(1, 0)))
    assert rec["failed"] == 0
    for key in ("rank0_ok", "break_ok", "k_pre_ok", "member_post_ok", "member_pre_knownk_ok"):
        assert key in rec


def test_summary_csv_round_trip(tmp_path):
    rows = [{"dgp": "dgp1.1", "reps": 2, "break_freq": 0.5}, {"dgp": "dgp1.2", "reps": 2, "extra": 1.0}]
    path = tmp_path / "s.csv"
    write_summary_csv(path, rows)
    with open(path) as fh:
        got = list(csv.DictReader(fh))
    assert list(got[0]) == ["dgp", "reps", "break_freq", "extra"]
    assert got[0]["break_freq"] == "0.500000" and got[0]["extra"] == ""
    assert got[1]["extra"] == "1.000000"
