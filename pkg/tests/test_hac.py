import numpy as np
import pytest

from tvgroups.hac import (
    HacWarning,
    KernelConfig,
    andrews_bandwidth,
    auto_bandwidth,
    floor_psd,
    hac_batch,
    hac_covariance,
    kernel_weight,
    lag_weights,
)


def loop_hac(z, e, kernel, s_t):
    """Gamma_0 + sum_j k(j/S) (Gamma_j + Gamma_j') written out term by term."""
    t_len, p = z.shape
    out = np.zeros((p, p))
    for t in range(t_len):
        out += np.outer(z[t], z[t]) * e[t] ** 2
    for j in range(1, t_len):
        w = float(kernel_weight(j / s_t, kernel)) if s_t > 0 else 0.0
        for t in range(t_len - j):
            out += w * np.outer(z[t], z[t + j]) * e[t] * e[t + j]
        for t in range(j, t_len):
            out += w * np.outer(z[t], z[t - j]) * e[t] * e[t - j]
    return out / t_len


def test_zero_bandwidth_is_outer_product_average(rng):
    z, e = rng.standard_normal((30, 2)), rng.standard_normal(30)
    want = np.einsum("tp,tq,t->pq", z, z, e * e) / 30
    np.testing.assert_allclose(hac_covariance(z, e, "bartlett", 0), want, atol=1e-14)


def test_small_bartlett_matches_loop(rng):
    z, e = rng.standard_normal((4, 1)), rng.standard_normal(4)
    np.testing.assert_allclose(hac_covariance(z, e, "bartlett", 2), loop_hac(z, e, "bartlett", 2), atol=1e-14)


@pytest.mark.parametrize("kernel", ["bartlett", "parzen"])
def test_general_case_matches_loop(rng, kernel):
    z, e = rng.standard_normal((12, 3)), rng.standard_normal(12)
    with np.errstate(all="ignore"):
        got = hac_batch(z[None], e[None], lag_weights(12, kernel, 4))[0]
    np.testing.assert_allclose(got, loop_hac(z, e, kernel, 4), atol=1e-12)


def test_symmetric_output(rng):
    z, e = rng.standard_normal((25, 3)), rng.standard_normal(25)
    out = hac_covariance(z, e, "bartlett", 3)
    assert np.max(np.abs(out - out.T)) <= 1e-12


def test_bartlett_is_psd_before_flooring(rng):
    for _ in range(100):
        t_len = int(rng.integers(5, 40))
        z, e = rng.standard_normal((1, t_len, 3)), rng.standard_normal((1, t_len))
        s_t = int(rng.integers(0, t_len))
        raw = hac_batch(z, e, lag_weights(t_len, "bartlett", s_t))
        assert np.linalg.eigvalsh(raw[0]).min() >= -1e-10


def test_truncated_kernel_is_floored_and_flagged():
    t_len = 20
    z = np.ones((t_len, 1))
    e = (-1.0) ** np.arange(t_len)  # perfectly negatively autocorrelated scores
    with pytest.warns(HacWarning):
        out = hac_covariance(z, e, "truncated", 1)
    assert np.linalg.eigvalsh(out).min() >= 1e-12 * 0.999
    fixed, flagged = floor_psd(np.array([[[-1.0, 0.0], [0.0, 2.0]]]))
    assert flagged[0] and np.allclose(fixed[0], np.diag([1e-12, 2.0]))


def test_kernels_and_bandwidth_rules():
    assert kernel_weight(0.0) == 1.0 and kernel_weight(0.5) == 0.5 and kernel_weight(1.5) == 0.0
    assert kernel_weight(0.25, "parzen") == pytest.approx(1 - 6 * 0.0625 + 6 * 0.015625)
    assert kernel_weight(0.75, "parzen") == pytest.approx(2 * 0.25**3)
    assert kernel_weight(0.9, "truncated") == 1.0 and kernel_weight(0.1, "none") == 0.0
    with pytest.raises(ValueError):
        kernel_weight(0.1, "gaussian")
    assert auto_bandwidth(100) == 4 and auto_bandwidth(50) == 3
    with pytest.raises(ValueError):
        hac_covariance(np.ones((3, 1)), np.ones(3), "bartlett", -1)


def test_andrews_bandwidth_tracks_persistence(rng):
    n, t_len = 20, 200
    iid = rng.standard_normal((n, t_len, 1))
    ar = np.zeros_like(iid)
    for t in range(1, t_len):
        ar[:, t] = 0.8 * ar[:, t - 1] + iid[:, t]
    low, high = andrews_bandwidth(iid), andrews_bandwidth(ar)
    assert low < 1.5 < high
    # closed form for Bartlett at rho = 0.8: 1.1447 (4 rho^2 / ((1-rho)^2 (1+rho)^2) T)^(1/3)
    want = 1.1447 * (4 * 0.64 / (0.04 * 3.24) * t_len) ** (1 / 3)
    assert high == pytest.approx(want, rel=0.15)
    assert andrews_bandwidth(iid, "none") == 0.0


def test_kernel_config():
    assert KernelConfig(bandwidth=3).resolve(100) == 3
    assert KernelConfig(bandwidth="auto").resolve(100) == 4
    assert KernelConfig(dynamic=True).resolve(100) == 0
    assert KernelConfig(kernel="none").resolve(100) == 0
    assert np.all(KernelConfig(dynamic=True).lag_weights(10) == 0.0)
    assert KernelConfig().resolve(100) == 4  # data-driven rule without scores falls back
    with pytest.raises(ValueError):
        KernelConfig(kernel="cosine")
    with pytest.raises(ValueError):
        KernelConfig(bandwidth=-2)
