import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jcasnet.channel import ArrayConfig, steering
from jcasnet.esprit import (
    ClampedEstimate,
    esprit,
    esprit_scan,
    esprit_single_snapshot,
    hankel_length,
    sample_covariance,
)
from jcasnet.numerics import cnormal_sample, rng_stream

CFG = ArrayConfig(16, 0.5)


def scan(theta, u, rng, noise=0.0, cfg=CFG):
    A = steering(np.asarray(theta), cfg).T  # (K, T)
    S = cnormal_sample((len(theta), u), 1.0, rng)
    return A @ S + cnormal_sample((cfg.K, u), noise, rng)


class TestCovariance:
    def test_single_column(self):
        z = np.arange(4) + 1j
        R = sample_covariance(z)
        np.testing.assert_allclose(R, np.outer(z, z.conj()))
        assert np.linalg.matrix_rank(R) == 1

    def test_orthogonal_columns(self):
        Z = np.eye(4)[:, :2] * 3.0
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(sample_covariance(Z)))[::-1], [4.5, 4.5, 0, 0])

    def test_exactly_hermitian(self):
        Z = scan([0.1, -0.3], 5, rng_stream(0), 1.0)
        R = sample_covariance(Z)
        assert np.abs(R - R.conj().T).max() == 0.0


class TestCovarianceEsprit:
    def test_two_targets_noiseless(self):
        theta = np.deg2rad([-10.0, 15.0])
        R = sample_covariance(scan(theta, 8, rng_stream(1)))
        np.testing.assert_allclose(esprit(R, 2, CFG), theta, atol=1e-6)

    def test_rank_one_exact(self):
        a = steering(0.37, CFG)
        assert esprit(np.outer(a, a.conj()), 1, CFG)[0] == pytest.approx(0.37, abs=1e-12)

    def test_broadside(self):
        assert abs(esprit(np.ones((16, 16)), 1, CFG)[0]) < 1e-12

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            esprit(np.eye(16), 16, CFG)
        with pytest.raises(ValueError):
            esprit(np.eye(16), 0, CFG)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_noiseless_exactness(self, T, seed):
        rng = np.random.default_rng(seed)
        while True:
            theta = np.sort(rng.uniform(-np.pi / 3, np.pi / 3, T))
            if T == 1 or np.min(np.diff(theta)) > 0.05:
                break
        u = int(rng.integers(T, 12))
        Z = scan(theta, u, rng)
        np.testing.assert_allclose(esprit(sample_covariance(Z), T, CFG), theta, atol=1e-6)
        np.testing.assert_allclose(esprit_scan(Z, T, CFG), theta, atol=1e-6)

    def test_scale_and_conjugation(self):
        Z = scan([0.2, -0.4], 6, rng_stream(2), 0.1)
        base = esprit_scan(Z, 2, CFG)
        np.testing.assert_allclose(esprit_scan(Z * (3 - 4j), 2, CFG), base, atol=1e-10)
        np.testing.assert_allclose(esprit_scan(Z.conj(), 2, CFG), -base[::-1], atol=1e-10)

    def test_clamp_flag(self):
        # phase 0.9 pi read with a smaller assumed spacing needs sin > 1
        cfg = ArrayConfig(8, 0.5)
        a = steering(np.arcsin(0.9), cfg)
        R = np.outer(a, a.conj())
        with pytest.warns(ClampedEstimate):
            theta = esprit(R, 1, ArrayConfig(8, 0.3))
        assert theta[0] == pytest.approx(np.pi / 2)
        _, flag = esprit(R, 1, ArrayConfig(8, 0.3), return_flags=True)
        assert flag
        theta, flag = esprit(R, 1, cfg, return_flags=True)
        assert not flag and abs(theta[0] - np.arcsin(0.9)) < 1e-10

    def test_batched_equals_loop(self):
        rng = rng_stream(3)
        Zs = np.stack([scan(rng.uniform(-0.3, 0.3, 2), 10, rng, 0.1) for _ in range(20)])
        batch = esprit(sample_covariance(Zs), 2, CFG)
        for n in range(20):
            np.testing.assert_allclose(batch[n], esprit(sample_covariance(Zs[n]), 2, CFG), atol=1e-10)


class TestSingleSnapshot:
    def test_default_length(self):
        assert hankel_length(16) == 8
        assert hankel_length(7) == 4

    def test_single_target_noiseless(self):
        z = steering(-0.21, CFG) * (0.3 + 2j)
        assert esprit_single_snapshot(z, 1, CFG)[0] == pytest.approx(-0.21, abs=1e-6)

    def test_two_targets_noiseless(self):
        theta = np.deg2rad([-12.0, 18.0])
        z = steering(theta, CFG).T @ np.array([1.0 + 0.5j, -0.7 + 0.2j])
        np.testing.assert_allclose(esprit_single_snapshot(z, 2, CFG), theta, atol=1e-4)

    def test_all_ones(self):
        assert abs(esprit_single_snapshot(np.ones(16), 1, CFG)[0]) < 1e-12

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            esprit_single_snapshot(np.ones(16), 8, CFG)


class TestScan:
    def test_u1_dispatches_to_hankel(self):
        z = scan([0.1, -0.2], 1, rng_stream(4), 0.01)
        np.testing.assert_array_equal(esprit_scan(z, 2, CFG), esprit_single_snapshot(z[:, 0], 2, CFG))

    def test_gram_path_matches_covariance(self):
        rng = rng_stream(5)
        Z = np.stack([scan(rng.uniform(-0.3, 0.3, 3), 6, rng, 0.05) for _ in range(30)])
        np.testing.assert_allclose(esprit_scan(Z, 3, CFG), esprit(sample_covariance(Z), 3, CFG), atol=1e-9)

    def test_zero_targets(self):
        assert esprit_scan(np.ones((16, 4)), 0, CFG).shape == (0,)
        assert esprit_scan(np.ones((5, 16, 4)), 0, CFG).shape == (5, 0)

    def test_more_snapshots_help(self):
        rng = rng_stream(6)
        n = 1000
        theta = rng.uniform(-0.3, 0.3, (n, 2))
        theta[:, 1] = theta[:, 0] + rng.choice([-1, 1], n) * rng.uniform(0.15, 0.3, n)
        rmse = {}
        for u in (2, 64):
            Z = np.stack([scan(theta[i], u, rng, 0.01) for i in range(n)])
            est = esprit_scan(Z, 2, CFG)
            rmse[u] = np.sqrt(np.mean((est - np.sort(theta, axis=1)) ** 2))
        assert rmse[64] < rmse[2]
