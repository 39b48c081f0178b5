import itertools

import numpy as np
import pytest

from jcasnet.autodiff import Mlp
from jcasnet.model import BitLabeling, JcasModel, bmi, posteriors_to_llrs, scan_decision


@pytest.fixture(scope="module")
def model():
    return JcasModel(rng=np.random.default_rng(7))


class TestBitLabeling:
    def test_bijection(self):
        lab = BitLabeling(8)
        words = {tuple(w) for w in lab(np.arange(8))}
        assert len(words) == 8 and lab.n_bits == 3

    def test_msb_first(self):
        np.testing.assert_array_equal(BitLabeling(4)(np.array([0, 1, 2, 3])), [[0, 0], [0, 1], [1, 0], [1, 1]])

    @pytest.mark.parametrize("M", [1, 3, 6, 12])
    def test_non_power_of_two(self, M):
        with pytest.raises(ValueError):
            BitLabeling(M)


class TestLlrBmi:
    def test_uniform_posterior(self):
        np.testing.assert_array_equal(posteriors_to_llrs(np.full((3, 8), 1 / 8), BitLabeling(8)), 0.0)

    def test_hand_example(self):
        llr = posteriors_to_llrs(np.array([0.5, 0.25, 0.125, 0.125]), BitLabeling(4))
        assert llr[0] == pytest.approx(np.log(3.0), abs=1e-12)
        assert llr[1] == pytest.approx(np.log(0.625 / 0.375), abs=1e-12)

    def test_degenerate_posterior_clamps(self):
        lab = BitLabeling(8)
        P = np.zeros(8)
        P[5] = 1.0  # bits 101
        np.testing.assert_array_equal(posteriors_to_llrs(P, lab), [-40.0, 40.0, -40.0])

    def test_bmi_limits(self):
        lab = BitLabeling(8)
        bits = lab(np.arange(8))
        perfect = (1 - 2 * bits) * 40.0
        assert bmi(perfect, bits) == pytest.approx(3.0, abs=1e-15)
        assert bmi(np.zeros((8, 3)), bits) == 0.0

    def test_bmi_wrong_sign_negative(self):
        bits = np.array([[0, 1]])
        assert bmi(np.array([[-5.0, 5.0]]), bits) < 0


class TestModelStructure:
    def test_layer_widths(self, model):
        M, K, T = 8, 16, 3
        assert model.encoder.widths == [M, 2 * M, 2 * M, 2 * M, 2]
        assert model.beamformer.widths == [5, K, K, 2 * K, 2 * K]
        assert model.decoder.widths == [2, 2 * M, 2 * M, 2 * M, M]
        assert model.detector.widths == [2 * K, 2 * K, 2 * K, K, T]
        assert model.angle_net.widths == [2 * K, 2 * K, 2 * K, K, T]

    def test_onehot_detector_width(self):
        m = JcasModel(encoding="onehot")
        assert m.detector.widths[-1] == 4

    def test_bad_encoding(self):
        with pytest.raises(ValueError):
            JcasModel(encoding="binary")

    @pytest.mark.parametrize("seed", range(5))
    def test_power_constraints_untrained(self, seed):
        m = JcasModel(M=16, rng=np.random.default_rng(seed))
        assert np.mean(np.abs(m.constellation()) ** 2) == pytest.approx(1.0, abs=1e-9)
        assert np.sum(np.abs(m.beamform()) ** 2) == pytest.approx(1.0, abs=1e-9)

    def test_encode_range(self, model):
        assert model.encode(np.arange(8)).shape == (8,)
        with pytest.raises(ValueError):
            model.encode(8)
        with pytest.raises(ValueError):
            model.encode(-1)

    def test_transmitter_is_outer_product(self, model):
        m = np.array([0, 3, 3])
        y = model.transmitter()(m)
        np.testing.assert_allclose(y, model.encode(m)[:, None] * model.beamform()[None, :])

    def test_decoder_rows_sum_to_one(self, model):
        z = np.random.default_rng(0).standard_normal(50) * (1 + 1j)
        np.testing.assert_allclose(model.decode(z).sum(axis=1), 1.0, atol=1e-12)

    def test_zero_weights(self):
        m = JcasModel()
        for net in (m.decoder, m.detector):
            for p in net.params:
                p.data[...] = 0.0
        np.testing.assert_allclose(m.decode(np.ones(4, complex)), 1 / 8)
        z = np.ones((3, 16), complex)
        np.testing.assert_array_equal(m.detect(z), 0.0)
        np.testing.assert_allclose(m.detection_probs(z), 0.5)

    def test_angle_range(self, model):
        z = np.random.default_rng(1).standard_normal((10**5, 16)) * 30 + 0j
        th = model.estimate_angles(z)
        assert th.shape == (10**5, 3)
        assert np.all(np.abs(th) < np.pi / 2)

    def test_deterministic(self, model):
        z = np.random.default_rng(2).standard_normal((4, 16)) + 1j
        np.testing.assert_array_equal(model.detect(z), model.detect(z.copy()))
        np.testing.assert_array_equal(model.estimate_angles(z), model.estimate_angles(z.copy()))


class TestCheckpoint:
    def test_roundtrip_with_offset(self, model, tmp_path):
        model.offset = 1.25
        path = tmp_path / "m.ckpt"
        model.save(path, extra={"note": "x"})
        other = JcasModel.load(path)
        assert other.offset == 1.25 and other.regions == model.regions
        z = np.random.default_rng(3).standard_normal((5, 16)) + 0.5j
        np.testing.assert_array_equal(other.detection_probs(z), model.detection_probs(z))
        np.testing.assert_array_equal(other.constellation(), model.constellation())
        np.testing.assert_array_equal(other.beamform(), model.beamform())
        model.offset = 0.0

    def test_frozen_offset_is_used(self, model):
        z = np.random.default_rng(4).standard_normal((5, 16)) + 0j
        base = model.detection_probs(z)
        model.offset = 2.0
        shifted = model.detection_probs(z)
        model.offset = 0.0
        assert np.all(shifted < base)


class TestScanDecision:
    def test_u1_identity(self):
        p = np.array([[0.9], [0.2], [0.1]])
        a = np.array([[0.3], [-0.2], [0.1]])
        pb, ab = scan_decision(p, a)
        np.testing.assert_array_equal(pb, p[:, 0])
        np.testing.assert_array_equal(ab, a[:, 0])

    def test_identical_columns(self):
        p = np.tile([[0.9], [0.6], [0.1]], 5)
        a = np.tile([[0.3], [-0.2], [0.1]], 5)
        for method in ("none", "sortall", "permute"):
            pb, ab = scan_decision(p, a, method)
            np.testing.assert_allclose(pb, p[:, 0])
            expected = np.sort(a[:, 0]) if method == "sortall" else a[:, 0]
            np.testing.assert_allclose(ab, expected)

    def test_permuted_columns(self):
        v = np.array([0.3, -0.2, 0.1])
        cols = np.stack([v[list(p)] for p in itertools.permutations(range(3))], axis=1)
        _, ab = scan_decision(np.ones((3, 6)), cols, "permute")
        np.testing.assert_allclose(ab, v, atol=1e-15)
        _, ab = scan_decision(np.ones((3, 6)), cols, "none")
        np.testing.assert_allclose(ab, np.full(3, v.mean()))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        p = rng.random((20, 3, 4))
        a = rng.uniform(-1, 1, (20, 3, 4))
        n_active = rng.integers(0, 4, 20)
        pb, ab = scan_decision(p, a, "permute", n_active)
        for n in range(20):
            pn, an = scan_decision(p[n], a[n], "permute", n_active[n])
            np.testing.assert_allclose(pb[n], pn)
            np.testing.assert_allclose(ab[n], an)


def test_mlp_is_the_building_block(model):
    assert all(isinstance(net, Mlp) for net in model.nets.values())
