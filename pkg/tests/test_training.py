import math

import numpy as np
import pytest

from jcasnet import autodiff as ad
from jcasnet import training as tr
from jcasnet.channel import ArrayConfig, draw_scenes, steering
from jcasnet.model import JcasModel
from jcasnet.numerics import rng_stream
from jcasnet.training import (
    TrainConfig,
    TrainingDiverged,
    _system_losses,
    beam_gain,
    combined_loss,
    stage_of,
    train,
    validate,
)

TINY = dict(epochs=3, batches_per_epoch=3, batch_size=200, epoch_eval_samples=300)


class TestSchedule:
    def test_thirty_epochs(self):
        stages = [stage_of(e, 30) for e in range(30)]
        assert stages == [1] * 10 + [2] * 10 + [3] * 10

    def test_uneven(self):
        assert [stage_of(e, 7) for e in range(7)] == [1, 1, 1, 2, 2, 3, 3]
        assert [stage_of(e, 2) for e in range(2)] == [1, 2]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            stage_of(30, 30)

    def test_combined_loss_terms(self):
        c, d, a = 1.0, 10.0, 100.0
        assert combined_loss(1, c, d, a, 0.9, 20.0) == pytest.approx(0.1 + 0.9 * 20 * 100)
        assert combined_loss(2, c, d, a, 0.9, 20.0) == pytest.approx(0.1 + 9.0)
        assert combined_loss(3, c, d, a, 0.9, 20.0) == pytest.approx(0.1 + 9.0 + 1800.0)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"M": 6}, {"w_r": 1.0}, {"pf_target": 0.0}, {"encoding": "binary"},
        {"set_method": "hungarian"}, {"count_schedule": "sorted"}, {"fluctuation": "x"},
        {"phi_region_deg": (50, 30)}, {"epochs": 0}, {"t_max": 16},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.n_batches == 60 and cfg.batch_size == 2000
        np.testing.assert_allclose(np.rad2deg(cfg.regions), [30, 50, -20, 20])


class TestBeamGain:
    def test_isotropic_single_element(self):
        nu = np.zeros(16, complex)
        nu[0] = 1.0
        assert beam_gain(nu, (-0.5, 0.5), ArrayConfig(16, 0.5)) == pytest.approx(0.0, abs=1e-12)

    def test_matched_beam_peak(self):
        cfg = ArrayConfig(16, 0.5)
        nu = steering(0.3, cfg).conj() / 4.0
        assert beam_gain(nu, (0.3, 0.3), cfg) == pytest.approx(10 * np.log10(16), abs=1e-9)


@pytest.mark.parametrize("encoding", ["counting", "onehot"])
@pytest.mark.parametrize("stage", [1, 2, 3])
def test_end_to_end_gradients(encoding, stage, monkeypatch):
    """Directional finite differences through channel, detector offset and set alignment."""
    if encoding == "onehot":
        # the one-hot P_f shift is a per-batch constant; hold it at the base value
        frozen = []
        original = tr.onehot_offset_vector

        def replay(*args):
            if not frozen:
                frozen.append(original(*args))
            return frozen[0]

        monkeypatch.setattr(tr, "onehot_offset_vector", replay)
    cfg = TrainConfig(batch_size=64, encoding=encoding)
    model = JcasModel(cfg.M, cfg.K, cfg.t_max, encoding, cfg.regions, rng=rng_stream(1, "i"))
    scenes = draw_scenes(64, cfg.M, cfg.t_max, cfg.regions[:2], cfg.regions[2:], cfg.noise,
                         rng_stream(2, "s"))

    def loss(tape=None):
        with tape or ad.Tape():
            out = _system_losses(model, cfg, scenes, rng_stream(3, "n"))
            return combined_loss(stage, *out[:3], cfg.w_r, cfg.w_a)

    tape = ad.Tape()
    grads = tape.backward(loss(tape))
    rng = np.random.default_rng(0)
    for name, net in model.nets.items():
        dirs = [rng.standard_normal(p.data.shape) for p in net.params]
        analytic = sum(float((grads[p] * d).sum()) for p, d in zip(net.params, dirs) if p in grads)
        eps = 1e-6
        base = [p.data.copy() for p in net.params]
        vals = []
        for sign in (1, -1):
            for p, b, d in zip(net.params, base, dirs):
                p.data = b + sign * eps * d
            vals.append(float(loss().data))
        for p, b in zip(net.params, base):
            p.data = b
        fd = (vals[0] - vals[1]) / (2 * eps)
        assert abs(fd - analytic) <= 1e-3 * max(abs(fd), abs(analytic), 1e-6), name


@pytest.fixture(scope="module")
def run():
    return train(TrainConfig(**TINY))


class TestTrain:
    def test_history_shape(self, run):
        model, hist = run
        assert len(hist.epochs) == 3 and len(hist.batches) == 9
        assert [r.stage for r in hist.epochs] == [1, 2, 3]
        assert model.offset == hist.batches[-1].logit_offset

    def test_power_after_training(self, run):
        model, _ = run
        assert np.mean(np.abs(model.constellation()) ** 2) == pytest.approx(1.0, abs=1e-9)
        assert np.linalg.norm(model.beamform()) == pytest.approx(1.0, abs=1e-9)

    def test_deterministic(self, run):
        model, hist = run
        model2, hist2 = train(TrainConfig(**TINY))
        assert hist.batches == hist2.batches and hist.epochs == hist2.epochs
        np.testing.assert_array_equal(model.constellation(), model2.constellation())

    def test_seed_changes_run(self, run):
        _, hist = run
        _, other = train(TrainConfig(**TINY, seed=1))
        assert hist.batches[0].loss != other.batches[0].loss

    def test_cycle_schedule_records_counts(self):
        _, hist = train(TrainConfig(**{**TINY, "epochs": 1}, count_schedule="cycle"))
        assert [b.n_targets for b in hist.batches] == [1, 2, 3]

    def test_divergence_raises_with_snapshot(self):
        cfg = TrainConfig(**TINY)
        model = JcasModel(rng=rng_stream(0, "init"))
        model.encoder.params[0].data[:] = np.nan
        with pytest.raises(TrainingDiverged) as err:
            train(cfg, model)
        assert err.value.snapshot["epoch"] == 0 and err.value.snapshot["model"] is model

    def test_validate_records(self, run):
        model, _ = run
        recs = validate(model, TrainConfig(**TINY), [1, 2], 400)
        assert [r.u for r in recs] == [1, 2]
        for r in recs:
            assert r.n_scans == 400 and 0 <= r.pd <= 1 and 0 <= r.pf <= 1
            assert r.bmi == recs[0].bmi and math.isfinite(r.gain_comm_db)


def test_noiseless_decoding_after_training():
    # the comm term carries weight 1 - w_r, so this needs a few hundred steps
    cfg = TrainConfig(M=4, epochs=6, batches_per_epoch=40, batch_size=500,
                      comm_snr_db=30.0, epoch_eval_samples=200)
    model, _ = train(cfg)
    const = model.constellation()
    d = np.abs(const[:, None] - const[None, :]) + np.eye(4)
    assert d.min() > 0
    m = np.repeat(np.arange(4), 250)
    acc = np.mean(np.argmax(model.decode(const[m]), axis=1) == m)
    assert acc >= 0.99
