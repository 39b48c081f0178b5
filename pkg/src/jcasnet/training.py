"""Three-stage end-to-end training and the validation protocol."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Cplx, Tape
from .channel import NoiseConfig, draw_scenes, radar_matrix, snapshot_stack, steering
from .detection import (
    offset_position,
    count_targets,
    counting_encode,
    onehot_offset_vector,
    pd_pf_counting,
    pd_pf_from_counts,
    pd_pf_onehot,
    sort_desc,
)
from .esprit import esprit_scan
from .model import JcasModel, bmi, posteriors_to_llrs, scan_decision
from .numerics import cnormal_sample, rng_stream
from .setmethods import METHODS, align_batch, matched_sq_errors

log = logging.getLogger(__name__)

STAGE_TERMS = {1: ("comm", "angle"), 2: ("comm", "detect"), 3: ("comm", "detect", "angle")}


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    M: int = 8
    K: int = 16
    t_max: int = 3
    comm_snr_db: float = 20.0
    radar_snr_db: float = 20.0
    pf_target: float = 1e-2
    w_r: float = 0.9
    w_a: float = 20.0
    lr: float = 1e-3
    epochs: int = 30
    batches_per_epoch: int | None = None  # default 20 * t_max
    batch_size: int = 2000
    encoding: str = "counting"
    set_method: str = "permute"
    seed: int = 0
    phi_region_deg: tuple = (30.0, 50.0)
    theta_region_deg: tuple = (-20.0, 20.0)
    d_over_lambda: float = 0.5
    fluctuation: str = "snapshot"
    count_schedule: str = "mixed"
    epoch_eval_samples: int = 2000

    def __post_init__(self):
        self.phi_region_deg = tuple(float(v) for v in self.phi_region_deg)
        self.theta_region_deg = tuple(float(v) for v in self.theta_region_deg)
        self.validate()

    def validate(self) -> None:
        if self.M < 2 or self.M & (self.M - 1):
            raise ValueError(f"M must be a power of two, got {self.M}")
        if self.K < 2 or self.t_max < 1 or self.t_max >= self.K:
            raise ValueError("need K >= 2 and 1 <= t_max < K")
        if not 0 < self.w_r < 1 or self.w_a <= 0:
            raise ValueError("need 0 < w_r < 1 and w_a > 0")
        if not 0 < self.pf_target < 1:
            raise ValueError("pf_target must lie in (0, 1)")
        if self.encoding not in ("counting", "onehot"):
            raise ValueError(f"unknown encoding {self.encoding!r}")
        if self.set_method not in METHODS:
            raise ValueError(f"unknown set method {self.set_method!r}")
        if self.count_schedule not in ("cycle", "mixed"):
            raise ValueError(f"unknown count schedule {self.count_schedule!r}")
        if self.fluctuation not in ("snapshot", "scan"):
            raise ValueError(f"unknown fluctuation model {self.fluctuation!r}")
        for lo, hi in (self.phi_region_deg, self.theta_region_deg):
            if not -90 <= lo <= hi <= 90:
                raise ValueError(f"invalid angle region [{lo}, {hi}]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @property
    def n_batches(self) -> int:
        return self.batches_per_epoch or 20 * self.t_max

    @property
    def regions(self) -> tuple:
        return tuple(np.deg2rad([*self.phi_region_deg, *self.theta_region_deg]))

    @property
    def noise(self) -> NoiseConfig:
        return NoiseConfig.from_snr_db(self.comm_snr_db, self.radar_snr_db)


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    loss: float
    loss_comm: float
    loss_detect: float
    loss_angle: float
    train_pd: float
    train_pf: float
    pd: float
    pf: float
    bmi: float
    rmse: float
    logit_offset: float


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    stage: int
    n_targets: int
    loss: float
    train_pd: float
    train_pf: float
    logit_offset: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    batches: list = field(default_factory=list)


@dataclass
class MetricsRecord:
    u: int
    bmi: float
    pd: float
    pf: float
    rmse_nn: float
    rmse_nn_present: float
    rmse_esprit: float
    gain_comm_db: float
    gain_radar_db: float
    n_scans: int
    n_pairs_nn: int
    n_pairs_esprit: int


def stage_of(epoch: int, total_epochs: int) -> int:
    """Stage 1 before ceil(E/3), stage 2 before ceil(2E/3), stage 3 after."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch < math.ceil(total_epochs / 3):
        return 1
    if epoch < math.ceil(2 * total_epochs / 3):
        return 2
    return 3


def combined_loss(stage: int, l_comm, l_detect, l_angle, w_r: float, w_a: float):
    terms = STAGE_TERMS[stage]
    total = l_comm * (1 - w_r)
    if "detect" in terms:
        total = total + l_detect * w_r
    if "angle" in terms:
        total = total + l_angle * (w_r * w_a)
    return total


def beam_gain(nu, region, cfg, n_grid: int = 201) -> float:
    """Mean of ``|a(phi)^T nu|^2`` over a uniform angle grid of ``region``, in dB."""
    grid = np.linspace(region[0], region[1], n_grid)
    g = np.abs(steering(grid, cfg) @ np.asarray(nu)) ** 2
    return float(10 * np.log10(np.mean(g)))


# ----------------------------------------------------------------- training


def _system_losses(model: JcasModel, cfg: TrainConfig, scenes, noise_rng):
    """Forward one minibatch through the differentiable system; call inside a Tape."""
    noise = cfg.noise
    arr = model.array
    N = len(scenes)
    const = model.constellation_t()
    x = const[scenes.message]
    x = Cplx(x.re.reshape(N, 1), x.im.reshape(N, 1))
    nu = model.beam_t()

    # communication link, receiver input z_c / kappa = x + (n / beta) / (a^T nu)
    gain = nu.rmatvec(steering(scenes.phi, arr))  # (N, 1)
    n_c = cnormal_sample(N, noise.sigma_n2, noise_rng)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = (n_c / scenes.beta)[:, None]
    z_norm = x + gain.inv() * scaled
    post = model.decoder(z_norm.to_real())
    bits = model.labeling(scenes.message)
    p_one = post @ model.labeling.bits.astype(np.float64)
    l_comm = ad.loss_bce(p_one, bits)

    # radar: z_r = x G nu + n
    G = radar_matrix(scenes.theta, scenes.alpha, arr).reshape(N * arr.K, arr.K)
    echo = nu.rmatvec(G)
    echo = Cplx(echo.re.reshape(N, arr.K), echo.im.reshape(N, arr.K))
    n_r = cnormal_sample((N, arr.K), noise.sigma_n2, noise_rng)
    z_r = (x * echo + n_r).to_real()

    counts = scenes.n_targets
    logits = model.detector.pre_activation(z_r)
    if model.encoding == "counting":
        C = counting_encode(counts, cfg.t_max)
        zero_idx = np.flatnonzero(C.ravel() == 0)
        pos = offset_position(logits.data.ravel()[zero_idx], cfg.pf_target)
        if pos is None:
            off_t = ad.Tensor(model.offset)
        else:
            # the offset is one of the logits, so it stays in the graph
            off_t = ad.take(logits.reshape(-1), zero_idx[pos])
        offset = float(off_t.data)
        l_detect = ad.loss_bce_logits(logits - off_t, C)
        train_pd, train_pf = pd_pf_counting(C, ad.sigmoid_np(logits.data - offset), sort=False)
    else:
        offset = model.offset
        o = ad.softmax(logits)
        excess = np.maximum(np.arange(cfg.t_max + 1)[None, :] - counts[:, None], 0)
        den = max(float((cfg.t_max - counts).sum()), 1.0)
        # soft P_f is a per-batch constant: differentiating through it rewards
        # inflating P_f, since the shift then adds mass to nonzero counts
        soft_pf = float((o.data * excess).sum() / den)
        p_off = onehot_offset_vector(soft_pf, cfg.pf_target, cfg.t_max)
        o = ad.clip(o + p_off, 0.0, 1.0)
        l_detect = ad.loss_ce(o, counts)
        train_pd, train_pf = pd_pf_onehot(counts, o.data)

    rows = np.flatnonzero(counts > 0)
    if rows.size:
        theta_hat = model.angle_net(ad.take(z_r, rows))
        truth, idx = align_batch(cfg.set_method, scenes.theta[rows], theta_hat.data, counts[rows])
        est = ad.take_along(theta_hat, idx, axis=1)
        l_angle = ad.loss_mse(est, truth, scenes.target_mask[rows])
    else:
        l_angle = ad.Tensor(0.0)
    return l_comm, l_detect, l_angle, offset, train_pd, train_pf


def train(cfg: TrainConfig, model: JcasModel | None = None, progress=None):
    """Train a model from scratch (or continue ``model``); returns ``(model, history)``."""
    if model is None:
        model = JcasModel(cfg.M, cfg.K, cfg.t_max, cfg.encoding, cfg.regions,
                          cfg.d_over_lambda, rng=rng_stream(cfg.seed, "init"))
    opt = Adam(model.params, lr=cfg.lr)
    scene_rng = rng_stream(cfg.seed, "train-scenes")
    noise_rng = rng_stream(cfg.seed, "train-noise")
    history = TrainHistory()
    p_zero = 1.0 / (cfg.t_max + 1)
    phi_reg, theta_reg = cfg.regions[:2], cfg.regions[2:]

    for epoch in range(cfg.epochs):
        stage = stage_of(epoch, cfg.epochs)
        sums = np.zeros(6)
        for j in range(cfg.n_batches):
            n_t = j % cfg.t_max + 1 if cfg.count_schedule == "cycle" else None
            scenes = draw_scenes(cfg.batch_size, cfg.M, cfg.t_max, phi_reg, theta_reg,
                                 cfg.noise, scene_rng, n_targets=n_t, p_zero=p_zero)
            with Tape() as tape:
                l_comm, l_det, l_ang, offset, tpd, tpf = _system_losses(model, cfg, scenes, noise_rng)
                loss = combined_loss(stage, l_comm, l_det, l_ang, cfg.w_r, cfg.w_a)
            values = [float(loss.data), float(l_comm.data), float(l_det.data), float(l_ang.data)]
            if not all(math.isfinite(v) for v in values):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {j}: {values}",
                    {"epoch": epoch, "batch": j, "losses": values, "model": model},
                )
            grads = tape.backward(loss)
            opt.step(grads)
            if offset is not None:
                model.offset = float(offset)
            sums += np.array(values + [tpd, tpf])
            history.batches.append(BatchRecord(epoch, j, stage, -1 if n_t is None else n_t, values[0], tpd, tpf, model.offset))
        mean = sums / cfg.n_batches
        ev = evaluate_snapshot(model, cfg, cfg.epoch_eval_samples, rng_stream(cfg.seed, "epoch-eval"))
        rec = EpochRecord(epoch, stage, *mean[:4], mean[4], mean[5],
                          ev["pd"], ev["pf"], ev["bmi"], ev["rmse"], model.offset)
        history.epochs.append(rec)
        log.info("epoch %d stage %d loss %.4f bmi %.3f pd %.3f pf %.4f rmse %.4f",
                 epoch, stage, rec.loss, rec.bmi, rec.pd, rec.pf, rec.rmse)
        if progress is not None:
            progress(rec, model)
    return model, history


def evaluate_snapshot(model: JcasModel, cfg: TrainConfig, n: int, rng) -> dict:
    """Quick single-snapshot evaluation used for per-epoch history."""
    m = validate(model, cfg, [1], n, rng=rng, esprit=False)[0]
    return {"pd": m.pd, "pf": m.pf, "bmi": m.bmi, "rmse": m.rmse_nn}


# --------------------------------------------------------------- validation


def comm_bmi(model: JcasModel, cfg: TrainConfig, n: int, rng) -> float:
    noise = cfg.noise
    msgs = rng.integers(0, cfg.M, size=n)
    phi = rng.uniform(*cfg.regions[:2], size=n)
    beta = cnormal_sample(n, noise.sigma_c2, rng)
    kappa = beta * (steering(phi, model.array) @ model.beamform())
    z = kappa * model.encode(msgs) + cnormal_sample(n, noise.sigma_n2, rng)
    post = model.decode(z / kappa)
    return bmi(posteriors_to_llrs(post, model.labeling), model.labeling(msgs))


def _align_mean(probs, angles, counts):
    return scan_decision(np.moveaxis(probs, 1, 2), np.moveaxis(angles, 1, 2), "permute", counts)


def validate(model: JcasModel, cfg: TrainConfig, u_list, n_samples: int, rng=None,
             esprit: bool = True, chunk: int = 4000) -> list[MetricsRecord]:
    """Metrics per upsampling factor ``u`` with the frozen logit offset.

    The same scenes are used for every ``u``. RMSE counts only targets that
    are both present and detected, paired by the permute matcher;
    ``rmse_nn_present`` pairs against all present targets instead.
    """
    rng = rng if rng is not None else rng_stream(cfg.seed, "validate")
    seed = int(rng.integers(2**63))
    noise = cfg.noise
    phi_reg, theta_reg = cfg.regions[:2], cfg.regions[2:]
    bmi_val = comm_bmi(model, cfg, n_samples, rng_stream(seed, "comm"))
    scenes_all = draw_scenes(n_samples, cfg.M, cfg.t_max, phi_reg, theta_reg, noise,
                             rng_stream(seed, "scenes"))
    nu = model.beamform()
    gains = (beam_gain(nu, phi_reg, model.array), beam_gain(nu, theta_reg, model.array))
    transmit = model.transmitter()
    out = []
    for u in u_list:
        snap_rng = rng_stream(seed, f"snapshots-u{u}")
        hits = np.zeros(2)
        pd_num = pf_num = 0.0
        sq_nn, sq_present, sq_es = [], [], []
        for start in range(0, n_samples, chunk):
            sl = slice(start, min(start + chunk, n_samples))
            scenes = _subset(scenes_all, sl)
            Z, _ = snapshot_stack(scenes, u, transmit, cfg.M, noise, snap_rng,
                                  model.array, cfg.fluctuation)
            n = len(scenes)
            flat = np.moveaxis(Z, 2, 1).reshape(n * u, cfg.K)
            probs = model.detection_probs(flat).reshape(n, u, -1)
            angles = model.estimate_angles(flat).reshape(n, u, cfg.t_max)
            T = scenes.n_targets
            p_bar = probs.mean(axis=1)
            if model.encoding == "counting":
                h = count_targets(p_bar)
                C = counting_encode(T, cfg.t_max)
                est = np.floor(sort_desc(p_bar) + 0.5)
                pd_num += (est * C).sum()
                pf_num += (est * (1 - C)).sum()
            else:
                h = np.argmax(p_bar, axis=1)
                pd_num += np.minimum(T, h).sum()
                pf_num += (np.maximum(T, h) - T).sum()
            hits += [T.sum(), (cfg.t_max - T).sum()]
            _, theta_det = _align_mean(probs, angles, h)
            sq_nn.append(matched_sq_errors(scenes.theta, T, theta_det, h))
            _, theta_all = _align_mean(probs, angles, T)
            sq_present.append(matched_sq_errors(scenes.theta, T, theta_all, T))
            if esprit:
                for t_hat in range(1, cfg.t_max + 1):
                    rows = np.flatnonzero((h == t_hat) & (T > 0))
                    if rows.size == 0:
                        continue
                    est_es = esprit_scan(Z[rows], t_hat, model.array)
                    sq_es.append(matched_sq_errors(scenes.theta[rows], T[rows], est_es,
                                                   np.full(rows.size, t_hat)))
        sq_nn = np.concatenate(sq_nn)
        sq_present = np.concatenate(sq_present)
        sq_es = np.concatenate(sq_es) if sq_es else np.zeros(0)
        out.append(MetricsRecord(
            u=u,
            bmi=bmi_val,
            pd=pd_num / hits[0] if hits[0] else math.nan,
            pf=pf_num / hits[1] if hits[1] else math.nan,
            rmse_nn=_rmse(sq_nn),
            rmse_nn_present=_rmse(sq_present),
            rmse_esprit=_rmse(sq_es) if esprit else math.nan,
            gain_comm_db=gains[0],
            gain_radar_db=gains[1],
            n_scans=n_samples,
            n_pairs_nn=int(sq_nn.size),
            n_pairs_esprit=int(sq_es.size),
        ))
    return out


def _rmse(sq: np.ndarray) -> float:
    return float(np.sqrt(sq.mean())) if sq.size else math.nan


def _subset(scenes, sl):
    return type(scenes)(**{f.name: getattr(scenes, f.name)[sl] for f in fields(scenes)})
