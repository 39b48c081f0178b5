"""The five trainable subnets and their composition into transmitter and receivers."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Cplx, Mlp, complex_to_real, softmax_np
from .channel import ArrayConfig
from .detection import apply_offset
from .setmethods import align_batch

LLR_CLAMP = 40.0
ENCODINGS = ("counting", "onehot")


class BitLabeling:
    """Natural binary labeling, most significant bit first: message ``m`` -> bits of ``m``."""

    def __init__(self, M: int):
        if M < 2 or M & (M - 1):
            raise ValueError(f"M must be a power of two >= 2, got {M}")
        self.M = M
        self.n_bits = int(math.log2(M))
        shifts = np.arange(self.n_bits - 1, -1, -1)
        self.bits = (np.arange(M)[:, None] >> shifts) & 1  # (M, n_bits)

    def __call__(self, messages) -> np.ndarray:
        return self.bits[np.asarray(messages)]


def posteriors_to_llrs(posterior, labeling: BitLabeling) -> np.ndarray:
    """Bitwise LLRs ``ln P(b=0) / P(b=1)`` by marginalising symbol posteriors, clamped to +-40."""
    P = np.asarray(posterior, dtype=np.float64)
    p1 = P @ labeling.bits
    p0 = P.sum(axis=-1, keepdims=True) - p1
    with np.errstate(divide="ignore", invalid="ignore"):
        llr = np.log(p0) - np.log(p1)
    return np.clip(np.nan_to_num(llr, nan=0.0), -LLR_CLAMP, LLR_CLAMP)


def bmi(llrs, bits) -> float:
    """Bit-wise mutual information in bits per symbol."""
    llrs = np.asarray(llrs, dtype=np.float64)
    bits = np.asarray(bits)
    n_bits = llrs.shape[-1]
    signed = (1 - 2 * bits) * llrs
    penalty = np.logaddexp(0.0, -signed) / np.log(2.0)
    return float(n_bits - penalty.sum(axis=-1).mean())


class JcasModel:
    """Encoder, beamformer, decoder, target detector and angle estimator.

    Layer widths for message count ``M``, ``K`` antennas and ``T_max`` targets:

    ========== ======================= =================
    encoder    [M, 2M, 2M, 2M, 2]      mean power norm
    beamformer [5, K, K, 2K, 2K]       power norm
    decoder    [2, 2M, 2M, 2M, M]      softmax
    detector   [2K, 2K, 2K, K, T_max]  sigmoid (one-hot: T_max + 1, softmax)
    angle net  [2K, 2K, 2K, K, T_max]  pi/2 tanh
    ========== ======================= =================
    """

    def __init__(self, M=8, K=16, t_max=3, encoding="counting", regions=None,
                 d_over_lambda=0.5, rng=None, nets=None):
        if encoding not in ENCODINGS:
            raise ValueError(f"encoding must be one of {ENCODINGS}, got {encoding!r}")
        self.labeling = BitLabeling(M)
        self.M, self.K, self.t_max, self.encoding = M, K, t_max, encoding
        self.array = ArrayConfig(K, d_over_lambda)
        if regions is None:
            regions = np.deg2rad([30.0, 50.0, -20.0, 20.0])
        self.regions = tuple(float(r) for r in regions)
        self.offset = 0.0
        if nets is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            n_det = t_max if encoding == "counting" else t_max + 1
            nets = {
                "encoder": Mlp([M, 2 * M, 2 * M, 2 * M, 2], "mean_power_norm", rng),
                "beamformer": Mlp([5, K, K, 2 * K, 2 * K], "power_norm", rng),
                "decoder": Mlp([2, 2 * M, 2 * M, 2 * M, M], "softmax", rng),
                "detector": Mlp([2 * K, 2 * K, 2 * K, K, n_det],
                                "sigmoid" if encoding == "counting" else "softmax", rng),
                "angle": Mlp([2 * K, 2 * K, 2 * K, K, t_max], "scaled_tanh", rng),
            }
        self.nets = nets

    encoder = property(lambda self: self.nets["encoder"])
    beamformer = property(lambda self: self.nets["beamformer"])
    decoder = property(lambda self: self.nets["decoder"])
    detector = property(lambda self: self.nets["detector"])
    angle_net = property(lambda self: self.nets["angle"])

    @property
    def params(self) -> list:
        return [p for net in self.nets.values() for p in net.params]

    # ------------------------------------------------ differentiable pieces

    def constellation_t(self) -> Cplx:
        out = self.encoder(np.eye(self.M))
        return Cplx(out[:, 0], out[:, 1])

    def beam_t(self) -> Cplx:
        """Beamforming weights as a ``(K, 1)`` complex column."""
        inp = np.array([[*self.regions, 1.0]])
        out = self.beamformer(inp)
        K = self.K
        return Cplx(out[0, :K].reshape(K, 1), out[0, K:].reshape(K, 1))

    # ------------------------------------------------------ numpy interface

    def constellation(self) -> np.ndarray:
        return self.constellation_t().numpy()

    def encode(self, m) -> np.ndarray:
        m = np.asarray(m)
        if np.any((m < 0) | (m >= self.M)):
            raise ValueError(f"message index outside [0, {self.M - 1}]")
        return self.constellation()[m]

    def beamform(self) -> np.ndarray:
        return self.beam_t().numpy()[:, 0]

    def transmitter(self):
        """Callable mapping message indices ``(n,)`` to transmit vectors ``(n, K)``."""
        const = self.constellation()
        nu = self.beamform()
        return lambda m: const[np.asarray(m)][:, None] * nu[None, :]

    def decode(self, z_norm) -> np.ndarray:
        z = np.asarray(z_norm)
        return self.decoder(complex_to_real(z[..., None])).data

    def detect(self, z_r) -> np.ndarray:
        """Raw detector logits."""
        return self.detector.pre_activation(complex_to_real(np.asarray(z_r))).data

    def detection_probs(self, z_r) -> np.ndarray:
        logits = self.detect(z_r)
        if self.encoding == "counting":
            return apply_offset(logits, self.offset)
        return softmax_np(logits)

    def estimate_angles(self, z_r) -> np.ndarray:
        return self.angle_net(complex_to_real(np.asarray(z_r))).data

    # ------------------------------------------------------------ storage

    def meta(self) -> dict:
        return {
            "M": self.M, "K": self.K, "t_max": self.t_max, "encoding": self.encoding,
            "d_over_lambda": self.array.d_over_lambda, "regions": list(self.regions),
            "logit_offset": self.offset, "labeling": "natural-msb",
        }

    def save(self, path, extra: dict | None = None) -> None:
        meta = self.meta()
        if extra:
            meta["extra"] = extra
        ad.save_checkpoint(path, self.nets, meta)

    @classmethod
    def load(cls, path) -> "JcasModel":
        nets, meta = ad.load_checkpoint(path)
        model = cls(meta["M"], meta["K"], meta["t_max"], meta["encoding"],
                    meta["regions"], meta["d_over_lambda"], nets=nets)
        model.offset = float(meta["logit_offset"])
        return model


def scan_decision(probs, angles, method: str = "permute", n_active=None):
    """Combine ``u`` snapshots of one scan or of a batch of scans.

    ``probs`` is ``(..., D, u)`` and ``angles`` ``(..., T_max, u)``. Detection
    probabilities are averaged over snapshots. Each snapshot's angle vector is
    aligned to the first snapshot with the set method over the leading
    ``n_active`` slots (default: all), then averaged.
    """
    probs = np.asarray(probs, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    single = angles.ndim == 2
    if single:
        probs, angles = probs[None], angles[None]
    N, t_max, u = angles.shape
    counts = np.full(N, t_max) if n_active is None else np.broadcast_to(np.asarray(n_active), (N,))
    ref = angles[:, :, 0]
    total = np.zeros((N, t_max))
    for j in range(u):
        col = angles[:, :, j]
        if method == "sortall":
            _, idx = align_batch("sortall", ref, col, counts)
        elif method == "permute" and j > 0:
            _, idx = align_batch("permute", ref, col, counts)
        else:
            idx = np.tile(np.arange(t_max), (N, 1))
        total += np.take_along_axis(col, idx, axis=1)
    p_bar = probs.mean(axis=-1)
    theta_bar = total / u
    return (p_bar[0], theta_bar[0]) if single else (p_bar, theta_bar)
