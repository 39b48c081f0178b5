"""Uniform linear array, Rayleigh communication link and Swerling-1 radar returns.

Everything here is vectorized over a batch of scenes. Angles are radians.
Messages are 0-based indices ``0..M-1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import cnormal_sample

DEEP_FADE = 1e-15


@dataclass(frozen=True)
class ArrayConfig:
    K: int = 16
    d_over_lambda: float = 0.5

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"array needs at least 2 antennas, got K={self.K}")
        if self.d_over_lambda <= 0:
            raise ValueError("d_over_lambda must be positive")


@dataclass(frozen=True)
class NoiseConfig:
    sigma_c2: float
    sigma_r2: float
    sigma_n2: float = 1.0

    @classmethod
    def from_snr_db(cls, comm_db: float, radar_db: float, sigma_r2: float = 1.0):
        """Fix the target variance and derive the shared noise variance from the radar SNR.

        Keeping ``sigma_r2`` at unit scale keeps the radar receiver inputs near
        unit magnitude; the communication receiver divides by ``kappa`` and is
        scale-free.
        """
        sigma_n2 = sigma_r2 * 10 ** (-radar_db / 10)
        return cls(sigma_c2=sigma_n2 * 10 ** (comm_db / 10), sigma_r2=sigma_r2, sigma_n2=sigma_n2)

    @property
    def snr_comm(self) -> float:
        return self.sigma_c2 / self.sigma_n2

    @property
    def snr_radar(self) -> float:
        return self.sigma_r2 / self.sigma_n2


@dataclass
class SceneBatch:
    """Ground truth for ``N`` scenes; target slots beyond ``n_targets`` are padding.

    ``theta`` and ``alpha`` have shape ``(N, T_max)``. Padded slots hold 0.
    """

    message: np.ndarray  # (N,) int
    phi: np.ndarray  # (N,)
    beta: np.ndarray  # (N,) complex
    n_targets: np.ndarray  # (N,) int
    theta: np.ndarray  # (N, T_max)
    alpha: np.ndarray  # (N, T_max) complex

    def __len__(self):
        return len(self.message)

    @property
    def t_max(self) -> int:
        return self.theta.shape[1]

    @property
    def target_mask(self) -> np.ndarray:
        return np.arange(self.t_max)[None, :] < self.n_targets[:, None]


def steering(theta, cfg: ArrayConfig) -> np.ndarray:
    """Steering vectors ``exp(j 2 pi d/lambda i sin(theta))``, shape ``theta.shape + (K,)``."""
    theta = np.asarray(theta, dtype=np.float64)
    i = np.arange(cfg.K)
    return np.exp(2j * np.pi * cfg.d_over_lambda * np.sin(theta)[..., None] * i)


def draw_scenes(
    n: int,
    M: int,
    t_max: int,
    phi_region: tuple[float, float],
    theta_region: tuple[float, float],
    noise: NoiseConfig,
    rng: np.random.Generator,
    n_targets: int | None = None,
    p_zero: float = 0.0,
) -> SceneBatch:
    """Draw ``n`` scenes.

    With ``n_targets=None`` the target count is uniform on ``0..t_max``.
    Otherwise every scene has ``n_targets`` targets, except that each one is
    independently replaced by an empty scene with probability ``p_zero``.
    """
    message = rng.integers(0, M, size=n)
    phi = rng.uniform(phi_region[0], phi_region[1], size=n)
    beta = cnormal_sample(n, noise.sigma_c2, rng)
    if n_targets is None:
        counts = rng.integers(0, t_max + 1, size=n)
    else:
        if not 0 <= n_targets <= t_max:
            raise ValueError(f"target count {n_targets} outside [0, {t_max}]")
        counts = np.full(n, n_targets)
        if p_zero > 0:
            counts[rng.random(n) < p_zero] = 0
    theta = rng.uniform(theta_region[0], theta_region[1], size=(n, t_max))
    alpha = cnormal_sample((n, t_max), noise.sigma_r2, rng)
    mask = np.arange(t_max)[None, :] < counts[:, None]
    return SceneBatch(
        message=message,
        phi=phi,
        beta=beta,
        n_targets=counts,
        theta=np.where(mask, theta, 0.0),
        alpha=np.where(mask, alpha, 0.0),
    )


def comm_channel(nu, x, scenes: SceneBatch, noise: NoiseConfig, rng, cfg: ArrayConfig,
                 fade_threshold: float = DEEP_FADE):
    """Single-antenna receiver output and its CSI.

    Returns ``(z_c, kappa, deep_fade)`` where ``z_c = beta a(phi)^T nu x + n``
    and ``kappa = beta a(phi)^T nu``; the receiver input is ``z_c / kappa``.
    ``deep_fade`` flags samples with ``|kappa| < fade_threshold``; they are
    kept, not dropped.
    """
    gain = steering(scenes.phi, cfg) @ np.asarray(nu)
    kappa = scenes.beta * gain
    z_c = kappa * np.asarray(x) + cnormal_sample(len(scenes), noise.sigma_n2, rng)
    return z_c, kappa, np.abs(kappa) < fade_threshold


def radar_matrix(theta, alpha, cfg: ArrayConfig) -> np.ndarray:
    """Two-way channel ``sum_k alpha_k a(theta_k) a(theta_k)^T``, shape ``(..., K, K)``."""
    a = steering(theta, cfg)  # (..., T, K)
    return np.einsum("...t,...ti,...tj->...ij", alpha, a, a)


def radar_echo(y, theta, alpha, cfg: ArrayConfig) -> np.ndarray:
    """Noise-free returns ``sum_k alpha_k a(theta_k) a(theta_k)^T y`` for ``y`` of shape ``(N, K)``."""
    a = steering(theta, cfg)  # (N, T, K)
    proj = np.einsum("nti,ni->nt", a, np.asarray(y))
    return np.einsum("nt,nti->ni", alpha * proj, a)


def radar_channel(y, scenes: SceneBatch, noise: NoiseConfig, rng, cfg: ArrayConfig) -> np.ndarray:
    """Monostatic returns ``z_r = sum_k alpha_k a(theta_k) a(theta_k)^T y + n``."""
    echo = radar_echo(y, scenes.theta, scenes.alpha, cfg)
    return echo + cnormal_sample(echo.shape, noise.sigma_n2, rng)


def snapshot_stack(
    scenes: SceneBatch,
    u: int,
    transmit,
    M: int,
    noise: NoiseConfig,
    rng: np.random.Generator,
    cfg: ArrayConfig,
    fluctuation: str = "snapshot",
):
    """``u`` radar snapshots per scene as ``(N, K, u)``, plus the sent messages ``(N, u)``.

    ``transmit(messages)`` maps message indices ``(n,)`` to transmit vectors
    ``(n, K)``. Messages and noise are redrawn for every snapshot and target
    angles stay fixed. With ``fluctuation="snapshot"`` the reflection
    amplitudes are redrawn per snapshot (the first snapshot uses the scene's
    own amplitudes); with ``"scan"`` they are held for the whole scan.
    """
    if u < 1:
        raise ValueError(f"need u >= 1, got {u}")
    if fluctuation not in ("snapshot", "scan"):
        raise ValueError(f"unknown fluctuation model {fluctuation!r}")
    n, K = len(scenes), cfg.K
    messages = np.empty((n, u), dtype=np.intp)
    Z = np.empty((n, K, u), dtype=np.complex128)
    mask = scenes.target_mask
    for j in range(u):
        alpha = scenes.alpha
        if fluctuation == "snapshot" and j > 0:
            alpha = np.where(mask, cnormal_sample(mask.shape, noise.sigma_r2, rng), 0.0)
        msgs = rng.integers(0, M, size=n)
        echo = radar_echo(transmit(msgs), scenes.theta, alpha, cfg)
        Z[:, :, j] = echo + cnormal_sample((n, K), noise.sigma_n2, rng)
        messages[:, j] = msgs
    return Z, messages
