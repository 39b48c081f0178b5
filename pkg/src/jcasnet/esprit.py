"""ESPRIT angle estimators: covariance based and single-snapshot Hankel variant.

All routines take stacks of inputs so a whole validation set can be solved at
once; a leading batch axis is optional.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .channel import ArrayConfig
from .numerics import hankel, hermitian_eig, lstsq


class ClampedEstimate(UserWarning):
    """An arcsin argument fell outside [-1, 1] and was clamped."""


def sample_covariance(Z) -> np.ndarray:
    """``R = Z Z^H / u`` for snapshots in the columns of ``Z`` (``(..., K, u)``)."""
    Z = np.asarray(Z, dtype=np.complex128)
    if Z.ndim == 1:
        Z = Z[:, None]
    u = Z.shape[-1]
    return Z @ np.conj(np.swapaxes(Z, -1, -2)) / u


def _rotation_angles(Es: np.ndarray, d_over_lambda: float):
    """Angles from the rotational invariance of a signal subspace ``(B, L, T)``."""
    psi = lstsq(Es[:, :-1, :], Es[:, 1:, :])
    phases = np.angle(np.linalg.eigvals(psi))
    arg = phases / (2 * np.pi * d_over_lambda)
    clamped = np.abs(arg) > 1.0
    theta = np.arcsin(np.clip(arg, -1.0, 1.0))
    return np.sort(theta, axis=-1), clamped.any(axis=-1)


def _subspace_esprit(R, T, d_over_lambda, return_flags=False):
    R = np.asarray(R, dtype=np.complex128)
    single = R.ndim == 2
    if single:
        R = R[None]
    K = R.shape[-1]
    if not 0 < T < K:
        raise ValueError(f"assumed target count T={T} must satisfy 0 < T < {K}")
    _, V = hermitian_eig(R)
    theta, flags = _rotation_angles(V[:, :, :T], d_over_lambda)
    if not return_flags and flags.any():
        warnings.warn(f"{int(flags.sum())} estimate(s) clamped to +-pi/2", ClampedEstimate, stacklevel=3)
    if single:
        theta, flags = theta[0], flags[0]
    return (theta, flags) if return_flags else theta


def esprit(R, T: int, cfg: ArrayConfig, return_flags: bool = False):
    """Covariance ESPRIT with maximum-overlap subarrays and a least-squares rotation.

    Returns the ``T`` angles in ascending order. With ``return_flags`` also
    returns a boolean marking estimates whose arcsin argument was clamped.
    """
    return _subspace_esprit(R, T, cfg.d_over_lambda, return_flags)


def hankel_length(K: int) -> int:
    return math.ceil(K / 2)


def esprit_single_snapshot(z, T: int, cfg: ArrayConfig, L: int | None = None,
                           return_flags: bool = False):
    """ESPRIT on the correlation of the Hankel matrix of one snapshot ``z`` (``(..., K)``)."""
    z = np.asarray(z, dtype=np.complex128)
    K = z.shape[-1]
    L = hankel_length(K) if L is None else L
    if not 0 < T < min(L, K - L + 1):
        raise ValueError(f"T={T} needs 0 < T < min(L, K-L+1) = {min(L, K - L + 1)}")
    H = hankel(z, L)
    R_h = H @ np.conj(np.swapaxes(H, -1, -2)) / (K - L + 1)
    return _subspace_esprit(R_h, T, cfg.d_over_lambda, return_flags)


def _gram_subspace(Z: np.ndarray, T: int) -> np.ndarray:
    # nonzero eigenpairs of Z Z^H via the smaller u x u Gram matrix
    G = np.conj(np.swapaxes(Z, -1, -2)) @ Z
    _, W = hermitian_eig(G)
    Es = Z @ W[:, :, :T]
    norms = np.linalg.norm(Es, axis=1, keepdims=True)
    return Es / np.where(norms > 0, norms, 1.0)


def esprit_scan(Z, T: int, cfg: ArrayConfig) -> np.ndarray:
    """Angles for scans ``Z`` of shape ``(..., K, u)``.

    ``u == 1`` uses the single-snapshot Hankel variant, otherwise covariance
    ESPRIT. ``T == 0`` yields an empty estimate.
    """
    Z = np.asarray(Z, dtype=np.complex128)
    single = Z.ndim == 2
    if single:
        Z = Z[None]
    B, K, u = Z.shape
    if T == 0:
        out = np.zeros((B, 0))
    elif u == 1:
        out = esprit_single_snapshot(Z[:, :, 0], T, cfg)
        out = out.reshape(B, T)
    elif T <= u < K:
        out, _ = _rotation_angles(_gram_subspace(Z, T), cfg.d_over_lambda)
    else:
        out = esprit(sample_covariance(Z), T, cfg).reshape(B, T)
    return out[0] if single else out
