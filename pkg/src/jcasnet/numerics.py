"""Complex linear algebra, sampling and reproducible random streams.

All matrix routines accept a single matrix or a stack ``(..., rows, cols)``
so that per-scan work (ESPRIT over 10^5 scans) stays vectorized.
"""

from __future__ import annotations

import warnings
import zlib

import numpy as np

HERMITIAN_TOL = 1e-10
COND_WARN = 1e12


class ConditionWarning(UserWarning):
    """Least-squares system is close to rank deficient."""


def rng_stream(seed: int, stream: int | str = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream)``.

    Named streams are hashed to an integer spawn key, so adding a new stream
    never shifts the samples of an existing one.
    """
    if isinstance(stream, str):
        stream = zlib.crc32(stream.encode("utf-8"))
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


def cnormal_sample(shape, variance: float, rng: np.random.Generator) -> np.ndarray:
    """Circularly symmetric complex normal samples CN(0, variance)."""
    if variance < 0:
        raise ValueError(f"variance must be non-negative, got {variance}")
    if np.isscalar(shape):
        shape = (int(shape),)
    scale = np.sqrt(variance / 2.0)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return scale * (re + 1j * im)


def _check_hermitian(a: np.ndarray) -> None:
    scale = np.abs(a).max(axis=(-2, -1))
    asym = np.abs(a - np.conj(np.swapaxes(a, -1, -2))).max(axis=(-2, -1))
    bad = asym > HERMITIAN_TOL * np.maximum(scale, np.finfo(float).tiny)
    if np.any(bad):
        raise ValueError(
            f"matrix is not Hermitian: max|A - A^H| = {np.max(asym):.3e}"
        )


def hermitian_eig(a, tol: float = 1e-15, max_sweeps: int = 60):
    """Eigendecomposition of Hermitian matrices by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues real and sorted
    descending (ties keep their diagonal order) and eigenvectors as columns.
    Works on a stack of matrices; every matrix in the stack sees the same
    sweep order, each with its own rotation angles.
    """
    a = np.array(a, dtype=np.complex128)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    _check_hermitian(a)
    batch_shape = a.shape[:-2]
    k = a.shape[-1]
    a = a.reshape(-1, k, k)
    a = 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))
    n = a.shape[0]
    # batch axis last: every slice touched by a rotation is contiguous
    a = np.ascontiguousarray(np.moveaxis(a, 0, -1))
    v = np.zeros((k, k, n), dtype=np.complex128)
    v[np.arange(k), np.arange(k), :] = 1.0

    fro2 = np.sum(np.abs(a) ** 2, axis=(0, 1))
    negligible = 1e-30 * np.sqrt(fro2) + np.finfo(float).tiny
    offdiag = ~np.eye(k, dtype=bool)
    for _ in range(max_sweeps):
        off2 = np.sum(np.abs(a[offdiag]) ** 2, axis=0)
        if np.all(off2 <= (tol**2) * fro2):
            break
        for p in range(k - 1):
            for q in range(p + 1, k):
                apq = a[p, q]
                mag = np.abs(apq)
                active = mag > negligible
                if not np.any(active):
                    continue
                safe = np.where(active, mag, 1.0)
                phase = np.where(active, apq / safe, 1.0)
                tau = (a[q, q].real - a[p, p].real) / (2.0 * safe)
                t = np.sign(tau) + (tau == 0.0)
                with np.errstate(over="ignore"):
                    t = t / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
                t[~active] = 0.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # U = diag(1, conj(phase)) @ [[c, s], [-s, c]]
                cph = np.conj(phase)
                u10 = -s * cph
                u11 = c * cph
                ap = a[:, p].copy()
                aq = a[:, q]
                a[:, p] = ap * c + aq * u10
                a[:, q] = ap * s + aq * u11
                ap = a[p].copy()
                aq = a[q]
                a[p] = ap * c + aq * np.conj(u10)
                a[q] = ap * s + aq * np.conj(u11)
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = vp * c + vq * u10
                v[:, q] = vp * s + vq * u11

    lam = np.real(np.diagonal(a, axis1=0, axis2=1)).copy()  # (n, k)
    v = np.moveaxis(v, -1, 0)
    order = np.argsort(-lam, axis=1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return lam.reshape(*batch_shape, k), v.reshape(*batch_shape, k, k)


def lstsq(a, b):
    """Minimum-norm least-squares solution of ``a @ x = b``.

    Emits :class:`ConditionWarning` when the condition number of ``a``
    exceeds 1e12; the minimum-norm solution is still returned.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-2] < a.shape[-1]:
        raise ValueError(f"lstsq needs rows >= cols, got {a.shape[-2:]}")
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(a)
    if np.any(~np.isfinite(cond) | (cond > COND_WARN)):
        warnings.warn(
            f"ill-conditioned least-squares system (cond={np.max(cond):.3e})",
            ConditionWarning,
            stacklevel=2,
        )
    return np.linalg.pinv(a) @ b


def hankel(v, L: int) -> np.ndarray:
    """Hankel matrix ``H[i, j] = v[i + j]`` of shape ``L x (K - L + 1)``.

    A stack of vectors ``(..., K)`` gives a stack of matrices.
    """
    v = np.asarray(v)
    k = v.shape[-1]
    if not 1 <= L <= k:
        raise ValueError(f"Hankel row count L={L} outside [1, {k}]")
    idx = np.arange(L)[:, None] + np.arange(k - L + 1)[None, :]
    return v[..., idx]
