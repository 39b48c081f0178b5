"""Counting and one-hot target-count encodings, detection metrics, false-alarm calibration.

Counting rows ``c`` have ``c[k-1] = P(k or more targets)`` for ``k = 1..T_max``;
one-hot rows ``o`` have ``o[k] = P(exactly k targets)`` for ``k = 0..T_max``.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import sigmoid_np


def round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def counting_encode(T, t_max: int) -> np.ndarray:
    """Prefix-of-ones labels; accepts a scalar count or an array of counts."""
    T = np.asarray(T)
    if np.any((T < 0) | (T > t_max)):
        raise ValueError(f"target count outside [0, {t_max}]")
    return (np.arange(t_max) < T[..., None]).astype(np.float64)


def onehot_encode(T, t_max: int) -> np.ndarray:
    T = np.asarray(T)
    if np.any((T < 0) | (T > t_max)):
        raise ValueError(f"target count outside [0, {t_max}]")
    return (np.arange(t_max + 1) == T[..., None]).astype(np.float64)


def sort_desc(c) -> np.ndarray:
    return -np.sort(-np.asarray(c, dtype=np.float64), axis=-1)


def counting_to_onehot(c_est) -> np.ndarray:
    """``o_0 = 1 - c_1``, ``o_k = c_k - c_{k+1}``, ``o_T_max = c_T_max``.

    Rows are sorted descending first, so the result is always non-negative.
    """
    c = sort_desc(c_est)
    head = 1.0 - c[..., :1]
    diffs = c[..., :-1] - c[..., 1:]
    return np.concatenate([head, diffs, c[..., -1:]], axis=-1)


def onehot_to_counting(o_est) -> np.ndarray:
    """Suffix sums ``c_k = sum_{n >= k} o_n`` for ``k = 1..T_max``."""
    o = np.asarray(o_est, dtype=np.float64)
    suffix = np.cumsum(o[..., ::-1], axis=-1)[..., ::-1]
    return suffix[..., 1:]


def _ratio(num: float, den: float) -> float:
    return float(num) / den if den > 0 else math.nan


def pd_pf_counting(C, C_est, sort: bool = True) -> tuple[float, float]:
    """Detection rate and weighted false alarm rate for counting estimates.

    ``C`` holds the prefix-of-ones labels. Estimates are rounded half-up;
    with ``sort`` each estimated row is first sorted descending. A zero
    denominator gives ``nan``.
    """
    C = np.asarray(C, dtype=np.float64)
    est = sort_desc(C_est) if sort else np.asarray(C_est, dtype=np.float64)
    hard = round_half_up(est)
    ones = C.sum()
    zeros = C.size - ones
    return _ratio((hard * C).sum(), ones), _ratio((hard * (1 - C)).sum(), zeros)


def pd_pf_onehot(T, O_est, t_max: int | None = None) -> tuple[float, float]:
    """Rates from the hard decision ``h = argmax`` of one-hot estimates."""
    O_est = np.asarray(O_est, dtype=np.float64)
    T = np.asarray(T)
    t_max = O_est.shape[-1] - 1 if t_max is None else t_max
    h = np.argmax(O_est, axis=-1)
    return pd_pf_from_counts(T, h, t_max)


def pd_pf_from_counts(T, h, t_max: int) -> tuple[float, float]:
    T = np.asarray(T)
    h = np.asarray(h)
    pd = _ratio(np.minimum(T, h).sum(), T.sum())
    pf = _ratio((np.maximum(T, h) - T).sum(), (t_max - T).sum())
    return pd, pf


def offset_position(zero_logits, pf_target: float) -> int | None:
    """Position in ``zero_logits`` (flattened) of the logit chosen as offset.

    The logits are sorted ascending and the entry at zero-based index
    ``floor((1 - pf_target) * X)`` is chosen, ``X`` being their count. An
    empty set gives ``None``.
    """
    if not 0.0 < pf_target < 1.0:
        raise ValueError(f"P_f target must lie in (0, 1), got {pf_target}")
    logits = np.asarray(zero_logits, dtype=np.float64).ravel()
    X = logits.size
    if X == 0:
        return None
    # round away float noise such as 0.99 * 100 = 98.99999..., then floor
    i = math.floor(round((1.0 - pf_target) * X, 9))
    order = np.argsort(logits, kind="stable")
    return int(order[min(i, X - 1)])


def calibrate_offset(zero_logits, pf_target: float, previous: float | None = None) -> float | None:
    """Logit offset leaving a fraction ``pf_target`` of the zero-labeled logits at or above it.

    An empty set returns ``previous``.
    """
    pos = offset_position(zero_logits, pf_target)
    if pos is None:
        return previous
    return float(np.asarray(zero_logits, dtype=np.float64).ravel()[pos])


def apply_offset(logits, offset: float, sort: bool = False) -> np.ndarray:
    """``sigmoid(logit - offset)``; ``sort`` orders each row descending (validation)."""
    p = sigmoid_np(np.asarray(logits, dtype=np.float64) - offset)
    return sort_desc(p) if sort else p


def soft_pf_onehot(O_est, T) -> float:
    """Weighted false alarm rate of one-hot probabilities without hard decisions."""
    O_est = np.asarray(O_est, dtype=np.float64)
    T = np.asarray(T)
    t_max = O_est.shape[-1] - 1
    excess = np.maximum(np.arange(t_max + 1)[None, :] - T[:, None], 0)
    den = (t_max - T).sum()
    return float((O_est * excess).sum() / den) if den > 0 else 0.0


def onehot_offset_vector(pf_measured: float, pf_target: float, t_max: int) -> np.ndarray:
    """``(P_f - P_f,onehot) * [1, -1/T_max, ..., -1/T_max]``."""
    shape = np.full(t_max + 1, -1.0 / t_max)
    shape[0] = 1.0
    return (pf_target - pf_measured) * shape


def onehot_pf_offset(O_est, T, pf_target: float) -> np.ndarray:
    """Shift one-hot probabilities toward the target false alarm rate, then clip to [0, 1]."""
    O_est = np.asarray(O_est, dtype=np.float64)
    shift = onehot_offset_vector(soft_pf_onehot(O_est, T), pf_target, O_est.shape[-1] - 1)
    return np.clip(O_est + shift, 0.0, 1.0)


def count_targets(probs) -> np.ndarray:
    """Sort descending, round half-up, sum."""
    return round_half_up(sort_desc(probs)).sum(axis=-1).astype(np.intp)
