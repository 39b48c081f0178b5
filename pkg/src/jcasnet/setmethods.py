"""Pairing of true and estimated target angles.

Single-pair functions take 1-D arrays ``(truth, estimate)`` and return the
re-ordered pair. :func:`align_batch` does the same for a padded minibatch and
returns gather indices, so the estimate can be re-ordered inside a
differentiable graph.
"""

from __future__ import annotations

import functools
import itertools
from collections import Counter

import numpy as np

METHODS = ("none", "sortinput", "sortall", "permute")


def _counted_sort(values, counter: Counter | None):
    values = list(values)
    if counter is None:
        return sorted(values)

    def cmp(a, b):
        counter["comparisons"] += 1
        return int(a > b) - int(a < b)

    return sorted(values, key=functools.cmp_to_key(cmp))


def identity(truth, est, counter=None):
    return np.asarray(truth, dtype=float), np.asarray(est, dtype=float)


def sortinput(truth, est, counter=None):
    return np.array(_counted_sort(truth, counter), dtype=float), np.asarray(est, dtype=float)


def sortall(truth, est, counter=None):
    return (
        np.array(_counted_sort(truth, counter), dtype=float),
        np.array(_counted_sort(est, counter), dtype=float),
    )


def permute_match(truth, est, counter=None):
    """Reorder ``est`` to minimise the squared error against ``truth``.

    All ``T!`` orderings are tried; ties go to the lexicographically
    smallest permutation.
    """
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(est, dtype=float)
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(len(est))):
        cost = float(np.sum((est[list(perm)] - truth) ** 2))
        if counter is not None:
            counter["mse_evaluations"] += 1
        if cost < best_cost:
            best, best_cost = perm, cost
    return truth, est[list(best)] if best is not None else est


APPLY = {"none": identity, "sortinput": sortinput, "sortall": sortall, "permute": permute_match}


def apply_method(method: str, truth, est, counter=None):
    if method not in APPLY:
        raise ValueError(f"unknown set method {method!r}; choose from {METHODS}")
    return APPLY[method](truth, est, counter)


def pair_mse(truth, est) -> float:
    """Mean squared difference; an empty pair gives 0 (callers exclude it from averages)."""
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(est, dtype=float)
    if truth.shape != est.shape:
        raise ValueError(f"pair length mismatch {truth.shape} vs {est.shape}")
    if truth.size == 0:
        return 0.0
    return float(np.mean((truth - est) ** 2))


@functools.lru_cache(maxsize=None)
def _perms(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.intp).reshape(-1, n)


@functools.lru_cache(maxsize=None)
def _injections(n_from: int, n_to: int) -> np.ndarray:
    # ordered choices of n_to distinct indices out of n_from, lexicographic
    return np.array(list(itertools.permutations(range(n_from), n_to)), dtype=np.intp).reshape(-1, n_to)


def align_batch(method: str, truth: np.ndarray, est: np.ndarray, counts: np.ndarray):
    """Per-row alignment over the first ``counts[n]`` slots.

    Returns ``(truth_aligned, index)`` where ``est[n, index[n]]`` is the
    re-ordered estimate. Slots at or beyond the count keep their position.
    """
    if method not in APPLY:
        raise ValueError(f"unknown set method {method!r}; choose from {METHODS}")
    truth = np.asarray(truth, dtype=float).copy()
    est = np.asarray(est, dtype=float)
    N, t_max = truth.shape
    index = np.tile(np.arange(t_max), (N, 1))
    for T in range(2, t_max + 1):
        rows = np.flatnonzero(counts == T)
        if rows.size == 0:
            continue
        if method in ("sortinput", "sortall"):
            truth[rows, :T] = np.sort(truth[rows, :T], axis=1)
        if method == "sortall":
            index[rows, :T] = np.argsort(est[rows, :T], axis=1, kind="stable")
        elif method == "permute":
            perms = _perms(T)  # (P, T)
            cand = est[rows][:, perms]  # (R, P, T)
            cost = np.sum((cand - truth[rows, None, :T]) ** 2, axis=2)
            index[rows, :T] = perms[np.argmin(cost, axis=1)]
    return truth, index


def match_pairs(truth, est):
    """Best pairing between two sets of possibly different sizes.

    Picks ``min(len(truth), len(est))`` pairs with minimum total squared
    error, trying every injective assignment. Returns ``(truth_sel, est_sel)``.
    """
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(est, dtype=float)
    n = min(truth.size, est.size)
    if n == 0:
        return np.zeros(0), np.zeros(0)
    if truth.size <= est.size:
        inj = _injections(est.size, n)
        cost = np.sum((est[inj] - truth[None, :]) ** 2, axis=1)
        return truth, est[inj[np.argmin(cost)]]
    inj = _injections(truth.size, n)
    cost = np.sum((truth[inj] - est[None, :]) ** 2, axis=1)
    return truth[inj[np.argmin(cost)]], est


def matched_sq_errors(truth: np.ndarray, n_true: np.ndarray, est: np.ndarray, n_est: np.ndarray):
    """Squared errors of the best ``min(n_true, n_est)`` pairs, per row, concatenated.

    ``truth`` and ``est`` are padded ``(N, width)`` arrays; only the leading
    ``n_true[n]`` and ``n_est[n]`` entries of each row are used. Vectorized by
    grouping rows with equal counts.
    """
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(est, dtype=float)
    n_true = np.asarray(n_true)
    n_est = np.asarray(n_est)
    out = []
    for a in np.unique(n_true).tolist():
        for b in np.unique(n_est).tolist():
            n = min(a, b)
            if n == 0:
                continue
            rows = np.flatnonzero((n_true == a) & (n_est == b))
            if rows.size == 0:
                continue
            t = truth[rows, :a]
            e = est[rows, :b]
            if a <= b:
                inj = _injections(b, n)  # (P, n)
                cost = np.sum((e[:, inj] - t[:, None, :]) ** 2, axis=2)
            else:
                inj = _injections(a, n)
                cost = np.sum((t[:, inj] - e[:, None, :]) ** 2, axis=2)
            out.append(_per_pair(t, e, inj, cost, a <= b))
    return np.concatenate(out) if out else np.zeros(0)


def _per_pair(t, e, inj, cost, est_side):
    best = inj[np.argmin(cost, axis=1)]  # (R, n)
    if est_side:
        sel = np.take_along_axis(e, best, axis=1)
        return ((sel - t) ** 2).ravel()
    sel = np.take_along_axis(t, best, axis=1)
    return ((sel - e) ** 2).ravel()
