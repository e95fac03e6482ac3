"""Deterministic stratified cross-validation folds.

Folds are a pure function of (labels, V, seed): each class is shuffled with
its own RNG stream derived from the master seed and dealt round-robin, so
fold membership never depends on execution order elsewhere in a pipeline.
"""

from __future__ import annotations

import numpy as np

from .errors import FoldError


def stratified_folds(labels: np.ndarray, n_folds: int, seed) -> np.ndarray:
    """Assign each row to a fold in {0, ..., n_folds-1}, stratified on ``labels``.

    Parameters
    ----------
    labels : array of 0/1 values used for stratification.
    n_folds : number of folds, at least 2 (and at most n).
    seed : int or numpy SeedSequence; identical seeds give identical folds.

    Returns
    -------
    ndarray of fold indices, one per row.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n_folds < 2:
        raise FoldError(f"need at least 2 folds, got {n_folds}")
    if n_folds > n:
        raise FoldError(f"cannot split {n} rows into {n_folds} folds")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = ss.spawn(2)
    assignment = np.empty(n, dtype=np.int64)
    offset = 0
    for k, cls in enumerate(np.unique(labels)):
        idx = np.flatnonzero(labels == cls)
        order = np.random.default_rng(streams[min(k, 1)]).permutation(idx.shape[0])
        # offset staggers fold sizes across classes so totals stay balanced
        assignment[idx[order]] = (np.arange(idx.shape[0]) + offset) % n_folds
        offset += idx.shape[0]
    return assignment


def check_train_classes(y: np.ndarray, fold_ids: np.ndarray, n_folds: int) -> None:
    """Raise FoldError naming the first fold whose training split lacks a class."""
    y = np.asarray(y)
    for v in range(n_folds):
        train = y[fold_ids != v]
        if train.size == 0 or train.min() == train.max():
            raise FoldError(
                f"training split for fold {v} contains a single response class",
                fold=v,
            )
