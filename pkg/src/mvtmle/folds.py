from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FoldAssignment:
    """Fold labels 1..V for each observation."""

    fold_of: np.ndarray
    V: int
    stratified: bool = True

    def split(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        """Training and validation indices for fold ``v`` (1-based)."""
        test = self.fold_of == v
        return np.flatnonzero(~test), np.flatnonzero(test)


def make_folds(n: int, labels: np.ndarray | None, V: int = 5, seed: int = 0) -> FoldAssignment:
    """Random V-fold partition, stratified on ``labels`` when every class has >= V members.

    Members of each class are shuffled and dealt round-robin, with the
    dealing position carried over from class to class so fold sizes stay
    within one of each other.  ``stratified`` is False when the data forced
    the unstratified fallback.
    """
    if V < 2:
        raise ValueError("need V >= 2")
    if n < 2 * V:
        raise ValueError(f"need n >= 2V (n={n}, V={V})")
    rng = np.random.default_rng(seed)
    stratified = labels is not None
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape[0] != n:
            raise ValueError("labels length does not match n")
        classes, counts = np.unique(labels, return_counts=True)
        if counts.min() < V:
            stratified = False
    if stratified:
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in classes])
    else:
        order = rng.permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % V + 1
    return FoldAssignment(fold_of, V, stratified)
