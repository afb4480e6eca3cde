from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from ..core import CorrespondenceSet
from .keypoints import KeypointSet


def mutual_match_indices(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """Mutual nearest neighbours under Euclidean descriptor distance.

    ``(i, j)`` is returned only when ``d(i, j)`` is the strict minimum of row
    ``i`` and of column ``j``; a tie for either minimum excludes the pair.
    Returns a ``(k, 2)`` integer array sorted by ``i``.
    """
    if len(desc_a) == 0 or len(desc_b) == 0:
        return np.zeros((0, 2), dtype=int)
    d = cdist(desc_a, desc_b)
    row_min = d.min(axis=1)
    col_min = d.min(axis=0)
    row_arg = d.argmin(axis=1)
    col_arg = d.argmin(axis=0)
    row_unique = np.sum(d == row_min[:, None], axis=1) == 1
    col_unique = np.sum(d == col_min[None, :], axis=0) == 1
    i = np.arange(len(desc_a))
    j = row_arg
    ok = row_unique & col_unique[j] & (col_arg[j] == i)
    return np.stack([i[ok], j[ok]], axis=1)


def mutual_match(a: KeypointSet, b: KeypointSet) -> CorrespondenceSet:
    idx = mutual_match_indices(a.descriptors, b.descriptors)
    return CorrespondenceSet(a.locations[idx[:, 0]], b.locations[idx[:, 1]])
