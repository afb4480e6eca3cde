"""RANSAC estimation of a 4-DOF partial affine transform."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import CorrespondenceSet, PartialAffine2D
from ..errors import RegistrationFailure
from ..geometry import _solve_centered, apply, fit_minimal_batch

# Degenerate samples are redrawn, but never more than this many draws per iteration.
REDRAW_CAP = 10
MAX_REFITS = 10


@dataclass
class RansacConfig:
    reproj_threshold: float = 5.0
    max_iterations: int = 2000
    seed: int = 0
    min_inliers: int = 4

    def __post_init__(self):
        if self.reproj_threshold <= 0:
            raise ValueError("reproj_threshold must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def _draw_samples(rng: np.random.Generator, n: int, k: int):
    i = rng.integers(0, n, size=k)
    j = rng.integers(0, n - 1, size=k)
    j = j + (j >= i)
    return i, j


def _hypotheses(c: CorrespondenceSet, cfg: RansacConfig) -> np.ndarray:
    """Non-degenerate minimal-sample models, in draw order, at most ``max_iterations``."""
    rng = np.random.default_rng(cfg.seed)
    pa, pb = c.points_a, c.points_b
    models = []
    have = 0
    draws = 0
    budget = REDRAW_CAP * cfg.max_iterations
    while have < cfg.max_iterations and draws < budget:
        k = min(cfg.max_iterations - have, budget - draws)
        i, j = _draw_samples(rng, len(c), k)
        draws += k
        m, ok = fit_minimal_batch(pa[i], pa[j], pb[i], pb[j])
        m = m[ok]
        models.append(m)
        have += len(m)
    return np.concatenate(models)[: cfg.max_iterations] if models else np.zeros((0, 4))


def _residuals(models: np.ndarray, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    a, b, tx, ty = (models[:, k:k + 1] for k in range(4))
    px = a * pa[:, 0] - b * pa[:, 1] + tx
    py = b * pa[:, 0] + a * pa[:, 1] + ty
    return np.hypot(px - pb[:, 0], py - pb[:, 1])


def ransac_partial_affine(c: CorrespondenceSet, cfg: RansacConfig | None = None):
    """Robustly fit ``points_a -> points_b``.

    Returns ``(transform, inlier_indices)``. The winning hypothesis has the
    most inliers (ties: lower mean inlier error); it is then refit by least
    squares on its inliers until the inlier set stops changing, so every
    returned inlier passes the threshold under the returned transform.
    """
    cfg = cfg or RansacConfig()
    if len(c) < 2:
        raise ValueError(f"RANSAC needs at least 2 correspondences, got {len(c)}")
    pa, pb = c.points_a, c.points_b
    models = _hypotheses(c, cfg)
    if len(models) == 0:
        raise RegistrationFailure("every minimal sample was degenerate", stage="ransac")

    thr = cfg.reproj_threshold
    best_count, best_err, best = -1, np.inf, None
    for start in range(0, len(models), 256):
        chunk = models[start:start + 256]
        res = _residuals(chunk, pa, pb)
        inl = res <= thr
        counts = inl.sum(axis=1)
        errs = np.where(inl, res, 0.0).sum(axis=1) / np.maximum(counts, 1)
        for k in range(len(chunk)):
            if counts[k] > best_count or (counts[k] == best_count and errs[k] < best_err):
                best_count, best_err, best = int(counts[k]), float(errs[k]), chunk[k]

    params = best
    inliers = np.flatnonzero(_residuals(params[None], pa, pb)[0] <= thr)
    for _ in range(MAX_REFITS):
        if len(inliers) < 2:
            break
        try:
            refit = np.array(_solve_centered(pa[inliers], pb[inliers]))
        except ValueError:
            break
        new_inliers = np.flatnonzero(_residuals(refit[None], pa, pb)[0] <= thr)
        if len(new_inliers) < 2:
            break
        params = refit
        if np.array_equal(new_inliers, inliers):
            break
        inliers = new_inliers
    inliers = np.flatnonzero(_residuals(params[None], pa, pb)[0] <= thr)

    if len(inliers) < cfg.min_inliers:
        raise RegistrationFailure(
            f"best model has {len(inliers)} inliers, need {cfg.min_inliers}", stage="ransac"
        )
    t = PartialAffine2D.from_abt(*params)
    return t, inliers


def inlier_errors(t: PartialAffine2D, c: CorrespondenceSet) -> np.ndarray:
    return np.linalg.norm(apply(t, c.points_a) - c.points_b, axis=1)
