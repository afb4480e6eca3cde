"""Partial-affine (similarity) transforms: fitting, application and warping."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import BinaryMask, CorrespondenceSet, GrayImage, PartialAffine2D
from .errors import DegenerateSampleError

# Minimal-sample points closer than this (pixels) are treated as coincident.
DEGENERATE_DIST = 1e-6


def apply(t: PartialAffine2D, points) -> np.ndarray:
    """Map ``(x, y)`` points through ``t``. Accepts one point or an ``(n, 2)`` array."""
    p = np.asarray(points, dtype=np.float64)
    m = t.matrix
    out = p @ m[:, :2].T + m[:, 2]
    return out


def to_h(t: PartialAffine2D) -> np.ndarray:
    return np.vstack([t.matrix, [0.0, 0.0, 1.0]])


def compose(first: PartialAffine2D, second: PartialAffine2D) -> PartialAffine2D:
    """Return ``first ∘ second`` (``second`` is applied first)."""
    m = to_h(first) @ to_h(second)
    # Re-symmetrise to absorb rounding so the result stays a valid similarity.
    a = 0.5 * (m[0, 0] + m[1, 1])
    b = 0.5 * (m[1, 0] - m[0, 1])
    return PartialAffine2D.from_abt(a, b, m[0, 2], m[1, 2])


def invert(t: PartialAffine2D) -> PartialAffine2D:
    s2 = t.a * t.a + t.b * t.b
    if s2 <= 0.0:
        raise ValueError("cannot invert a transform with zero scale")
    a, b = t.a / s2, -t.b / s2
    tx, ty = t.translation
    return PartialAffine2D.from_abt(a, b, -(a * tx - b * ty), -(b * tx + a * ty))


def _solve_centered(pa: np.ndarray, pb: np.ndarray, w: np.ndarray | None = None):
    """Least squares for (a, b, tx, ty).

    With both point sets centred on their (weighted) centroids the 4x4 normal
    matrix becomes diag(S, S, n, n), so the system decouples into the closed
    form below.
    """
    if w is None:
        w = np.ones(len(pa))
    wsum = w.sum()
    ca = (w[:, None] * pa).sum(0) / wsum
    cb = (w[:, None] * pb).sum(0) / wsum
    xa, ya = (pa - ca).T
    xb, yb = (pb - cb).T
    S = np.sum(w * (xa * xa + ya * ya))
    if S <= DEGENERATE_DIST ** 2:
        raise DegenerateSampleError("all source points coincide; transform is undetermined")
    a = np.sum(w * (xa * xb + ya * yb)) / S
    b = np.sum(w * (xa * yb - ya * xb)) / S
    tx = cb[0] - (a * ca[0] - b * ca[1])
    ty = cb[1] - (b * ca[0] + a * ca[1])
    return a, b, tx, ty


def fit_partial_affine(c: CorrespondenceSet) -> PartialAffine2D:
    """Least-squares similarity mapping ``c.points_a`` onto ``c.points_b``."""
    if len(c) < 2:
        raise ValueError(f"need at least 2 correspondences, got {len(c)}")
    a, b, tx, ty = _solve_centered(c.points_a, c.points_b)
    if a == 0.0 and b == 0.0:
        raise DegenerateSampleError("target points coincide; fitted scale is zero")
    return PartialAffine2D.from_abt(a, b, tx, ty)


def fit_minimal_batch(pa1, pa2, pb1, pb2):
    """Exact similarities from many 2-point samples at once.

    All arguments are ``(k, 2)`` arrays. Returns ``(k, 4)`` rows of
    ``(a, b, tx, ty)`` and a boolean mask of non-degenerate samples.
    """
    da = pa2 - pa1
    db = pb2 - pb1
    S = np.sum(da * da, axis=1)
    ok = (S > DEGENERATE_DIST ** 2) & (np.sum(db * db, axis=1) > DEGENERATE_DIST ** 2)
    S = np.where(ok, S, 1.0)
    a = (da[:, 0] * db[:, 0] + da[:, 1] * db[:, 1]) / S
    b = (da[:, 0] * db[:, 1] - da[:, 1] * db[:, 0]) / S
    tx = pb1[:, 0] - (a * pa1[:, 0] - b * pa1[:, 1])
    ty = pb1[:, 1] - (b * pa1[:, 0] + a * pa1[:, 1])
    return np.stack([a, b, tx, ty], axis=1), ok


def warp_array(arr: np.ndarray, t: PartialAffine2D, out_dims: Sequence[int]) -> np.ndarray:
    """Resample ``arr`` so that source point ``p`` lands at ``t(p)`` in the output.

    Bilinear, with zeros outside the source. ``out_dims`` is ``(height, width)``.
    """
    h, w = int(out_dims[0]), int(out_dims[1])
    if h <= 0 or w <= 0:
        raise ValueError(f"output dims must be positive, got {out_dims}")
    inv = invert(t)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    m = inv.matrix
    src_x = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    src_y = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    out = ndimage.map_coordinates(
        np.asarray(arr, dtype=np.float64), [src_y, src_x], order=1, mode="constant", cval=0.0
    )
    return out


def warp_image(img: GrayImage, t: PartialAffine2D, out_dims: Sequence[int]) -> GrayImage:
    out = np.clip(warp_array(img.pixels, t, out_dims), 0.0, 1.0)
    return img.with_pixels(out)


def warp_mask(mask: BinaryMask, t: PartialAffine2D, out_dims: Sequence[int]) -> BinaryMask:
    return BinaryMask.from_image(warp_array(mask.values.astype(np.float64), t, out_dims))
