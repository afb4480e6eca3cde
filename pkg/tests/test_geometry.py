import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vddreg.core import BinaryMask, CorrespondenceSet, GrayImage, PartialAffine2D
from vddreg.errors import DegenerateSampleError
from vddreg.geometry import (
    apply,
    compose,
    fit_minimal_batch,
    fit_partial_affine,
    invert,
    warp_array,
    warp_image,
    warp_mask,
)

from conftest import smooth_image

transforms = st.builds(
    PartialAffine2D.compose_params,
    st.floats(0.5, 2.0),
    st.floats(-math.pi + 1e-6, math.pi),
    st.floats(-100, 100),
    st.floats(-100, 100),
)
points = st.lists(st.tuples(st.floats(-200, 200), st.floats(-200, 200)), min_size=1, max_size=20)


@given(transforms, points)
def test_inverse_round_trip(t, pts):
    p = np.array(pts)
    np.testing.assert_allclose(apply(invert(t), apply(t, p)), p, atol=1e-8)


@given(transforms, transforms, points)
def test_compose_order(t1, t2, pts):
    p = np.array(pts)
    np.testing.assert_allclose(apply(compose(t1, t2), p), apply(t1, apply(t2, p)), atol=1e-7)


@given(transforms)
def test_compose_with_inverse_is_identity(t):
    np.testing.assert_allclose(compose(t, invert(t)).matrix, PartialAffine2D.identity().matrix, atol=1e-9)


@given(transforms, st.integers(2, 30), st.integers(0, 2**31))
def test_fit_recovers_noiseless(t, n, seed):
    pa = np.random.default_rng(seed).uniform(-100, 100, (n, 2))
    if np.ptp(pa, axis=0).max() < 1.0:
        return
    got = fit_partial_affine(CorrespondenceSet(pa, apply(t, pa)))
    np.testing.assert_allclose(got.matrix, t.matrix, atol=1e-6)


def test_fit_known_value():
    # A unit square mapped by 90 degrees, scale 2, shift (3, 4).
    pa = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float)
    pb = np.array([[3, 4], [3, 6], [1, 4], [1, 6]], float)
    t = fit_partial_affine(CorrespondenceSet(pa, pb))
    np.testing.assert_allclose(t.matrix, [[0, -2, 3], [2, 0, 4]], atol=1e-12)


def test_fit_least_squares_residual_is_orthogonal(rng):
    pa = rng.uniform(0, 50, (20, 2))
    pb = apply(PartialAffine2D.compose_params(1.1, 0.2, 3, 1), pa) + rng.normal(0, 1, (20, 2))
    t = fit_partial_affine(CorrespondenceSet(pa, pb))
    r = (apply(t, pa) - pb).ravel()
    # Jacobian columns for (a, b, tx, ty).
    x, y = pa.T
    J = np.zeros((40, 4))
    J[0::2] = np.stack([x, -y, np.ones(20), np.zeros(20)], 1)
    J[1::2] = np.stack([y, x, np.zeros(20), np.ones(20)], 1)
    np.testing.assert_allclose(J.T @ r, 0, atol=1e-8)


def test_fit_degenerate():
    with pytest.raises(ValueError):
        fit_partial_affine(CorrespondenceSet([[0, 0]], [[1, 1]]))
    with pytest.raises(DegenerateSampleError):
        fit_partial_affine(CorrespondenceSet([[1, 1], [1, 1]], [[0, 0], [2, 2]]))
    with pytest.raises(DegenerateSampleError):
        fit_partial_affine(CorrespondenceSet([[0, 0], [1, 1]], [[2, 2], [2, 2]]))


def test_minimal_batch_flags_degenerate():
    pa1 = np.array([[0, 0], [1, 1.0]])
    pa2 = np.array([[1, 0], [1, 1.0]])
    pb1 = np.array([[0, 0], [0, 0.0]])
    pb2 = np.array([[0, 2], [1, 0.0]])
    m, ok = fit_minimal_batch(pa1, pa2, pb1, pb2)
    assert ok.tolist() == [True, False]
    np.testing.assert_allclose(m[0], [0, 2, 0, 0])


def test_warp_places_point_at_t_of_p():
    img = np.zeros((32, 32))
    img[10, 5] = 1.0  # x=5, y=10
    t = PartialAffine2D.from_abt(1, 0, 7, -3)
    out = warp_array(img, t, (32, 32))
    assert np.unravel_index(out.argmax(), out.shape) == (7, 12)


def test_warp_round_trip_smooth():
    img = smooth_image(96, 96, seed=3)
    t = PartialAffine2D.compose_params(1.05, 0.2, 3.0, -2.0)
    back = warp_array(warp_array(img, t, img.shape), invert(t), img.shape)
    inner = (slice(24, 72), slice(24, 72))
    assert np.abs(back[inner] - img[inner]).max() <= 0.05


def test_warp_types():
    img = GrayImage(smooth_image(16, 16))
    t = PartialAffine2D.identity()
    out = warp_image(img, t, (16, 24))
    assert out.shape == (16, 24) and out.modality == img.modality
    np.testing.assert_allclose(out.pixels[:, :16], img.pixels, atol=1e-12)
    m = warp_mask(BinaryMask(np.eye(16, dtype=np.uint8)), t, (16, 16))
    np.testing.assert_array_equal(m.values, np.eye(16))
    with pytest.raises(ValueError):
        warp_array(img.pixels, t, (0, 4))
