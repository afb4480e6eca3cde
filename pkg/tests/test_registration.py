import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vddreg.core import CorrespondenceSet, GrayImage, PartialAffine2D
from vddreg.data.synth import SynthConfig, generate_synthetic_pair
from vddreg.errors import RegistrationFailure, WeightsError
from vddreg.geometry import apply
from vddreg.registration.keypoints import (
    ClassicalDetector,
    DetectorConfig,
    KeypointSet,
    detect_and_describe,
    greedy_nms,
    load_detector,
)
from vddreg.registration.matching import mutual_match, mutual_match_indices
from vddreg.registration.pipeline import (
    RegistrationConfig,
    overlay,
    register_pair,
    transfer_points,
    write_result,
)
from vddreg.registration.ransac import RansacConfig, inlier_errors, ransac_partial_affine


def oracle_mutual(da, db):
    """Exhaustive double argmin, strict minima only."""
    out = []
    for i in range(len(da)):
        d = [float(np.linalg.norm(da[i] - db[j])) for j in range(len(db))]
        j = int(np.argmin(d))
        if sum(x == d[j] for x in d) != 1:
            continue
        col = [float(np.linalg.norm(da[k] - db[j])) for k in range(len(da))]
        if int(np.argmin(col)) == i and sum(x == col[i] for x in col) == 1:
            out.append((i, j))
    return out


def random_instance(seed):
    r = np.random.default_rng(seed)
    n, m = int(r.integers(0, 201)), int(r.integers(0, 201))
    dim = int(r.integers(1, 9))
    if r.random() < 0.3:  # quantised descriptors to provoke ties
        return r.integers(0, 3, (n, dim)).astype(float), r.integers(0, 3, (m, dim)).astype(float)
    return r.normal(size=(n, dim)), r.normal(size=(m, dim))


@pytest.mark.parametrize("seed", range(10))
def test_mutual_match_oracle(seed):
    da, db = random_instance(seed)
    got = [tuple(x) for x in mutual_match_indices(da, db).tolist()]
    assert got == oracle_mutual(da, db)


@given(st.integers(1, 30), st.integers(0, 10**6))
def test_mutual_match_permutation_recovered(n, seed):
    r = np.random.default_rng(seed)
    da = r.normal(size=(n, 8))
    perm = r.permutation(n)
    got = mutual_match_indices(da, da[perm])
    assert len(got) == n
    np.testing.assert_array_equal(perm[got[:, 1]], got[:, 0])


def test_mutual_match_keypoint_sets():
    d = np.eye(3)
    a = KeypointSet(np.arange(6.0).reshape(3, 2), d, np.ones(3))
    b = KeypointSet(np.arange(6.0).reshape(3, 2)[::-1] + 10, d[::-1], np.ones(3))
    c = mutual_match(a, b)
    np.testing.assert_array_equal(c.points_b, a.locations + 10)
    assert len(mutual_match(a, KeypointSet.empty(3))) == 0


def ransac_trial(seed, n_in=100, n_out=50):
    r = np.random.default_rng(seed)
    t = PartialAffine2D.compose_params(r.uniform(0.8, 1.25), r.uniform(-math.pi, math.pi),
                                       *r.uniform(-50, 50, 2))
    pa = r.uniform(0, 256, (n_in, 2))
    pb = apply(t, pa) + r.normal(0, 1.0, (n_in, 2))
    oa, ob = r.uniform(0, 256, (n_out, 2)), r.uniform(0, 256, (n_out, 2))
    c = CorrespondenceSet(np.vstack([pa, oa]), np.vstack([pb, ob]))
    est, inl = ransac_partial_affine(c, RansacConfig(seed=seed))
    dth = abs((est.rotation - t.rotation + math.pi) % (2 * math.pi) - math.pi)
    dt = np.hypot(*(np.subtract(est.translation, t.translation)))
    return math.degrees(dth), dt, est, inl, c


def test_ransac_recovers_with_outliers():
    deg, dt, est, inl, c = ransac_trial(7)
    assert deg < 0.5 and dt < 1.0
    assert np.all(inlier_errors(est, c.subset(inl)) <= 5.0)
    assert len(inl) >= 90


def test_ransac_seeded_determinism():
    a = ransac_trial(3)
    b = ransac_trial(3)
    np.testing.assert_array_equal(a[2].matrix, b[2].matrix)
    np.testing.assert_array_equal(a[3], b[3])


def test_ransac_failures():
    with pytest.raises(ValueError):
        ransac_partial_affine(CorrespondenceSet([[0, 0]], [[0, 0]]))
    same = CorrespondenceSet(np.zeros((5, 2)), np.zeros((5, 2)))
    with pytest.raises(RegistrationFailure) as e:
        ransac_partial_affine(same)
    assert e.value.stage == "ransac"
    r = np.random.default_rng(0)
    noise = CorrespondenceSet(r.uniform(0, 500, (6, 2)), r.uniform(0, 500, (6, 2)))
    with pytest.raises(RegistrationFailure):
        ransac_partial_affine(noise, RansacConfig(min_inliers=5, reproj_threshold=1.0))
    with pytest.raises(ValueError):
        RansacConfig(reproj_threshold=0)


def test_greedy_nms():
    xy = np.array([[0, 0], [1, 0], [10, 0], [10.5, 0]], float)
    keep = greedy_nms(xy, np.array([0.5, 0.9, 0.2, 0.1]), 2.0)
    assert keep.tolist() == [1, 2]


def cross_mask(n=64):
    m = np.zeros((n, n))
    m[30:33, 8:56] = 1
    m[8:56, 20:23] = 1
    m[8:56, 44:47] = 1
    return m


def test_classical_detector_finds_junctions():
    kp = detect_and_describe(cross_mask(), cfg=DetectorConfig())
    assert len(kp) >= 2
    d = np.min(np.hypot(kp.locations[:, 0] - 21, kp.locations[:, 1] - 31))
    assert d <= 2.0
    np.testing.assert_allclose(np.linalg.norm(kp.descriptors, axis=1), 1.0)
    assert kp.scores.max() <= 1.0


def test_detector_blank_image():
    kp = detect_and_describe(np.zeros((32, 32)))
    assert len(kp) == 0


def test_detector_respects_max_and_border():
    cfg = DetectorConfig(max_keypoints=1, border=10)
    kp = detect_and_describe(cross_mask(), cfg=cfg)
    assert len(kp) <= 1
    assert np.all(kp.locations >= 10)


def test_detector_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(nms_radius=0.5)
    with pytest.raises(ValueError):
        DetectorConfig(score_threshold=1.5)


def test_load_detector(tmp_path):
    assert isinstance(load_detector("classical"), ClassicalDetector)
    assert isinstance(load_detector(None), ClassicalDetector)
    with pytest.raises(WeightsError):
        load_detector(tmp_path / "missing.pth")
    (tmp_path / "junk.pth").write_bytes(b"not a checkpoint")
    with pytest.raises(WeightsError):
        load_detector(tmp_path / "junk.pth")


def test_superpoint_from_state_dict(tmp_path):
    import torch

    from vddreg.registration.superpoint import SuperPointNet

    torch.manual_seed(0)
    torch.save(SuperPointNet().state_dict(), tmp_path / "sp.pth")
    det = load_detector(tmp_path / "sp.pth")
    kp = det(cross_mask(64), DetectorConfig(score_threshold=0.01))
    assert kp.descriptors.shape[1] == 256 if len(kp) else True
    torch.save({"conv1a.weight": torch.zeros(1)}, tmp_path / "bad.pth")
    with pytest.raises(WeightsError):
        load_detector(tmp_path / "bad.pth")


def test_raw_mode_registers_synthetic_masks():
    pair = generate_synthetic_pair(SynthConfig(canvas=128, seed=0), 1)
    # Registering the clean masks isolates detection/matching/RANSAC from segmentation.
    fixed = GrayImage(pair.fixed_mask.values.astype(float))
    moving = GrayImage(pair.moving_mask.values.astype(float))
    out = register_pair(fixed, moving, cfg=RegistrationConfig(raw=True),
                        gt=pair.record.gt_correspondences)
    assert out.result.n_keypoints_a > 0 and out.result.n_matches >= out.result.n_inliers
    if not out.result.failed:
        assert out.result.rmse is not None


def test_register_without_networks_fails_cleanly():
    img = GrayImage(np.zeros((16, 16)))
    out = register_pair(img, img)
    assert out.result.failed and out.result.failure_stage == "segmentation"
    out = register_pair(img, img, cfg=RegistrationConfig(raw=True))
    assert out.result.failed and out.result.failure_stage == "detection"


def test_identity_registration_of_identical_images(tmp_path):
    m = np.zeros((96, 96))
    r = np.random.default_rng(2)
    for _ in range(12):
        x0, y0 = r.integers(8, 88, 2)
        m[y0:y0 + 2, 8:88] = 1 if r.random() < 0.5 else m[y0:y0 + 2, 8:88]
        m[8:88, x0:x0 + 2] = 1
    img = GrayImage(m)
    out = register_pair(img, img, cfg=RegistrationConfig(raw=True))
    assert not out.result.failed
    np.testing.assert_allclose(out.result.transform.matrix, PartialAffine2D.identity().matrix, atol=1e-6)
    rgb = overlay(img, img, out.result.transform)
    assert rgb.shape == (96, 96, 3) and rgb.dtype == np.uint8
    write_result(out, tmp_path / "r.json", "x")
    assert json.loads((tmp_path / "r.json").read_text())["id"] == "x"
    np.testing.assert_allclose(transfer_points(out.result.transform, [[1.0, 2.0]]), [[1.0, 2.0]], atol=1e-6)
