import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vddreg.core import BinaryMask, CorrespondenceSet, GrayImage, PartialAffine2D, RegistrationResult
from vddreg.metrics import (
    PairEvaluation,
    VesselnessConfig,
    clahe,
    mae,
    masked_soft_dice,
    overlap_metrics,
    reprojection_errors,
    rmse,
    soft_dice,
    success_rate,
    summarize,
    vesselness,
    write_report,
)


def lines_image(n=64, offset=0):
    img = np.full((n, n), 0.1)
    for c in (12, 30, 48):
        img[:, c + offset:c + offset + 3] = 0.9
    img[20 + offset:23 + offset, :] = 0.9
    return GrayImage(img)


def test_hand_values():
    assert rmse([3.0, 4.0]) == pytest.approx(3.5355339059327378, abs=1e-12)
    assert mae([3.0, 4.0]) == 4.0
    with pytest.raises(ValueError):
        rmse([])
    with pytest.raises(ValueError):
        mae([])


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=30))
def test_rmse_bounds(errs):
    e = np.array(errs)
    assert e.mean() - 1e-9 <= rmse(e) <= mae(e) + 1e-9


def test_reprojection_errors():
    gt = CorrespondenceSet([[0, 0], [10, 0]], [[3, 4], [10, 0]])
    np.testing.assert_allclose(reprojection_errors(PartialAffine2D.identity(), gt), [5.0, 0.0])


def test_success_rate_counts_failures():
    t = PartialAffine2D.identity()
    rs = [RegistrationResult(t, rmse=2, mae=3), RegistrationResult(t, rmse=12, mae=20),
          RegistrationResult(None, failed=True), RegistrationResult(t, rmse=9.99, mae=10.0)]
    assert success_rate(rs, "rmse") == 0.5
    assert success_rate(rs, "mae") == 0.25


def test_clahe_range_and_constant():
    arr = lines_image().pixels
    eq = clahe(arr, VesselnessConfig())
    assert eq.min() >= 0 and eq.max() <= 1
    assert not clahe(np.full((16, 16), 0.3), VesselnessConfig()).any()


def test_vesselness_bright_ridges():
    v = vesselness(lines_image()).values
    assert v.max() == pytest.approx(1.0)
    assert v[:, 13].mean() > 5 * v[:, 40].mean()
    assert not vesselness(np.zeros((16, 16))).values.any()


def test_vesselness_config_validation():
    with pytest.raises(ValueError):
        VesselnessConfig(frangi_scales=())
    with pytest.raises(ValueError):
        VesselnessConfig(clahe_clip_limit=0)


def test_soft_dice_boundaries():
    a = lines_image()
    assert soft_dice(a, a) == pytest.approx(1.0, abs=1e-12)
    left = np.full((64, 64), 0.1)
    left[:, 5:8] = 0.9
    right = np.full((64, 64), 0.1)
    right[:, 50:53] = 0.9
    assert soft_dice(GrayImage(left), GrayImage(right)) < 1e-6
    assert soft_dice(np.zeros((8, 8)), np.zeros((8, 8))) == 0.0


def test_soft_dice_symmetric():
    a, b = lines_image(), lines_image(offset=2)
    assert soft_dice(a, b) == pytest.approx(soft_dice(b, a), abs=1e-12)
    assert 0 < soft_dice(a, b) < 1


def test_masked_all_ones_reduces_to_soft_dice():
    a, b = lines_image(), lines_image(offset=2)
    ones = BinaryMask(np.ones((64, 64), np.uint8))
    assert abs(masked_soft_dice(a, b, ones) - soft_dice(a, b)) <= 1e-12


def test_masked_zero_mask_rejected():
    a = lines_image()
    with pytest.raises(ValueError):
        masked_soft_dice(a, a, BinaryMask(np.zeros((64, 64), np.uint8)))


def test_overlap_metrics_identity():
    a = lines_image()
    m = BinaryMask((a.pixels > 0.5).astype(np.uint8))
    out = overlap_metrics(a, a, PartialAffine2D.identity(), m)
    assert out["soft_dice"] == pytest.approx(1.0)
    assert out["masked_soft_dice"] == pytest.approx(1.0)


def test_summary_and_report(tmp_path):
    t = PartialAffine2D.identity()
    evals = [PairEvaluation("a", RegistrationResult(t, rmse=2.0, mae=3.0), 0.5, 0.6),
             PairEvaluation("b", RegistrationResult(None, failed=True, failure_stage="matching"))]
    s = summarize(evals)
    assert s["n_pairs"] == 2 and s["n_failed"] == 1
    assert s["success_rate_rmse"] == 0.5 and s["rmse"] == 2.0 and s["soft_dice"] == 0.5
    summary = write_report(evals, tmp_path, baseline=evals[:1])
    rows = list(csv.DictReader((tmp_path / "evaluation.csv").open()))
    assert [r["id"] for r in rows] == ["a", "b"] and rows[1]["failure_stage"] == "matching"
    assert json.loads((tmp_path / "summary.json").read_text()) == summary
    assert (tmp_path / "unregistered.csv").exists()
