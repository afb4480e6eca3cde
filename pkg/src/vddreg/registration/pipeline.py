"""Segment, detect, match, estimate: the registration module end to end."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..core import BinaryMask, CorrespondenceSet, GrayImage, RegistrationResult, binarize
from ..errors import RegistrationFailure
from ..geometry import apply, invert, warp_image
from ..segmentation import SegmentationNetwork, predict
from .keypoints import DetectorConfig, DetectorHandle, KeypointSet, detect_and_describe
from .matching import mutual_match
from .ransac import RansacConfig, ransac_partial_affine

log = logging.getLogger(__name__)


@dataclass
class RegistrationConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    binarize_threshold: float = 0.5
    raw: bool = False  # skip segmentation and detect on the grayscale images

    def __post_init__(self):
        if isinstance(self.detector, dict):
            self.detector = DetectorConfig(**self.detector)
        if isinstance(self.ransac, dict):
            self.ransac = RansacConfig(**self.ransac)


@dataclass
class RegistrationOutput:
    result: RegistrationResult
    keypoints_a: Optional[KeypointSet] = None
    keypoints_b: Optional[KeypointSet] = None
    matches: Optional[CorrespondenceSet] = None
    inliers: Optional[np.ndarray] = None
    mask_a: Optional[BinaryMask] = None
    mask_b: Optional[BinaryMask] = None


def segment(net: Optional[SegmentationNetwork], img: GrayImage, cfg: RegistrationConfig):
    if cfg.raw or net is None:
        return img
    return binarize(predict(net, img), cfg.binarize_threshold)


def register_pair(fixed: GrayImage, moving: GrayImage,
                  net_fixed: Optional[SegmentationNetwork] = None,
                  net_moving: Optional[SegmentationNetwork] = None,
                  detector: Optional[DetectorHandle] = None,
                  cfg: Optional[RegistrationConfig] = None,
                  gt: Optional[CorrespondenceSet] = None) -> RegistrationOutput:
    """Estimate the partial affine transform mapping ``fixed`` coordinates to ``moving`` ones.

    Failures do not raise; they come back as a failed result naming the stage.
    With ``gt`` given, RMSE and MAE at the annotated points are filled in.
    """
    cfg = cfg or RegistrationConfig()
    out = RegistrationOutput(RegistrationResult(None, seed=cfg.ransac.seed))
    stage = "segmentation"
    try:
        if not cfg.raw and (net_fixed is None or net_moving is None):
            raise RegistrationFailure("segmentation networks are required unless raw mode is set",
                                      stage=stage)
        seg_a = segment(net_fixed, fixed, cfg)
        seg_b = segment(net_moving, moving, cfg)
        if isinstance(seg_a, BinaryMask):
            out.mask_a, out.mask_b = seg_a, seg_b
        stage = "detection"
        ka = detect_and_describe(seg_a, detector, cfg.detector)
        kb = detect_and_describe(seg_b, detector, cfg.detector)
        out.keypoints_a, out.keypoints_b = ka, kb
        out.result.n_keypoints_a, out.result.n_keypoints_b = len(ka), len(kb)
        if len(ka) < 2 or len(kb) < 2:
            raise RegistrationFailure(f"too few keypoints ({len(ka)}, {len(kb)})", stage=stage)
        stage = "matching"
        matches = mutual_match(ka, kb)
        out.matches = matches
        out.result.n_matches = len(matches)
        if len(matches) < max(2, cfg.ransac.min_inliers):
            raise RegistrationFailure(f"only {len(matches)} mutual matches", stage=stage)
        stage = "ransac"
        t, inliers = ransac_partial_affine(matches, cfg.ransac)
        out.inliers = inliers
        out.result.transform = t
        out.result.n_inliers = len(inliers)
    except RegistrationFailure as e:
        out.result.failed = True
        out.result.failure_stage = e.stage
        out.result.failure_message = str(e)
        log.info("registration failed: %s", e)
    if gt is not None and not out.result.failed:
        from ..metrics import mae, reprojection_errors, rmse

        err = reprojection_errors(out.result.transform, gt)
        out.result.rmse, out.result.mae = rmse(err), mae(err)
    return out


def overlay(fixed: GrayImage, moving: GrayImage, t) -> np.ndarray:
    """RGB checkable overlay: fixed in green, moving warped onto the fixed frame in magenta."""
    warped = warp_image(moving, invert(t), fixed.shape).pixels
    rgb = np.zeros(fixed.shape + (3,))
    rgb[..., 0] = warped
    rgb[..., 1] = fixed.pixels
    rgb[..., 2] = warped
    return (np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def write_result(out: RegistrationOutput, path, pair_id: Optional[str] = None) -> None:
    d = out.result.to_dict()
    if pair_id is not None:
        d = {"id": pair_id, **d}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(d, indent=2))


def transfer_points(t, points: np.ndarray) -> np.ndarray:
    return apply(t, points)
