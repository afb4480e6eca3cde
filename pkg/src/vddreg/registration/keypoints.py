"""Keypoint detection and description on vessel masks or raw images."""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from ..core import BinaryMask, GrayImage, ProbabilityMap
from ..errors import WeightsError

log = logging.getLogger(__name__)


@dataclass
class DetectorConfig:
    nms_radius: float = 4.0
    score_threshold: float = 0.015
    max_keypoints: Optional[int] = None
    border: int = 4

    def __post_init__(self):
        if self.nms_radius < 1:
            raise ValueError("nms_radius must be >= 1")
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError("score_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class KeypointSet:
    locations: np.ndarray  # (n, 2) as (x, y)
    descriptors: np.ndarray  # (n, d), rows L2-normalised
    scores: np.ndarray  # (n,) in [0, 1]

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=np.float64).reshape(-1, 2)
        desc = np.asarray(self.descriptors, dtype=np.float64)
        desc = desc.reshape(len(loc), -1) if desc.size or len(loc) else desc.reshape(0, 0)
        sc = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not len(loc) == len(desc) == len(sc):
            raise ValueError("keypoint locations, descriptors and scores differ in length")
        if len(desc) and np.any(np.abs(np.linalg.norm(desc, axis=1) - 1.0) > 1e-6):
            raise ValueError("descriptors must be L2-normalised")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "descriptors", desc)
        object.__setattr__(self, "scores", sc)

    def __len__(self) -> int:
        return len(self.locations)

    @classmethod
    def empty(cls, dim: int = 0) -> "KeypointSet":
        return cls(np.zeros((0, 2)), np.zeros((0, dim)), np.zeros(0))


def _as_array(img) -> np.ndarray:
    if isinstance(img, GrayImage):
        return img.pixels.astype(np.float64)
    if isinstance(img, ProbabilityMap):
        return img.values.astype(np.float64)
    if isinstance(img, BinaryMask):
        return img.values.astype(np.float64)
    return np.asarray(img, dtype=np.float64)


def greedy_nms(locations: np.ndarray, scores: np.ndarray, radius: float) -> np.ndarray:
    """Indices kept by score-ordered suppression; survivors are > ``radius`` apart."""
    order = np.lexsort((locations[:, 0], locations[:, 1], -scores))
    kept: list[int] = []
    kept_xy = np.zeros((0, 2))
    for i in order:
        if len(kept_xy):
            d2 = np.sum((kept_xy - locations[i]) ** 2, axis=1)
            if np.any(d2 <= radius * radius):
                continue
        kept.append(int(i))
        kept_xy = np.vstack([kept_xy, locations[i]])
    return np.asarray(kept, dtype=int)


@dataclass
class ClassicalDetector:
    """Junction/corner response plus a normalised local-patch descriptor; needs no weights.

    The response is the negated larger eigenvalue of the scale-normalised
    Hessian of the smoothed input. It is high only where intensity curves
    down in every direction, which on vessel masks means junctions, tips and
    sharp bends. Scores are divided by the response of an ideal crossing of
    two 3-px lines, so they are comparable across images and a blank image
    scores zero.
    """

    junction_sigma: float = 1.5
    patch_size: int = 16
    patch_spacing: float = 1.5
    descriptor_sigma: float = 1.5
    oriented: bool = False
    name: str = field(default="classical", init=False)

    def _response(self, arr: np.ndarray) -> np.ndarray:
        sig = self.junction_sigma
        hxx = ndimage.gaussian_filter(arr, sig, order=(0, 2), mode="nearest")
        hyy = ndimage.gaussian_filter(arr, sig, order=(2, 0), mode="nearest")
        hxy = ndimage.gaussian_filter(arr, sig, order=(1, 1), mode="nearest")
        lmax = 0.5 * (hxx + hyy) + np.sqrt((0.5 * (hxx - hyy)) ** 2 + hxy * hxy)
        return np.maximum(-lmax, 0.0) * sig * sig

    @functools.cached_property
    def reference_response(self) -> float:
        cross = np.zeros((64, 64))
        cross[31:34, :] = 1.0
        cross[:, 31:34] = 1.0
        return float(self._response(cross).max())

    def scores(self, arr: np.ndarray) -> np.ndarray:
        return np.clip(self._response(arr) / self.reference_response, 0.0, 1.0)

    def _orientation(self, sm: np.ndarray, xy: np.ndarray) -> np.ndarray:
        r = int(math.ceil(self.patch_size * self.patch_spacing / 2))
        oy, ox = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
        disk = (ox ** 2 + oy ** 2) <= r * r
        angles = np.zeros(len(xy))
        for k, (x, y) in enumerate(xy):
            vals = ndimage.map_coordinates(sm, [oy + y, ox + x], order=1, mode="constant")
            vals = vals * disk
            angles[k] = math.atan2((vals * oy).sum(), (vals * ox).sum())
        return angles

    def describe(self, arr: np.ndarray, xy: np.ndarray):
        """Descriptors for ``xy``; returns (descriptors, valid-row mask)."""
        sm = ndimage.gaussian_filter(arr, self.descriptor_sigma, mode="constant")
        n = self.patch_size
        g = (np.arange(n) - (n - 1) / 2.0) * self.patch_spacing
        gy, gx = np.meshgrid(g, g, indexing="ij")
        angles = self._orientation(sm, xy) if self.oriented else np.zeros(len(xy))
        desc = np.zeros((len(xy), n * n))
        for k, ((x, y), th) in enumerate(zip(xy, angles)):
            c, s = math.cos(th), math.sin(th)
            sx = x + c * gx - s * gy
            sy = y + s * gx + c * gy
            desc[k] = ndimage.map_coordinates(sm, [sy, sx], order=1, mode="constant").ravel()
        desc -= desc.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(desc, axis=1)
        valid = norms > 1e-8
        desc[valid] /= norms[valid, None]
        return desc, valid

    def __call__(self, arr: np.ndarray, cfg: DetectorConfig) -> KeypointSet:
        score = self.scores(arr)
        local_max = score == ndimage.maximum_filter(score, size=3, mode="constant")
        cand = local_max & (score >= cfg.score_threshold)
        b = cfg.border
        if b > 0:
            cand[:b, :] = cand[-b:, :] = False
            cand[:, :b] = cand[:, -b:] = False
        ys, xs = np.nonzero(cand)
        if len(xs) == 0:
            return KeypointSet.empty(self.patch_size ** 2)
        xy = np.stack([xs, ys], axis=1).astype(np.float64)
        sc = score[ys, xs]
        keep = greedy_nms(xy, sc, cfg.nms_radius)
        if cfg.max_keypoints is not None:
            keep = keep[: cfg.max_keypoints]
        xy, sc = xy[keep], sc[keep]
        desc, valid = self.describe(arr, xy)
        return KeypointSet(xy[valid], desc[valid], sc[valid])


DetectorHandle = Union[ClassicalDetector, "SuperPointDetector"]


def detect_and_describe(img, detector: Optional[DetectorHandle] = None, cfg: Optional[DetectorConfig] = None) -> KeypointSet:
    """Detect keypoints on a mask, probability map or image."""
    detector = detector or ClassicalDetector()
    cfg = cfg or DetectorConfig()
    return detector(_as_array(img), cfg)


def load_detector(spec: Optional[Union[str, Path]]) -> DetectorHandle:
    """``None`` or ``"classical"`` gives the fallback; anything else is a weights path."""
    if spec is None or str(spec) == "classical":
        return ClassicalDetector()
    from .superpoint import SuperPointDetector

    path = Path(spec)
    if not path.exists():
        raise WeightsError(
            f"keypoint weights file {path} not found; use the built-in 'classical' detector instead"
        )
    return SuperPointDetector.from_file(path)
