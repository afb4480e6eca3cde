"""Registration quality metrics: point errors, success rates, vesselness overlap."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import cv2
import numpy as np
from skimage.filters import frangi

from .core import (
    BinaryMask,
    CorrespondenceSet,
    GrayImage,
    PartialAffine2D,
    ProbabilityMap,
    RegistrationResult,
)
from .geometry import apply, compose, invert, warp_image, warp_mask

Criterion = str  # "rmse" or "mae"


@dataclass
class VesselnessConfig:
    clahe_clip_limit: float = 2.0
    clahe_tile: tuple = (8, 8)
    frangi_scales: Sequence[float] = (1, 2, 3, 4, 5)
    frangi_beta: float = 0.5
    frangi_c: Optional[float] = None  # None: half the maximum Hessian norm

    def __post_init__(self):
        self.frangi_scales = tuple(float(s) for s in self.frangi_scales)
        self.clahe_tile = tuple(int(t) for t in self.clahe_tile)
        if not self.frangi_scales or min(self.frangi_scales) <= 0:
            raise ValueError("frangi_scales must be a non-empty list of positive sigmas")
        if self.clahe_clip_limit <= 0:
            raise ValueError("clahe_clip_limit must be positive")
        if len(self.clahe_tile) != 2 or min(self.clahe_tile) < 1:
            raise ValueError("clahe_tile must be two positive integers")


# --- point-based metrics ---------------------------------------------------

def reprojection_errors(t: PartialAffine2D, gt: CorrespondenceSet) -> np.ndarray:
    """Distance between ``t(points_a)`` and ``points_b`` for every annotated pair."""
    if len(gt) == 0:
        raise ValueError("reprojection errors need at least one correspondence")
    return np.linalg.norm(apply(t, gt.points_a) - gt.points_b, axis=1)


def rmse(errors) -> float:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("rmse of an empty error list")
    return float(np.sqrt(np.mean(e ** 2)))


def mae(errors) -> float:
    """Maximum absolute error of a pair."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("mae of an empty error list")
    return float(np.max(np.abs(e)))


def success_rate(results: Sequence[RegistrationResult], criterion: Criterion = "rmse",
                 threshold: float = 10.0) -> float:
    if len(results) == 0:
        raise ValueError("success rate of an empty result list")
    if criterion not in ("rmse", "mae"):
        raise ValueError(f"criterion must be 'rmse' or 'mae', got {criterion!r}")
    return sum(r.success(criterion, threshold) for r in results) / len(results)


# --- vesselness-based metrics ----------------------------------------------

def _pixels(img) -> np.ndarray:
    if isinstance(img, GrayImage):
        return img.pixels
    if isinstance(img, ProbabilityMap):
        return img.values
    return np.asarray(img, dtype=np.float64)


def clahe(arr: np.ndarray, cfg: VesselnessConfig) -> np.ndarray:
    """Min-max normalise, then contrast-limited adaptive equalisation at 16 bit."""
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo <= 1e-12:
        return np.zeros_like(arr, dtype=np.float64)
    u16 = np.round((arr - lo) / (hi - lo) * 65535).astype(np.uint16)
    eq = cv2.createCLAHE(clipLimit=cfg.clahe_clip_limit, tileGridSize=cfg.clahe_tile).apply(u16)
    return eq.astype(np.float64) / 65535.0


def vesselness(img, cfg: Optional[VesselnessConfig] = None) -> ProbabilityMap:
    cfg = cfg or VesselnessConfig()
    arr = _pixels(img).astype(np.float64)
    if np.ptp(arr) <= 1e-12:
        return ProbabilityMap(np.zeros_like(arr))
    enh = clahe(arr, cfg)
    v = frangi(enh, sigmas=cfg.frangi_scales, beta=cfg.frangi_beta, gamma=cfg.frangi_c,
               black_ridges=False, mode="reflect")
    v = np.nan_to_num(v, nan=0.0, posinf=0.0, neginf=0.0)
    vmax = v.max()
    return ProbabilityMap(v / vmax if vmax > 0 else np.zeros_like(v))


def _dice(fs: np.ndarray, ft: np.ndarray) -> float:
    denom = fs.sum() + ft.sum()
    if denom <= 0:
        return 0.0
    return float(2.0 * np.minimum(fs, ft).sum() / denom)


def soft_dice(warped_src, target, cfg: Optional[VesselnessConfig] = None) -> float:
    """Overlap of the vesselness maps of two aligned images (0 when both are blank)."""
    fs, ft = _pixels(vesselness(warped_src, cfg)), _pixels(vesselness(target, cfg))
    if fs.shape != ft.shape:
        raise ValueError(f"image dims differ: {fs.shape} vs {ft.shape}")
    return _dice(fs, ft)


def masked_soft_dice(warped_ema, octa, warped_ema_gt_mask, cfg: Optional[VesselnessConfig] = None) -> float:
    """Soft Dice restricted to the warped low-VD ground-truth vessel mask."""
    m = warped_ema_gt_mask.values if isinstance(warped_ema_gt_mask, BinaryMask) else np.asarray(warped_ema_gt_mask)
    if not np.any(m):
        raise ValueError("masked soft dice is undefined for an all-zero mask")
    fs, ft = _pixels(vesselness(warped_ema, cfg)), _pixels(vesselness(octa, cfg))
    if not (fs.shape == ft.shape == m.shape):
        raise ValueError(f"dims differ: {fs.shape}, {ft.shape}, {m.shape}")
    m = m.astype(np.float64)
    return _dice(fs * m, ft * m)


def overlap_metrics(fixed: GrayImage, moving: GrayImage, t: PartialAffine2D,
                    moving_mask: Optional[BinaryMask] = None,
                    cfg: Optional[VesselnessConfig] = None) -> dict:
    """Soft Dice and Masked Soft Dice with the moving (low-VD) image warped onto the fixed frame."""
    back = invert(t)
    warped = warp_image(moving, back, fixed.shape)
    out = {"soft_dice": soft_dice(warped, fixed, cfg)}
    if moving_mask is not None:
        wm = warp_mask(moving_mask, back, fixed.shape)
        out["masked_soft_dice"] = (masked_soft_dice(warped, fixed, wm, cfg)
                                   if wm.values.any() else float("nan"))
    return out


def metric_heatmap(fixed: GrayImage, moving: GrayImage, gt_transform: PartialAffine2D,
                   shifts: Union[Sequence[float], np.ndarray], moving_mask: Optional[BinaryMask] = None,
                   metric: str = "masked_soft_dice", cfg: Optional[VesselnessConfig] = None) -> np.ndarray:
    """Metric on the ground-truth registration perturbed by every ``(dx, dy)`` in ``shifts x shifts``.

    Rows index ``dy`` and columns ``dx``; the shift is applied in the moving frame.
    """
    cfg = cfg or VesselnessConfig()
    shifts = np.asarray(shifts, dtype=np.float64)
    vf = _pixels(vesselness(fixed, cfg))
    grid = np.zeros((len(shifts), len(shifts)))
    for iy, dy in enumerate(shifts):
        for ix, dx in enumerate(shifts):
            t = compose(PartialAffine2D.from_abt(1.0, 0.0, -dx, -dy), gt_transform)
            back = invert(t)
            fw = _pixels(vesselness(warp_image(moving, back, fixed.shape), cfg))
            if metric == "soft_dice":
                grid[iy, ix] = _dice(fw, vf)
            else:
                wm = warp_mask(moving_mask, back, fixed.shape).values.astype(np.float64)
                grid[iy, ix] = _dice(fw * wm, vf * wm) if wm.any() else 0.0
    return grid


# --- reports ---------------------------------------------------------------

CSV_FIELDS = ("id", "rmse", "mae", "success_rmse", "success_mae", "soft_dice", "masked_soft_dice",
              "failed", "failure_stage")


@dataclass
class PairEvaluation:
    id: str
    result: RegistrationResult
    soft_dice: Optional[float] = None
    masked_soft_dice: Optional[float] = None

    def row(self) -> dict:
        r = self.result
        return {
            "id": self.id,
            "rmse": r.rmse,
            "mae": r.mae,
            "success_rmse": r.success("rmse"),
            "success_mae": r.success("mae"),
            "soft_dice": self.soft_dice,
            "masked_soft_dice": self.masked_soft_dice,
            "failed": r.failed,
            "failure_stage": r.failure_stage,
        }


def _mean(values: Iterable) -> Optional[float]:
    v = [x for x in values if x is not None and np.isfinite(x)]
    return float(np.mean(v)) if v else None


def summarize(evals: Sequence[PairEvaluation]) -> dict:
    """Dataset aggregates. Success rates count failures as unsuccessful; error and
    overlap means cover the pairs that produced a transform."""
    results = [e.result for e in evals]
    return {
        "n_pairs": len(evals),
        "n_failed": sum(r.failed for r in results),
        "success_rate_rmse": success_rate(results, "rmse") if results else None,
        "success_rate_mae": success_rate(results, "mae") if results else None,
        "rmse": _mean(e.result.rmse for e in evals),
        "mae": _mean(e.result.mae for e in evals),
        "soft_dice": _mean(e.soft_dice for e in evals),
        "masked_soft_dice": _mean(e.masked_soft_dice for e in evals),
    }


def write_report(evals: Sequence[PairEvaluation], out_dir,
                 baseline: Optional[Sequence[PairEvaluation]] = None) -> dict:
    """Per-pair ``evaluation.csv`` plus ``summary.json``.

    ``baseline`` holds identity-transform evaluations of the same pairs; they
    are written to ``unregistered.csv`` and summarised under ``before_registration``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def dump(rows, name):
        with (out_dir / name).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            w.writeheader()
            for e in rows:
                w.writerow(e.row())

    dump(evals, "evaluation.csv")
    summary = {"registered": summarize(evals)}
    if baseline is not None:
        dump(baseline, "unregistered.csv")
        summary["before_registration"] = summarize(baseline)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary
