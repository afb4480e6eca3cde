from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from ..core import BinaryMask, CorrespondenceSet, GrayImage, PartialAffine2D

GT_POINTS_PER_PAIR = 6


@dataclass(frozen=True)
class ImagePairRecord:
    """One multimodal pair.

    ``fixed`` plays the OCTA/FA role and ``moving`` the EMA/CF role. Ground
    truth correspondences map fixed points (``points_a``) to moving points
    (``points_b``); a GT transform, when known, maps fixed to moving coords.
    """

    id: str
    fixed: GrayImage
    moving: GrayImage
    gt_correspondences: Optional[CorrespondenceSet] = None
    gt_moving_mask: Optional[BinaryMask] = None
    split: str = "train"
    gt_transform: Optional[PartialAffine2D] = None
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        gt = self.gt_correspondences
        if gt is not None and len(gt) != GT_POINTS_PER_PAIR:
            raise ValueError(
                f"pair {self.id}: ground truth must have {GT_POINTS_PER_PAIR} pairs, got {len(gt)}"
            )
        if self.gt_moving_mask is not None and self.gt_moving_mask.shape != self.moving.shape:
            raise ValueError(f"pair {self.id}: moving mask dims differ from moving image")

    def replace(self, **kw) -> "ImagePairRecord":
        return replace(self, **kw)


def parity_split(index: int, train_parity: int) -> str:
    """MEMO trains on even indices (``train_parity=0``); CF-FA on odd ones (``1``)."""
    return "train" if index % 2 == train_parity else "test"
