"""Domain types shared by all modules.

Coordinate convention used everywhere in the package: ``x`` is the column
index, ``y`` is the row index, and the origin sits on the centre of the
top-left pixel. Arrays are indexed ``[y, x]``.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DatasetError, DimensionError

PathLike = Union[str, Path]


class Modality(str, enum.Enum):
    EMA = "EMA"
    OCTA = "OCTA"
    CF = "CF"
    FA = "FA"
    SYNTH_A = "SYNTH_A"
    SYNTH_B = "SYNTH_B"


# Low vessel-density modalities take the heavier style weight in stage 2.
LOW_VD_MODALITIES = frozenset({Modality.EMA, Modality.CF, Modality.SYNTH_A})


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def _check_2d(arr: np.ndarray, what: str) -> None:
    if arr.ndim != 2:
        raise DimensionError(f"{what} must be 2D, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionError(f"{what} is empty")


@dataclass(frozen=True)
class GrayImage:
    pixels: np.ndarray
    modality: Modality = Modality.SYNTH_A
    pixel_size_um: Optional[float] = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        _check_2d(px, "GrayImage")
        if not np.all(np.isfinite(px)):
            raise ValueError("GrayImage contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(
                f"GrayImage intensities must lie in [0, 1], got [{px.min()}, {px.max()}]"
            )
        object.__setattr__(self, "pixels", _frozen(px))
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def network_ready(self) -> bool:
        return self.width % 8 == 0 and self.height % 8 == 0

    def require_network_ready(self) -> None:
        for name, size in (("width", self.width), ("height", self.height)):
            if size % 8:
                raise DimensionError(f"image {name} {size} is not a multiple of 8")

    def with_pixels(self, pixels: np.ndarray) -> "GrayImage":
        return GrayImage(pixels, self.modality, self.pixel_size_um)


@dataclass(frozen=True)
class ProbabilityMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        _check_2d(v, "ProbabilityMap")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("ProbabilityMap values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class BinaryMask:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        _check_2d(v, "BinaryMask")
        if v.dtype != bool:
            if not np.all((v == 0) | (v == 1)):
                raise ValueError("BinaryMask values must be 0 or 1")
        object.__setattr__(self, "values", _frozen(v.astype(np.uint8)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def from_image(cls, img: np.ndarray, threshold: float = 0.5) -> "BinaryMask":
        return cls((np.asarray(img) >= threshold).astype(np.uint8))


@dataclass(frozen=True)
class StyleTarget:
    """A stand-alone vessel mask used as the shared style reference.

    It never belongs to a train or test split.
    """

    mask: BinaryMask
    source_id: str = "style_target"
    excluded_from_splits: bool = field(default=True, init=False)


_AFFINE_TOL = 1e-9


@dataclass(frozen=True)
class PartialAffine2D:
    """4-DOF similarity transform ``[[a, -b, tx], [b, a, ty]]``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise DimensionError(f"partial affine matrix must be 2x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("partial affine matrix contains non-finite values")
        if abs(m[0, 0] - m[1, 1]) > _AFFINE_TOL or abs(m[0, 1] + m[1, 0]) > _AFFINE_TOL:
            raise ValueError(f"2x2 block is not a scaled rotation:\n{m}")
        if math.hypot(m[0, 0], m[1, 0]) <= 0.0:
            raise ValueError("partial affine transform must have positive scale")
        object.__setattr__(self, "matrix", _frozen(m))

    @classmethod
    def from_abt(cls, a: float, b: float, tx: float, ty: float) -> "PartialAffine2D":
        return cls(np.array([[a, -b, tx], [b, a, ty]], dtype=np.float64))

    @classmethod
    def compose_params(cls, scale: float, theta: float, tx: float = 0.0, ty: float = 0.0):
        return cls.from_abt(scale * math.cos(theta), scale * math.sin(theta), tx, ty)

    @classmethod
    def identity(cls) -> "PartialAffine2D":
        return cls.from_abt(1.0, 0.0, 0.0, 0.0)

    @property
    def a(self) -> float:
        return float(self.matrix[0, 0])

    @property
    def b(self) -> float:
        return float(self.matrix[1, 0])

    @property
    def scale(self) -> float:
        return math.hypot(self.a, self.b)

    @property
    def rotation(self) -> float:
        """Rotation angle in radians, in (-pi, pi]."""
        return math.atan2(self.b, self.a)

    @property
    def translation(self) -> tuple[float, float]:
        return float(self.matrix[0, 2]), float(self.matrix[1, 2])

    def decompose(self) -> tuple[float, float, float, float]:
        tx, ty = self.translation
        return self.scale, self.rotation, tx, ty

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "dof": 4}

    @classmethod
    def from_dict(cls, d: dict) -> "PartialAffine2D":
        if int(d.get("dof", 4)) != 4:
            raise ValueError(f"expected a 4-DOF transform, got dof={d.get('dof')}")
        return cls(np.asarray(d["matrix"], dtype=np.float64))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PartialAffine2D":
        return cls.from_dict(json.loads(text))

    def save(self, path: PathLike) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: PathLike) -> "PartialAffine2D":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired points; ``points_a[i]`` corresponds to ``points_b[i]``.

    For dataset ground truth, image A is the fixed (OCTA/FA) image and image B
    the moving (EMA/CF) image.
    """

    points_a: np.ndarray
    points_b: np.ndarray

    def __post_init__(self):
        pa = np.asarray(self.points_a, dtype=np.float64).reshape(-1, 2)
        pb = np.asarray(self.points_b, dtype=np.float64).reshape(-1, 2)
        if len(pa) != len(pb):
            raise ValueError(f"correspondence lengths differ: {len(pa)} vs {len(pb)}")
        object.__setattr__(self, "points_a", _frozen(pa))
        object.__setattr__(self, "points_b", _frozen(pb))

    def __len__(self) -> int:
        return len(self.points_a)

    def subset(self, idx: Sequence[int]) -> "CorrespondenceSet":
        idx = np.asarray(idx, dtype=int)
        return CorrespondenceSet(self.points_a[idx], self.points_b[idx])

    def within_bounds(self, shape_a: tuple[int, int], shape_b: tuple[int, int]) -> bool:
        """True if every point lies inside its image (``shape`` is ``(h, w)``)."""

        def inside(p, shape):
            h, w = shape
            return bool(np.all((p[:, 0] >= -0.5) & (p[:, 0] <= w - 0.5)
                               & (p[:, 1] >= -0.5) & (p[:, 1] <= h - 0.5)))

        return inside(self.points_a, shape_a) and inside(self.points_b, shape_b)

    def save(self, path: PathLike) -> None:
        lines = [
            f"{xa:.6f} {ya:.6f} {xb:.6f} {yb:.6f}"
            for (xa, ya), (xb, yb) in zip(self.points_a, self.points_b)
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: PathLike, expected_pairs: Optional[int] = None) -> "CorrespondenceSet":
        path = Path(path)
        rows = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            try:
                if len(parts) != 4:
                    raise ValueError
                rows.append([float(p) for p in parts])
            except ValueError:
                raise DatasetError(
                    f"{path}:{lineno}: expected 4 numbers 'x_a y_a x_b y_b', got {line!r}"
                ) from None
        if expected_pairs is not None and len(rows) != expected_pairs:
            raise DatasetError(f"{path}: expected {expected_pairs} point pairs, found {len(rows)}")
        arr = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
        return cls(arr[:, :2], arr[:, 2:])


@dataclass
class RegistrationResult:
    transform: Optional[PartialAffine2D]
    n_keypoints_a: int = 0
    n_keypoints_b: int = 0
    n_matches: int = 0
    n_inliers: int = 0
    seed: Optional[int] = None
    rmse: Optional[float] = None
    mae: Optional[float] = None
    failed: bool = False
    failure_stage: Optional[str] = None
    failure_message: Optional[str] = None

    def __post_init__(self):
        if self.n_inliers > self.n_matches:
            raise ValueError("n_inliers cannot exceed n_matches")

    def success(self, criterion: str = "rmse", threshold: float = 10.0) -> bool:
        if self.failed or self.transform is None:
            return False
        value = self.rmse if criterion == "rmse" else self.mae
        return value is not None and value < threshold

    def to_dict(self) -> dict:
        d = {
            "n_keypoints_a": self.n_keypoints_a,
            "n_keypoints_b": self.n_keypoints_b,
            "n_matches": self.n_matches,
            "n_inliers": self.n_inliers,
            "seed": self.seed,
            "failed": self.failed,
        }
        if self.transform is not None:
            d.update(self.transform.to_dict())
        if self.failed:
            d["failure_stage"] = self.failure_stage
            d["failure_message"] = self.failure_message
        if self.rmse is not None:
            d["rmse"] = self.rmse
            d["mae"] = self.mae
        return d


def vessel_density(mask: BinaryMask) -> float:
    """Fraction of pixels occupied by vessels."""
    v = mask.values if isinstance(mask, BinaryMask) else np.asarray(mask)
    if v.size == 0:
        raise DimensionError("vessel density of an empty mask is undefined")
    return float(np.count_nonzero(v)) / v.size


def binarize(p: ProbabilityMap, threshold: float = 0.5) -> BinaryMask:
    """Threshold a probability map; values equal to ``threshold`` count as vessel."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    values = p.values if isinstance(p, ProbabilityMap) else np.asarray(p)
    return BinaryMask((values >= threshold).astype(np.uint8))
