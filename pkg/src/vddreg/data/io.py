"""Image I/O, preprocessing, and the MEMO / CF-FA directory loaders."""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
from scipy import ndimage

from ..core import (
    BinaryMask,
    CorrespondenceSet,
    GrayImage,
    Modality,
    PartialAffine2D,
    StyleTarget,
)
from ..errors import DatasetError, DimensionError
from ..geometry import compose, invert, warp_array
from .records import GT_POINTS_PER_PAIR, ImagePairRecord, parity_split

LUMA = (0.299, 0.587, 0.114)
TARGET_SIZE = 256


def to_gray(arr: np.ndarray) -> np.ndarray:
    """Luminance of an RGB(A) array; 2D arrays pass through."""
    if arr.ndim == 2:
        return arr
    rgb = arr[..., :3].astype(np.float64)
    return rgb @ np.asarray(LUMA)


def read_image(path, modality: Modality = Modality.SYNTH_A) -> GrayImage:
    """Load an 8- or 16-bit PNG/TIF/JPEG as a grayscale image in [0, 1]."""
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f"cannot read image {path}")
    if raw.ndim == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGBA if raw.shape[2] == 4 else cv2.COLOR_BGR2RGB)
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        scale = 1.0
    px = np.clip(to_gray(raw.astype(np.float64)) / scale, 0.0, 1.0)
    return GrayImage(px, modality)


def write_image(path, pixels: np.ndarray, bits: int = 8) -> None:
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    path = Path(path)
    top = 255 if bits == 8 else 65535
    arr = np.round(np.clip(pixels, 0.0, 1.0) * top).astype(np.uint8 if bits == 8 else np.uint16)
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"could not write {path}")


def read_mask(path) -> BinaryMask:
    return BinaryMask.from_image(read_image(path).pixels)


def stack_ema_sequence(frames: Sequence[GrayImage], mode: str = "mean") -> GrayImage:
    """Temporal mean (or maximum) of a registered frame sequence."""
    if len(frames) == 0:
        raise ValueError("need at least one frame")
    shape = frames[0].shape
    for k, f in enumerate(frames):
        if f.shape != shape:
            raise DimensionError(f"frame {k} has dims {f.shape}, expected {shape}")
    stack = np.stack([f.pixels for f in frames])
    if mode == "mean":
        out = stack.mean(axis=0)
    elif mode == "max":
        out = stack.max(axis=0)
    else:
        raise ValueError(f"mode must be 'mean' or 'max', got {mode!r}")
    return frames[0].with_pixels(np.clip(out, 0.0, 1.0))


# --- preprocessing ----------------------------------------------------------

def _resample(arr: np.ndarray, sx: float, sy: float, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resample so that pixel ``(x, y)`` lands at ``(sx*x, sy*y)``."""
    if sx == sy:
        return warp_array(arr, PartialAffine2D.from_abt(sx, 0.0, 0.0, 0.0), out_hw)
    ys, xs = np.mgrid[0:out_hw[0], 0:out_hw[1]].astype(np.float64)
    return ndimage.map_coordinates(np.asarray(arr, np.float64), [ys / sy, xs / sx],
                                   order=1, mode="constant", cval=0.0)


def _crop8(n: int) -> int:
    return n - n % 8


def preprocess_pair(raw: ImagePairRecord, size: int = TARGET_SIZE) -> ImagePairRecord:
    """Resize the fixed image to ``size x size`` and the moving image by the same factors,
    then crop the moving image at the bottom/right to multiples of 8.

    Points and masks follow by pure scaling (the origin is kept), so applying
    this twice is the same as applying it once.
    """
    fh, fw = raw.fixed.shape
    sx, sy = size / fw, size / fh
    mh, mw = raw.moving.shape
    out_mh, out_mw = _crop8(int(round(mh * sy))), _crop8(int(round(mw * sx)))
    if out_mh < 8 or out_mw < 8:
        raise DimensionError(
            f"pair {raw.id}: moving image would be {out_mw}x{out_mh} after resizing and cropping"
        )
    fixed_px = np.clip(_resample(raw.fixed.pixels, sx, sy, (size, size)), 0, 1)
    moving_px = np.clip(_resample(raw.moving.pixels, sx, sy, (out_mh, out_mw)), 0, 1)
    fixed = raw.fixed.with_pixels(fixed_px)
    moving = raw.moving.with_pixels(moving_px)

    gt = raw.gt_correspondences
    if gt is not None:
        s = np.array([sx, sy])
        gt = CorrespondenceSet(gt.points_a * s, gt.points_b * s)
    mask = raw.gt_moving_mask
    if mask is not None:
        mask = BinaryMask.from_image(_resample(mask.values.astype(np.float64), sx, sy, (out_mh, out_mw)))
    t = raw.gt_transform
    if t is not None:
        if np.isclose(sx, sy, rtol=0, atol=1e-12):
            s = PartialAffine2D.from_abt(sx, 0.0, 0.0, 0.0)
            t = compose(s, compose(t, invert(s)))
        else:
            t = None  # anisotropic scaling leaves the partial affine family
    extras = dict(raw.extras)
    extras["preprocess_scale"] = (sx, sy)
    return raw.replace(fixed=fixed, moving=moving, gt_correspondences=gt, gt_moving_mask=mask,
                       gt_transform=t, extras=extras)


# --- loaders ----------------------------------------------------------------

def _pair_index(pair_id: str, position: int) -> int:
    """Numeric ids define the parity split; otherwise the sorted position does."""
    m = re.search(r"(\d+)$", pair_id)
    return int(m.group(1)) if m else position


def _missing(paths: Sequence[Path]) -> None:
    gone = [str(p) for p in paths if not p.exists()]
    if gone:
        raise DatasetError("missing files:\n  " + "\n  ".join(gone))


def load_memo(root, modalities: Optional[tuple[Modality, Modality]] = None,
              stack_mode: str = "mean") -> list[ImagePairRecord]:
    """Read ``pair_<id>/{ema/frame_*.tif, octa/svp.tif, gt_points.txt[, ema_mask.png]}``.

    Only the SVP slab is registered; ICP/DCP, when present, go into ``extras``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if modalities is None:
        synthetic = (root / "synth_config.json").exists()
        modalities = (Modality.SYNTH_B, Modality.SYNTH_A) if synthetic else (Modality.OCTA, Modality.EMA)
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name.startswith("pair_"))
    if not dirs:
        raise DatasetError(f"no pair_<id> directories under {root}")
    records = []
    for pos, d in enumerate(dirs):
        pid = d.name[len("pair_"):]
        frames = sorted((d / "ema").glob("frame_*.tif")) if (d / "ema").is_dir() else []
        required = [d / "octa" / "svp.tif", d / "gt_points.txt"]
        if not frames:
            required.append(d / "ema" / "frame_*.tif")
        _missing(required)
        fixed = read_image(d / "octa" / "svp.tif", modalities[0])
        moving = stack_ema_sequence([read_image(f, modalities[1]) for f in frames], stack_mode)
        gt = CorrespondenceSet.load(d / "gt_points.txt", expected_pairs=GT_POINTS_PER_PAIR)
        mask = read_mask(d / "ema_mask.png") if (d / "ema_mask.png").exists() else None
        t = PartialAffine2D.load(d / "gt_transform.json") if (d / "gt_transform.json").exists() else None
        extras = {"root": str(d), "n_frames": len(frames)}
        for layer in ("icp", "dcp"):
            p = d / "octa" / f"{layer}.tif"
            if p.exists():
                extras[layer] = read_image(p, modalities[0])
        records.append(ImagePairRecord(
            id=pid, fixed=fixed, moving=moving, gt_correspondences=gt, gt_moving_mask=mask,
            split=parity_split(_pair_index(pid, pos), 0), gt_transform=t, extras=extras,
        ))
    return records


def load_cffa(root, style_target_id: Optional[str] = None) -> list[ImagePairRecord]:
    """Read ``<id>_cf.jpg``, ``<id>_fa.jpg`` and ``<id>_gt_points.txt`` triples.

    The pair named by ``style_target_id`` is withheld (its mask serves as the
    style target). Odd indices train, even ones test.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    ids = sorted({p.name[: -len("_cf.jpg")] for p in root.glob("*_cf.jpg")})
    ids = [i for i in ids if i != style_target_id]
    if not ids:
        raise DatasetError(f"no <id>_cf.jpg files under {root}")
    records = []
    for pos, pid in enumerate(ids):
        cf, fa, pts = root / f"{pid}_cf.jpg", root / f"{pid}_fa.jpg", root / f"{pid}_gt_points.txt"
        _missing([cf, fa, pts])
        records.append(ImagePairRecord(
            id=pid,
            fixed=read_image(fa, Modality.FA),
            moving=read_image(cf, Modality.CF),
            gt_correspondences=CorrespondenceSet.load(pts, expected_pairs=GT_POINTS_PER_PAIR),
            split=parity_split(_pair_index(pid, pos), 1),
            extras={"root": str(root)},
        ))
    return records


def load_style_target(path, source_id: Optional[str] = None) -> StyleTarget:
    path = Path(path)
    _missing([path])
    return StyleTarget(read_mask(path), source_id=source_id or path.stem)


# --- synthetic datasets on disk ---------------------------------------------

def write_synthetic_pair(pair, out_dir) -> Path:
    """Write one generated pair in the MEMO layout, plus the exact transform and bifurcations."""
    rec = pair.record
    d = Path(out_dir) / f"pair_{rec.id}"
    (d / "ema").mkdir(parents=True, exist_ok=True)
    (d / "octa").mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(pair.ema_frames):
        write_image(d / "ema" / f"frame_{k:03d}.tif", f.pixels, bits=16)
    write_image(d / "octa" / "svp.tif", rec.fixed.pixels, bits=16)
    write_image(d / "ema_mask.png", rec.gt_moving_mask.values.astype(np.float64), bits=8)
    write_image(d / "octa_mask.png", pair.fixed_mask.values.astype(np.float64), bits=8)
    rec.gt_correspondences.save(d / "gt_points.txt")
    pair.transform.save(d / "gt_transform.json")
    np.savetxt(d / "bifurcations.txt", pair.bifurcations.reshape(-1, 2), fmt="%.6f")
    return d


def write_synthetic_dataset(pairs, style_target: StyleTarget, out_dir, config: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for p in pairs:
        write_synthetic_pair(p, out)
    write_image(out / "style_target.png", style_target.mask.values.astype(np.float64), bits=8)
    (out / "synth_config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    return out


def load_dataset(root, kind: str = "auto") -> list[ImagePairRecord]:
    root = Path(root)
    if kind == "auto":
        kind = "cffa" if any(root.glob("*_cf.jpg")) else "memo"
    if kind == "memo":
        return load_memo(root)
    if kind == "cffa":
        return load_cffa(root)
    raise ValueError(f"unknown dataset kind {kind!r}")
