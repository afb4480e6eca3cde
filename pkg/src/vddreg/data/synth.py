"""Procedural multimodal vessel-image pairs with exact ground truth.

A random branching tree is drawn in the moving (EMA-like) frame. Modality A
keeps only the large-calibre branches (low vessel density); modality B keeps
every branch plus a capillary texture and is rendered in the fixed
(OCTA-like) frame under a sampled similarity transform.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from ..core import BinaryMask, CorrespondenceSet, GrayImage, Modality, PartialAffine2D
from ..geometry import apply, invert
from .records import GT_POINTS_PER_PAIR, ImagePairRecord, parity_split

_STREAM_PAIR = 0
_STREAM_STYLE = 1
# Rejected ground-truth point draws before the minimum spacing is relaxed.
_GT_DRAWS = 5000


@dataclass
class SynthConfig:
    seed: int = 0
    canvas: int = 256
    n_pairs: int = 30
    vd_ratio: float = 5.0
    target_vd_a: float = 0.047
    scale_range: tuple = (0.95, 1.05)
    rotation_deg: tuple = (-15.0, 15.0)
    translation_px: tuple = (-40.0, 40.0)
    noise_a: float = 0.30
    noise_b: float = 0.08
    n_frames: int = 4
    family: str = "A"
    # Branches thinner than this radius (in units of canvas/256 px) are absent from modality A.
    min_radius_a: float = 1.6

    def __post_init__(self):
        if self.vd_ratio < 1.0:
            raise ValueError("vd_ratio must be >= 1")
        for name, lo_hi, ident in (
            ("scale_range", self.scale_range, 1.0),
            ("rotation_deg", self.rotation_deg, 0.0),
            ("translation_px", self.translation_px, 0.0),
        ):
            lo, hi = lo_hi
            if not lo <= ident <= hi:
                raise ValueError(f"{name} {lo_hi} must bracket the identity value {ident}")
        if self.family not in ("A", "B"):
            raise ValueError(f"unknown generator family {self.family!r}")
        self.scale_range = tuple(self.scale_range)
        self.rotation_deg = tuple(self.rotation_deg)
        self.translation_px = tuple(self.translation_px)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("scale_range", "rotation_deg", "translation_px"):
            d[k] = list(d[k])
        return d


# Branching statistics per generator family.
_FAMILIES = {
    "A": dict(branch_angle=(0.8, 1.3), seg_len=(0.14, 0.26), tortuosity=0.06, child_ratio=(0.72, 0.88)),
    "B": dict(branch_angle=(1.0, 1.5), seg_len=(0.10, 0.20), tortuosity=0.10, child_ratio=(0.65, 0.82)),
}


@dataclass
class _Branch:
    points: np.ndarray  # (n, 2) polyline in the moving frame
    radius: float


@dataclass
class SyntheticPair:
    record: ImagePairRecord
    transform: PartialAffine2D
    bifurcations: np.ndarray  # (k, 2) in moving-frame pixel coords
    moving_mask: BinaryMask  # modality A clean mask (moving frame)
    fixed_mask: BinaryMask  # modality B clean mask (fixed frame)
    ema_frames: list = field(default_factory=list)


def _rng(cfg: SynthConfig, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, stream, index]))


def _walk(rng, start, angle, length, step, tortuosity):
    n = max(2, int(length / step))
    pts = [np.asarray(start, dtype=np.float64)]
    for _ in range(n):
        angle += rng.normal(0.0, tortuosity)
        pts.append(pts[-1] + step * np.array([math.cos(angle), math.sin(angle)]))
    return np.array(pts), angle


def _grow_tree(rng, cfg: SynthConfig, fam: dict, start, angle, radius, scale, branches, bifs):
    stack = [(np.asarray(start, float), angle, radius, 0)]
    r_a = cfg.min_radius_a * scale
    while stack:
        p, ang, r, depth = stack.pop()
        length = cfg.canvas * rng.uniform(*fam["seg_len"]) * (r / (3.0 * scale)) ** 0.5
        pts, end_ang = _walk(rng, p, ang, length, 1.5, fam["tortuosity"])
        branches.append(_Branch(pts, r))
        end = pts[-1]
        if depth >= 6 or r < 0.9 * scale:
            continue
        if np.any(np.abs(end - cfg.canvas / 2) > cfg.canvas):
            continue
        split = rng.uniform(*fam["branch_angle"])
        bias = rng.uniform(0.3, 0.7)
        ratio = rng.uniform(*fam["child_ratio"])
        r1, r2 = r * ratio, r * ratio * rng.uniform(0.75, 1.0)
        if rng.random() < 0.5:
            r1, r2 = r2, r1
        children = [(end, end_ang - split * bias, r1, depth + 1), (end, end_ang + split * (1 - bias), r2, depth + 1)]
        if r >= r_a and r1 >= r_a and r2 >= r_a:
            bifs.append(end.copy())
        stack.extend(children)


def _render(branches, shape, xform: Optional[PartialAffine2D], intensity_fn=None):
    """Rasterise branches; returns (coverage mask, intensity image).

    ``xform`` maps moving-frame points into the render frame.
    """
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    img = np.zeros(shape, dtype=np.float64)
    s = 1.0 if xform is None else xform.scale
    for br in branches:
        pts = br.points if xform is None else apply(xform, br.points)
        r = br.radius * s
        value = 1.0 if intensity_fn is None else intensity_fn(br.radius)
        pad = r + 2.0
        x0 = int(max(0, math.floor(pts[:, 0].min() - pad)))
        x1 = int(min(w, math.ceil(pts[:, 0].max() + pad) + 1))
        y0 = int(max(0, math.floor(pts[:, 1].min() - pad)))
        y1 = int(min(h, math.ceil(pts[:, 1].max() + pad) + 1))
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
        d = np.full(xs.shape, np.inf)
        for p, q in zip(pts[:-1], pts[1:]):
            v = q - p
            vv = v @ v
            tt = np.clip(((xs - p[0]) * v[0] + (ys - p[1]) * v[1]) / max(vv, 1e-12), 0.0, 1.0)
            dx = xs - (p[0] + tt * v[0])
            dy = ys - (p[1] + tt * v[1])
            np.minimum(d, np.hypot(dx, dy), out=d)
        mask[y0:y1, x0:x1] |= d <= r
        profile = np.clip(1.0 - (d / (r + 0.75)) ** 2, 0.0, 1.0) ** 0.5
        np.maximum(img[y0:y1, x0:x1], value * profile, out=img[y0:y1, x0:x1])
    return mask, img


def _background(rng, shape, amplitude, sigma):
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    field_ /= max(np.abs(field_).max(), 1e-12)
    return amplitude * field_


def sample_transform(rng, cfg: SynthConfig) -> PartialAffine2D:
    """Sample a fixed->moving similarity rotating/scaling about the canvas centre."""
    s = rng.uniform(*cfg.scale_range)
    th = math.radians(rng.uniform(*cfg.rotation_deg))
    d = rng.uniform(*cfg.translation_px, size=2)
    c = np.array([cfg.canvas - 1, cfg.canvas - 1], dtype=np.float64) / 2.0
    a, b = s * math.cos(th), s * math.sin(th)
    rc = np.array([a * c[0] - b * c[1], b * c[0] + a * c[1]])
    t = c + d - rc
    return PartialAffine2D.from_abt(a, b, t[0], t[1])


def centre_displacement(t: PartialAffine2D, canvas: int) -> np.ndarray:
    c = np.array([canvas - 1, canvas - 1], dtype=np.float64) / 2.0
    return apply(t, c) - c


def _tree_branches(rng, cfg: SynthConfig, target_vd: float):
    fam = _FAMILIES[cfg.family]
    scale = cfg.canvas / 256.0
    n = cfg.canvas
    branches: list[_Branch] = []
    bifs: list[np.ndarray] = []
    r_a = cfg.min_radius_a * scale
    # Trees enter from two disc-like hubs outside the frame.
    hub_angles = rng.uniform(0, 2 * math.pi) + np.array([0.0, rng.uniform(0.6, 1.4) * math.pi])
    hubs = [n / 2 + 0.6 * n * np.array([math.cos(a), math.sin(a)]) for a in hub_angles]
    for k in range(24):
        hub = hubs[k % 2]
        a_mask, _ = _render([b for b in branches if b.radius >= r_a], (n, n), None)
        if a_mask.mean() >= target_vd:
            break
        target = n / 2 + rng.uniform(-0.3 * n, 0.3 * n, size=2)
        ang = math.atan2(target[1] - hub[1], target[0] - hub[0]) + rng.normal(0, 0.2)
        r0 = scale * rng.uniform(2.6, 3.4) * (1.0 + 2.0 * max(0.0, target_vd - 0.06))
        _grow_tree(rng, cfg, fam, hub, ang, r0, scale, branches, bifs)
    return branches, np.array(bifs).reshape(-1, 2)


def _capillaries(rng, cfg: SynthConfig, region, n: int, pool: list):
    """Short tortuous vessels sprouting from existing vessels, forming a mesh.

    ``pool`` holds candidate sprout points and grows as capillaries are added.
    """
    (x0, y0), (x1, y1) = region
    out = []
    for _ in range(n):
        if pool and rng.random() < 0.5:
            start = pool[int(rng.integers(len(pool)))]
        else:
            start = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        pts, _ = _walk(rng, start, rng.uniform(0, 2 * math.pi), rng.uniform(6, 18), 1.2, 0.3)
        out.append(_Branch(pts, rng.uniform(0.5, 0.7)))
        pool.extend(pts[2::3])
    return out


def _frame_region(t: PartialAffine2D, canvas: int):
    corners = np.array([[0, 0], [canvas - 1, 0], [0, canvas - 1], [canvas - 1, canvas - 1]], float)
    mapped = apply(t, corners)
    return mapped.min(0) - 4, mapped.max(0) + 4


def _gt_points(rng, cfg: SynthConfig, t: PartialAffine2D, bifs: np.ndarray):
    """Six fixed->moving point pairs inside both frames, preferring bifurcations."""
    n = cfg.canvas
    margin = 8.0
    inv = invert(t)

    def inside(p):
        return np.all((p >= margin) & (p <= n - 1 - margin), axis=-1)

    cands = bifs[inside(bifs) & inside(apply(inv, bifs))] if len(bifs) else np.zeros((0, 2))
    cands = cands[rng.permutation(len(cands))]
    chosen: list[np.ndarray] = []
    for p in cands:
        if all(np.hypot(*(p - q)) > 12 for q in chosen):
            chosen.append(p)
        if len(chosen) == GT_POINTS_PER_PAIR:
            break
    spacing, misses = 12.0, 0
    while len(chosen) < GT_POINTS_PER_PAIR:
        p = rng.uniform(margin, n - 1 - margin, size=2)
        if inside(apply(inv, p[None]))[0] and all(np.hypot(*(p - q)) > spacing for q in chosen):
            chosen.append(p)
            continue
        misses += 1
        if misses % _GT_DRAWS == 0:
            # Small canvases with large offsets leave little overlap; relax the spacing.
            spacing /= 2
            if spacing < 1.0:
                raise ValueError(
                    f"frames overlap too little for {GT_POINTS_PER_PAIR} ground-truth points; "
                    "reduce translation_px or enlarge the canvas"
                )
    pts_b = np.array(chosen)
    return CorrespondenceSet(apply(inv, pts_b), pts_b)


def _intensity_b(scale: float, r_a: float):
    def fn(radius):
        if radius >= r_a:
            return 0.9
        if radius >= 0.9 * scale:
            return 0.72
        return 0.55
    return fn


def generate_synthetic_pair(cfg: SynthConfig, index: int) -> SyntheticPair:
    rng = _rng(cfg, index, _STREAM_PAIR)
    n = cfg.canvas
    scale = n / 256.0
    r_a = cfg.min_radius_a * scale
    t = sample_transform(rng, cfg)  # fixed -> moving
    inv = invert(t)  # moving -> fixed

    branches, bifs = _tree_branches(rng, cfg, cfg.target_vd_a)
    a_branches = [b for b in branches if b.radius >= r_a]
    mask_a, vessels_a = _render(a_branches, (n, n), None)
    vd_a = mask_a.mean()

    mask_b, img_b = _render(branches, (n, n), inv, _intensity_b(scale, r_a))
    target_vd_b = min(0.95, cfg.vd_ratio * vd_a)
    region = _frame_region(t, n)
    lo, hi = region
    pool = [p for b in branches for p in b.points[::4] if np.all((p >= lo) & (p <= hi))]
    cap_fn = _intensity_b(scale, r_a)
    for _ in range(400):
        if mask_b.mean() >= target_vd_b:
            break
        deficit = (target_vd_b - mask_b.mean()) * n * n
        batch = max(1, min(200, int(deficit / 40)))
        caps = _capillaries(rng, cfg, region, batch, pool)
        m, im = _render(caps, (n, n), inv, cap_fn)
        mask_b |= m
        np.maximum(img_b, im, out=img_b)

    frames = []
    bg_a = _background(rng, (n, n), 0.08, n / 8) + 0.15
    for _ in range(cfg.n_frames):
        f = bg_a + 0.75 * vessels_a + rng.normal(0.0, cfg.noise_a, size=(n, n))
        frames.append(np.clip(f, 0.0, 1.0))
    moving_px = np.clip(np.mean(frames, axis=0), 0.0, 1.0)
    fixed_px = np.clip(
        _background(rng, (n, n), 0.06, n / 8) + 0.1 + 0.85 * img_b
        + rng.normal(0.0, cfg.noise_b, size=(n, n)),
        0.0,
        1.0,
    )

    gt = _gt_points(rng, cfg, t, bifs)
    keep = (
        np.all((bifs >= 0) & (bifs <= n - 1), axis=1) if len(bifs) else np.zeros(0, bool)
    )
    bifs = bifs[keep]
    moving_mask = BinaryMask(mask_a.astype(np.uint8))
    record = ImagePairRecord(
        id=f"{index:03d}",
        fixed=GrayImage(fixed_px, Modality.SYNTH_B),
        moving=GrayImage(moving_px, Modality.SYNTH_A),
        gt_correspondences=gt,
        gt_moving_mask=moving_mask,
        split=parity_split(index, 0),
        gt_transform=t,
    )
    return SyntheticPair(
        record=record,
        transform=t,
        bifurcations=bifs,
        moving_mask=moving_mask,
        fixed_mask=BinaryMask(mask_b.astype(np.uint8)),
        ema_frames=[GrayImage(f, Modality.SYNTH_A) for f in frames],
    )


def generate_style_target(cfg: SynthConfig, index: int = 0):
    """A stand-alone modality-A mask drawn from a stream disjoint from all pairs."""
    from ..core import StyleTarget

    rng = _rng(cfg, index, _STREAM_STYLE)
    n = cfg.canvas
    branches, _ = _tree_branches(rng, cfg, cfg.target_vd_a)
    r_a = cfg.min_radius_a * n / 256.0
    mask, _ = _render([b for b in branches if b.radius >= r_a], (n, n), None)
    return StyleTarget(BinaryMask(mask.astype(np.uint8)), source_id=f"synth_style_{cfg.seed}_{index}")


def generate_dataset(cfg: SynthConfig) -> list[SyntheticPair]:
    return [generate_synthetic_pair(cfg, i) for i in range(cfg.n_pairs)]
