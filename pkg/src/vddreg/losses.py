"""Training losses for the two-stage vessel-segmentation scheme.

All loss functions operate on torch tensors shaped ``(B, 1, H, W)`` so they
can be differentiated; the domain types from :mod:`vddreg.core` are accepted
too and converted on the way in.
"""
from __future__ import annotations

import hashlib
import weakref
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .core import BinaryMask, StyleTarget
from .errors import DimensionError
from .segmentation import DEFAULT_TAPS, PerceptualBackbone, _to_tensor

Net = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class StyleLossConfig:
    taps: tuple = DEFAULT_TAPS
    w_st_e: float = 100.0
    w_st_o: float = 1.0
    w_sc: float = 1e-3
    w_v: float = 1.0

    def __post_init__(self):
        self.taps = tuple(self.taps)
        if len(self.taps) != 4:
            raise ValueError(f"style loss uses exactly 4 taps, got {len(self.taps)}")
        for name in ("w_st_e", "w_st_o", "w_sc", "w_v"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray  # (C, H, W)
    tap_name: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise DimensionError(f"feature map must be C x H x W with all dims >= 1, got {v.shape}")
        object.__setattr__(self, "values", v)


def _like(x, ref: torch.Tensor) -> torch.Tensor:
    return _to_tensor(x, ref.dtype) if not isinstance(x, torch.Tensor) else x


def mse_loss(pred, target):
    """Mean squared error over all pixels. Returns a float for non-tensor inputs."""
    as_float = not isinstance(pred, torch.Tensor)
    p = _to_tensor(pred, torch.float64) if as_float else pred
    t = _like(target, p).to(p.dtype)
    while t.dim() < p.dim():
        t = t.unsqueeze(0)
    if p.shape[-2:] != t.shape[-2:]:
        raise DimensionError(f"prediction {tuple(p.shape[-2:])} and target {tuple(t.shape[-2:])} differ")
    loss = torch.mean((p - t) ** 2)
    return float(loss) if as_float else loss


def rot90(x: torch.Tensor, k: int = 1) -> torch.Tensor:
    """Exact rotation of the last two axes by ``k`` quarter turns."""
    return torch.rot90(x, k, dims=(-2, -1))


def self_comparison_loss(net: Net, img, pred: Optional[torch.Tensor] = None) -> torch.Tensor:
    """MSE between the prediction on the rotated input (rotated back) and the plain prediction.

    ``pred`` may carry an already-computed ``net(img)`` to avoid a second pass.
    """
    x = img if isinstance(img, torch.Tensor) else _to_tensor(img, _param_dtype(net))
    if pred is None:
        pred = net(x)
    back = rot90(net(rot90(x, 1)), -1)
    return torch.mean((back - pred) ** 2)


def _param_dtype(net) -> torch.dtype:
    try:
        return next(net.parameters()).dtype
    except (AttributeError, StopIteration):
        return torch.float64


def gram_matrix(f):
    """Channel correlations normalised by ``C*H*W``.

    Accepts a :class:`FeatureMap`, a ``(C, H, W)`` array, or a ``(B, C, H, W)``
    tensor (batched result ``(B, C, C)``).
    """
    if isinstance(f, FeatureMap):
        f = f.values
    if not isinstance(f, torch.Tensor):
        v = np.asarray(f, dtype=np.float64)
        c = v.shape[0]
        flat = v.reshape(c, -1)
        return flat @ flat.T / v.size
    squeeze = f.dim() == 3
    if squeeze:
        f = f.unsqueeze(0)
    b, c, h, w = f.shape
    flat = f.reshape(b, c, h * w)
    g = torch.bmm(flat, flat.transpose(1, 2)) / (c * h * w)
    return g[0] if squeeze else g


_TARGET_CACHE: "weakref.WeakKeyDictionary[PerceptualBackbone, dict]" = weakref.WeakKeyDictionary()


def target_grams(backbone: PerceptualBackbone, target, taps: Sequence[str]) -> dict[str, torch.Tensor]:
    """Gram matrices of the style target, computed once per (backbone, target, taps)."""
    mask = target.mask if isinstance(target, StyleTarget) else target
    arr = mask.values if isinstance(mask, BinaryMask) else np.asarray(mask)
    dtype = next(backbone.parameters()).dtype
    key = (hashlib.sha1(np.ascontiguousarray(arr).tobytes()).hexdigest(), arr.shape, tuple(taps), dtype)
    cache = _TARGET_CACHE.setdefault(backbone, {})
    if key not in cache:
        x = _to_tensor(arr.astype(np.float64), dtype)
        with torch.no_grad():
            feats = backbone(x, taps)
            cache[key] = {t: gram_matrix(feats[t])[0] for t in taps}
    return cache[key]


def style_loss_terms(pred: torch.Tensor, target, backbone: PerceptualBackbone,
                     cfg: StyleLossConfig) -> dict[str, torch.Tensor]:
    """Per-tap squared Frobenius distances between prediction and target Gram matrices."""
    if not isinstance(pred, torch.Tensor):
        pred = _to_tensor(pred, torch.float64)
    grams = target_grams(backbone, target, cfg.taps)
    feats = backbone(pred.to(next(backbone.parameters()).dtype), cfg.taps)
    out = {}
    for tap in cfg.taps:
        g = gram_matrix(feats[tap])
        out[tap] = torch.sum((g - grams[tap].to(g.dtype)) ** 2) / g.shape[0]
    return out


def style_loss(pred, target, backbone: PerceptualBackbone, cfg: Optional[StyleLossConfig] = None):
    cfg = cfg or StyleLossConfig()
    as_float = not isinstance(pred, torch.Tensor)
    total = sum(style_loss_terms(pred, target, backbone, cfg).values())
    return float(total) if as_float else total


def stage1_terms(net: Net, img, gt, cfg: StyleLossConfig) -> dict[str, torch.Tensor]:
    x = img if isinstance(img, torch.Tensor) else _to_tensor(img, _param_dtype(net))
    pred = net(x)
    return {"mse": mse_loss(pred, gt), "self_comparison": self_comparison_loss(net, x, pred)}


def stage1_loss(net: Net, img, gt, cfg: Optional[StyleLossConfig] = None) -> torch.Tensor:
    """Supervised loss: ``w_v * MSE + w_sc * self-comparison``."""
    cfg = cfg or StyleLossConfig()
    t = stage1_terms(net, img, gt, cfg)
    return cfg.w_v * t["mse"] + cfg.w_sc * t["self_comparison"]


def stage2_terms(net_e: Net, net_o: Net, img_e, img_o, target, backbone: PerceptualBackbone,
                 cfg: StyleLossConfig) -> dict[str, torch.Tensor]:
    xe = img_e if isinstance(img_e, torch.Tensor) else _to_tensor(img_e, _param_dtype(net_e))
    xo = img_o if isinstance(img_o, torch.Tensor) else _to_tensor(img_o, _param_dtype(net_o))
    pe = net_e(xe)
    po = net_o(xo)
    return {
        "style_e": style_loss(pe, target, backbone, cfg),
        "style_o": style_loss(po, target, backbone, cfg),
        "sc_e": self_comparison_loss(net_e, xe, pe),
        "sc_o": self_comparison_loss(net_o, xo, po),
    }


def combine_stage2(terms: dict, cfg: StyleLossConfig):
    return (cfg.w_st_e * terms["style_e"] + cfg.w_st_o * terms["style_o"]
            + cfg.w_sc * (terms["sc_e"] + terms["sc_o"]))


def stage2_loss(net_e: Net, net_o: Net, img_e, img_o, target, backbone: PerceptualBackbone,
                cfg: Optional[StyleLossConfig] = None) -> torch.Tensor:
    """Unsupervised loss on an (EMA-like, OCTA-like) pair against the shared style target."""
    cfg = cfg or StyleLossConfig()
    return combine_stage2(stage2_terms(net_e, net_o, img_e, img_o, target, backbone, cfg), cfg)
