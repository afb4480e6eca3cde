"""Vessel-segmentation networks and the frozen perceptual backbone.

Both share a VGG-16-style convolutional layout. Only the first ten
convolutions (four pooling stages) are ever built, which covers every tap the
style loss uses and the whole DRIU-style encoder.

Weights files are ``torch.save``'d dicts of named tensors; each ``X.pt`` has
a ``X.json`` manifest next to it (see ``docs/formats.md``).
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .core import GrayImage, ProbabilityMap
from .errors import DimensionError, WeightsError

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Channels of the first ten convolutions, grouped by pooling stage.
ARCHS = {
    "vgg16": ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512)),
    "small": ((8, 8), (16, 16), (32, 32, 32), (64, 64, 64)),
    "tiny": ((2, 2), (2, 2), (2, 2, 2), (2, 2, 2)),
}
SIDE_CHANNELS = {"vgg16": 16, "small": 4, "tiny": 1}

# Taps after the 2nd, 4th, 7th and 10th convolution activations.
DEFAULT_TAPS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _build_features(arch: str) -> tuple[nn.Sequential, dict[str, int], list[int]]:
    """Layers laid out like torchvision's ``vgg16().features`` so its keys load directly.

    Returns the layers, a map from tap name to layer index, and the index of
    the last layer of each stage.
    """
    layers: list[nn.Module] = []
    taps: dict[str, int] = {}
    stage_ends: list[int] = []
    c_in = 3
    for s, stage in enumerate(ARCHS[arch], start=1):
        if s > 1:
            layers.append(nn.MaxPool2d(2, 2))
        for k, c_out in enumerate(stage, start=1):
            layers.append(nn.Conv2d(c_in, c_out, 3, padding=1))
            layers.append(nn.ReLU(inplace=False))
            taps[f"relu{s}_{k}"] = len(layers) - 1
            c_in = c_out
        stage_ends.append(len(layers) - 1)
    return nn.Sequential(*layers), taps, stage_ends


def _seeded_init(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()


def checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        t = x
    elif isinstance(x, GrayImage):
        t = torch.from_numpy(np.array(x.pixels))
    elif isinstance(x, ProbabilityMap):
        t = torch.from_numpy(np.array(x.values))
    else:
        t = torch.from_numpy(np.asarray(x, dtype=np.float64))
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t.to(dtype)


class PerceptualBackbone(nn.Module):
    """Frozen feature extractor exposing named intermediate activations."""

    def __init__(self, arch: str = "small", seed: int = 0,
                 mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD):
        super().__init__()
        if arch not in ARCHS:
            raise ValueError(f"unknown backbone architecture {arch!r}")
        self.arch = arch
        self.seed = seed
        self.features, self.tap_index, self.stage_ends = _build_features(arch)
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))
        _seeded_init(self.features, seed)
        self.freeze()

    @property
    def taps(self) -> list[str]:
        return list(self.tap_index)

    def freeze(self) -> "PerceptualBackbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # Always stays in inference mode.
        return super().train(False)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

    def forward(self, x: torch.Tensor, taps: Optional[Sequence[str]] = None) -> dict[str, torch.Tensor]:
        taps = list(taps) if taps is not None else self.taps
        missing = [t for t in taps if t not in self.tap_index]
        if missing:
            raise ValueError(f"backbone {self.arch!r} has no tap(s) {missing}; available: {self.taps}")
        want = {self.tap_index[t]: t for t in taps}
        last = max(want)
        out: dict[str, torch.Tensor] = {}
        h = self.normalize(x)
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in want:
                out[want[i]] = h
            if i == last:
                break
        return out

    def manifest(self) -> dict:
        return {
            "kind": "perceptual_backbone",
            "arch": self.arch,
            "seed": self.seed,
            "taps": self.taps,
            "input_mean": self.mean.view(-1).tolist(),
            "input_std": self.std.view(-1).tolist(),
        }

    def save(self, path: PathLike) -> None:
        _save(self, path, self.manifest())

    @classmethod
    def load(cls, path: PathLike) -> "PerceptualBackbone":
        """Load a backbone file written by :meth:`save`, or a torchvision VGG-16 state dict.

        A bare VGG-16 state dict (keys ``features.N.weight``) is accepted when
        no manifest exists; ImageNet input normalisation is assumed for it.
        """
        path = Path(path)
        if not path.exists():
            raise WeightsError(f"backbone weights file {path} not found")
        manifest_path = path.with_suffix(".json")
        state = torch.load(path, map_location="cpu", weights_only=True)
        if manifest_path.exists():
            man = json.loads(manifest_path.read_text())
            bb = cls(man["arch"], man.get("seed", 0), man["input_mean"], man["input_std"])
            state = {k: v for k, v in state.items() if k.startswith("features.")}
        else:
            bb = cls("vgg16")
            state = {k: v for k, v in state.items() if k.startswith("features.")}
        own = bb.state_dict()
        wanted = {k: v for k, v in state.items() if k in own}
        missing = [k for k in own if k.startswith("features.") and k not in wanted]
        if missing:
            raise WeightsError(f"{path}: missing tensors {missing[:4]}...")
        bb.load_state_dict(wanted, strict=False)
        return bb.freeze()


def _bilinear_kernel(factor: int) -> torch.Tensor:
    size = 2 * factor
    center = factor - 0.5
    og = np.arange(size)
    filt = 1 - np.abs(og - center) / factor
    return torch.from_numpy(np.outer(filt, filt)).float()


class SegmentationNetwork(nn.Module):
    """DRIU-style network: VGG encoder, per-stage side outputs, learned fusion.

    Side outputs are upsampled to input resolution with transposed
    convolutions (bilinear-initialised), concatenated and fused by a 1x1
    convolution followed by a logistic squash.
    """

    def __init__(self, backbone: PerceptualBackbone, side_channels: Optional[int] = None, seed: int = 0):
        super().__init__()
        self.arch = backbone.arch
        self.encoder = copy.deepcopy(backbone.features)
        for p in self.encoder.parameters():
            p.requires_grad_(True)
        self.stage_ends = list(backbone.stage_ends)
        self.register_buffer("mean", backbone.mean.clone())
        self.register_buffer("std", backbone.std.clone())
        k = side_channels or SIDE_CHANNELS[self.arch]
        self.side_channels = k
        widths = [stage[-1] for stage in ARCHS[self.arch]]
        self.side = nn.ModuleList(nn.Conv2d(w, k, 3, padding=1) for w in widths)
        ups: list[nn.Module] = [nn.Identity()]
        for f in (2, 4, 8):
            up = nn.ConvTranspose2d(k, k, 2 * f, stride=f, padding=f // 2, groups=k, bias=False)
            with torch.no_grad():
                up.weight.copy_(_bilinear_kernel(f).expand(k, 1, 2 * f, 2 * f))
            ups.append(up)
        self.up = nn.ModuleList(ups)
        self.fuse = nn.Conv2d(4 * k, 1, 1)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in list(self.side) + [self.fuse]:
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (1.0 / fan_in) ** 0.5)
                m.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        for name, size in (("height", h), ("width", w)):
            if size % 8:
                raise DimensionError(f"input {name} {size} is not a multiple of 8")
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        sides = []
        stage = 0
        for i, layer in enumerate(self.encoder):
            x = layer(x)
            if i == self.stage_ends[stage]:
                sides.append(self.up[stage](self.side[stage](x)))
                stage += 1
                if stage == len(self.stage_ends):
                    break
        return torch.sigmoid(self.fuse(torch.cat(sides, dim=1)))

    def manifest(self) -> dict:
        return {
            "kind": "segmentation_network",
            "arch": self.arch,
            "side_channels": self.side_channels,
            "taps": list(DEFAULT_TAPS),
            "input_mean": self.mean.view(-1).tolist(),
            "input_std": self.std.view(-1).tolist(),
        }


def build_network(backbone: PerceptualBackbone, seed: int = 0) -> SegmentationNetwork:
    return SegmentationNetwork(backbone, seed=seed)


def predict(net: SegmentationNetwork, img: GrayImage) -> ProbabilityMap:
    """Per-pixel vessel probability, in inference mode."""
    if isinstance(img, GrayImage):
        img.require_network_ready()
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        out = net(_to_tensor(img, dtype))
    net.train(was_training)
    values = out[0, 0].double().numpy()
    return ProbabilityMap(np.clip(values, 0.0, 1.0))


def clone_weights(src: SegmentationNetwork) -> SegmentationNetwork:
    """Independent copy with value-equal parameters."""
    return copy.deepcopy(src)


def _save(module: nn.Module, path: PathLike, manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({k: v.detach().clone() for k, v in module.state_dict().items()}, path)
    manifest = dict(manifest, checksum=checksum(module))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")


def save_network(net: SegmentationNetwork, path: PathLike, **extra) -> None:
    _save(net, path, dict(net.manifest(), **extra))


def load_network(path: PathLike) -> SegmentationNetwork:
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    if not path.exists() or not manifest_path.exists():
        raise WeightsError(f"segmentation weights {path} (and manifest {manifest_path.name}) required")
    man = json.loads(manifest_path.read_text())
    if man.get("kind") != "segmentation_network":
        raise WeightsError(f"{manifest_path} does not describe a segmentation network")
    bb = PerceptualBackbone(man["arch"], 0, man["input_mean"], man["input_std"])
    net = SegmentationNetwork(bb, side_channels=man["side_channels"])
    net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return net


def make_backbone(spec: Union[str, PathLike] = "small", seed: int = 0) -> PerceptualBackbone:
    """``"small"``/``"tiny"`` build a fixed-seed random backbone; anything else is a weights path."""
    if str(spec) in ("small", "tiny"):
        return PerceptualBackbone(str(spec), seed=seed)
    return PerceptualBackbone.load(spec)
