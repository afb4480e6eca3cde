"""Two-stage semi-supervised training of the segmentation networks.

Stage 1 fits one network to a handful of annotated low-vessel-density
images (MSE + self-comparison). Its weights initialise both modality
networks, which stage 2 refines without labels by matching the Gram-matrix
style of a single stand-alone vessel mask.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .core import LOW_VD_MODALITIES, BinaryMask, GrayImage, StyleTarget
from .errors import DimensionError, TrainingError
from .losses import StyleLossConfig, combine_stage2, stage1_terms, stage2_terms
from .segmentation import (
    PerceptualBackbone,
    SegmentationNetwork,
    _to_tensor,
    build_network,
    checksum,
    clone_weights,
    make_backbone,
    save_network,
)

log = logging.getLogger(__name__)

MODES = ("full", "stage1_only", "stage2_only")


@dataclass
class TrainConfig:
    epochs_stage1: int = 1000
    epochs_stage2: int = 1000
    learning_rate: float = 1e-4
    # Stage 2 learning rate; None reuses ``learning_rate``.
    learning_rate_stage2: Optional[float] = None
    batch_size: int = 1
    optimizer: str = "adam"
    seed: int = 0
    n_supervised_masks: int = 3
    loss: StyleLossConfig = field(default_factory=StyleLossConfig)
    checkpoint_every: int = 100
    backbone: str = "small"

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = StyleLossConfig(**self.loss)
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.learning_rate <= 0 or (self.learning_rate_stage2 is not None
                                       and self.learning_rate_stage2 <= 0):
            raise ValueError("learning rates must be positive")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.n_supervised_masks < 1:
            raise ValueError("n_supervised_masks must be >= 1")

    @property
    def lr_stage2(self) -> float:
        return self.learning_rate if self.learning_rate_stage2 is None else self.learning_rate_stage2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["taps"] = list(d["loss"]["taps"])
        return d


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    checksums: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    determinism: str = "bitwise"
    backbone_checksum: Optional[str] = None
    warnings: list = field(default_factory=list)

    def curve(self, stage: int, key: str = "loss") -> list[float]:
        return [r[key] for r in self.records if r["stage"] == stage]

    def merge(self, other: "TrainReport") -> "TrainReport":
        self.records.extend(other.records)
        self.checksums.update(other.checksums)
        self.wall_clock.update(other.wall_clock)
        self.warnings.extend(other.warnings)
        self.backbone_checksum = self.backbone_checksum or other.backbone_checksum
        return self

    def write_jsonl(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")
            fh.write(json.dumps({
                "summary": True,
                "checksums": self.checksums,
                "wall_clock": self.wall_clock,
                "determinism": self.determinism,
                "backbone_checksum": self.backbone_checksum,
                "warnings": self.warnings,
            }) + "\n")


@dataclass
class LVDSegDataset:
    annotated: list  # (GrayImage, BinaryMask) from the low-VD modality
    pairs: list  # (low-VD GrayImage, high-VD GrayImage)
    style_target: StyleTarget


def _deterministic():
    torch.use_deterministic_algorithms(True)


def _check_image(img: GrayImage, what: str) -> None:
    try:
        img.require_network_ready()
    except DimensionError as e:
        raise TrainingError(f"{what}: {e}") from None


def _order(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.permutation(n)


def _periodic(out_dir: Optional[Path], cfg: TrainConfig, epoch: int, nets: dict, stage: int):
    if out_dir is None or cfg.checkpoint_every <= 0 or epoch % cfg.checkpoint_every:
        return
    for name, net in nets.items():
        save_network(net, out_dir / "periodic" / f"stage{stage}_{name}_epoch{epoch:05d}.pt",
                     stage=stage, epoch=epoch)


def train_stage1(net: SegmentationNetwork, annotated: Sequence, cfg: TrainConfig,
                 out_dir: Optional[Path] = None):
    """Supervised training on annotated low-VD images. Returns ``(net, report)``."""
    if len(annotated) == 0:
        raise TrainingError("stage 1 needs at least one annotated image")
    if len(annotated) != cfg.n_supervised_masks:
        raise TrainingError(
            f"stage 1 expects {cfg.n_supervised_masks} annotated images, got {len(annotated)}"
        )
    for k, (img, mask) in enumerate(annotated):
        _check_image(img, f"annotated image {k}")
        if img.modality not in LOW_VD_MODALITIES:
            raise TrainingError(f"annotated image {k} has modality {img.modality.value}; "
                                "stage 1 uses low vessel-density images only")
        if mask.shape != img.shape:
            raise TrainingError(f"annotated image {k}: mask dims {mask.shape} != image dims {img.shape}")
    _deterministic()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    xs = [_to_tensor(img) for img, _ in annotated]
    ys = [_to_tensor(mask.values.astype(np.float32)) for _, mask in annotated]
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    report = TrainReport()
    t0 = time.time()
    for epoch in range(1, cfg.epochs_stage1 + 1):
        sums = {"loss": 0.0, "mse": 0.0, "self_comparison": 0.0}
        for i in _order(rng, len(xs)):
            terms = stage1_terms(net, xs[i], ys[i], cfg.loss)
            loss = cfg.loss.w_v * terms["mse"] + cfg.loss.w_sc * terms["self_comparison"]
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["loss"] += loss.item()
            sums["mse"] += terms["mse"].item()
            sums["self_comparison"] += terms["self_comparison"].item()
        rec = {"stage": 1, "epoch": epoch}
        rec.update({k: v / len(xs) for k, v in sums.items()})
        report.records.append(rec)
        _periodic(out_dir, cfg, epoch, {"net": net}, 1)
    net.eval()
    report.wall_clock["stage1"] = time.time() - t0
    report.checksums["stage1"] = checksum(net)
    return net, report


def train_stage2(net_e: SegmentationNetwork, net_o: SegmentationNetwork, pairs: Sequence,
                 target: StyleTarget, backbone: PerceptualBackbone, cfg: TrainConfig,
                 out_dir: Optional[Path] = None):
    """Style-loss refinement of both networks on unannotated ``(low-VD, high-VD)`` pairs."""
    if len(pairs) == 0:
        raise TrainingError("stage 2 needs at least one image pair")
    for k, (ie, io) in enumerate(pairs):
        _check_image(ie, f"pair {k} low-VD image")
        _check_image(io, f"pair {k} high-VD image")
    report = TrainReport()
    if net_e is net_o:
        raise TrainingError("stage 2 needs two separate networks; use clone_weights")
    if checksum(net_e) != checksum(net_o):
        msg = "stage 2 networks were not initialised from a common checkpoint"
        log.warning(msg)
        report.warnings.append(msg)
    report.checksums["stage2_start_e"] = checksum(net_e)
    report.checksums["stage2_start_o"] = checksum(net_o)
    bb_before = checksum(backbone)
    _deterministic()
    torch.manual_seed(cfg.seed + 2)
    rng = np.random.default_rng([cfg.seed, 2])
    data = [(_to_tensor(ie), _to_tensor(io)) for ie, io in pairs]
    net_e.train()
    net_o.train()
    opt = torch.optim.Adam(list(net_e.parameters()) + list(net_o.parameters()), lr=cfg.lr_stage2)
    t0 = time.time()
    keys = ("style_e", "style_o", "sc_e", "sc_o")
    for epoch in range(1, cfg.epochs_stage2 + 1):
        sums = dict.fromkeys(("loss",) + keys, 0.0)
        for i in _order(rng, len(data)):
            xe, xo = data[i]
            terms = stage2_terms(net_e, net_o, xe, xo, target, backbone, cfg.loss)
            loss = combine_stage2(terms, cfg.loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["loss"] += loss.item()
            for k in keys:
                sums[k] += terms[k].item()
        rec = {"stage": 2, "epoch": epoch}
        rec.update({k: v / len(data) for k, v in sums.items()})
        report.records.append(rec)
        _periodic(out_dir, cfg, epoch, {"ema": net_e, "octa": net_o}, 2)
    net_e.eval()
    net_o.eval()
    report.wall_clock["stage2"] = time.time() - t0
    report.checksums["stage2_e"] = checksum(net_e)
    report.checksums["stage2_o"] = checksum(net_o)
    if checksum(backbone) != bb_before:
        raise TrainingError("perceptual backbone changed during stage 2")
    report.backbone_checksum = bb_before
    return net_e, net_o, report


def select_annotated(annotated: Sequence, n: int, seed: int) -> list:
    """Random subset of ``n`` annotated images, fixed by ``seed``."""
    if n > len(annotated):
        raise TrainingError(f"requested {n} annotated masks but only {len(annotated)} are available")
    idx = np.sort(np.random.default_rng([seed, 0]).choice(len(annotated), size=n, replace=False))
    return [annotated[i] for i in idx]


def run_lvdseg(dataset: LVDSegDataset, cfg: TrainConfig, mode: str = "full",
               out_dir: Optional[Path] = None, backbone: Optional[PerceptualBackbone] = None):
    """Stage 1, weight transfer, stage 2. Returns ``(net_e, net_o, report)``.

    ``mode`` selects an ablation: ``stage1_only`` uses the stage-1 network for
    both modalities; ``stage2_only`` skips supervised training.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    out_dir = Path(out_dir) if out_dir is not None else None
    backbone = backbone or make_backbone(cfg.backbone, seed=cfg.seed)
    bb_sum = checksum(backbone)
    report = TrainReport(backbone_checksum=bb_sum)
    base = build_network(backbone, seed=cfg.seed)

    if mode != "stage2_only":
        subset = select_annotated(dataset.annotated, cfg.n_supervised_masks, cfg.seed)
        base, r1 = train_stage1(base, subset, cfg, out_dir)
        report.merge(r1)
    if out_dir is not None:
        save_network(base, out_dir / "stage1.pt", stage=1, mode=mode)

    if mode == "stage1_only":
        net_e, net_o = base, clone_weights(base)
    else:
        net_e, net_o = clone_weights(base), clone_weights(base)
        net_e, net_o, r2 = train_stage2(net_e, net_o, dataset.pairs, dataset.style_target,
                                        backbone, cfg, out_dir)
        report.merge(r2)

    if checksum(backbone) != bb_sum:
        raise TrainingError("perceptual backbone changed during training")
    if out_dir is not None:
        save_network(net_e, out_dir / "ema.pt", stage=2, mode=mode)
        save_network(net_o, out_dir / "octa.pt", stage=2, mode=mode)
        report.write_jsonl(out_dir / "report.jsonl")
    report.checksums["final_e"] = checksum(net_e)
    report.checksums["final_o"] = checksum(net_o)
    return net_e, net_o, report
