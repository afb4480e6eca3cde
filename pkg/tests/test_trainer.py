import json

import numpy as np
import pytest
import torch

from vddreg.core import BinaryMask, GrayImage, Modality, StyleTarget
from vddreg.errors import TrainingError
from vddreg.segmentation import build_network, checksum, clone_weights, load_network, make_backbone
from vddreg.trainer import (
    LVDSegDataset,
    TrainConfig,
    run_lvdseg,
    select_annotated,
    train_stage1,
    train_stage2,
)


def toy_dataset(n=4, size=16, seed=0):
    r = np.random.default_rng(seed)
    annotated, pairs = [], []
    for _ in range(n):
        m = np.zeros((size, size), np.uint8)
        m[:, r.integers(2, size - 2)] = 1
        m[r.integers(2, size - 2), :] = 1
        img = np.clip(0.2 + 0.6 * m + r.normal(0, 0.05, m.shape), 0, 1)
        annotated.append((GrayImage(img, Modality.SYNTH_A), BinaryMask(m)))
        pairs.append((GrayImage(img, Modality.SYNTH_A), GrayImage(img[::-1].copy(), Modality.SYNTH_B)))
    target = StyleTarget(BinaryMask(annotated[0][1].values))
    return LVDSegDataset(annotated, pairs, target)


def cfg(**kw):
    base = dict(epochs_stage1=3, epochs_stage2=2, backbone="tiny", checkpoint_every=0,
                n_supervised_masks=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=2)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    assert TrainConfig(learning_rate=1e-4).lr_stage2 == 1e-4
    assert TrainConfig(learning_rate_stage2=1e-5).lr_stage2 == 1e-5
    assert TrainConfig(loss={"w_sc": 0.5}).loss.w_sc == 0.5


def test_select_annotated_is_seeded():
    items = list(range(10))
    assert select_annotated(items, 3, 0) == select_annotated(items, 3, 0)
    assert len(set(select_annotated(items, 10, 1))) == 10
    with pytest.raises(TrainingError):
        select_annotated(items, 11, 0)


def test_stage1_validation():
    data = toy_dataset()
    net = build_network(make_backbone("tiny"))
    with pytest.raises(TrainingError):
        train_stage1(net, [], cfg())
    with pytest.raises(TrainingError):
        train_stage1(net, data.annotated[:3], cfg())
    wrong = [(GrayImage(np.zeros((16, 16)), Modality.OCTA), data.annotated[0][1])] * 2
    with pytest.raises(TrainingError, match="modality"):
        train_stage1(net, wrong, cfg())
    odd = [(GrayImage(np.zeros((12, 16)), Modality.SYNTH_A), BinaryMask(np.zeros((12, 16), np.uint8)))] * 2
    with pytest.raises(TrainingError):
        train_stage1(net, odd, cfg())


def test_stage1_reduces_loss():
    data = toy_dataset()
    net = build_network(make_backbone("small"))
    _, rep = train_stage1(net, data.annotated[:2], cfg(epochs_stage1=30, learning_rate=1e-3))
    curve = rep.curve(1)
    assert len(curve) == 30 and curve[-1] < curve[0]


def test_stage2_guards():
    data = toy_dataset()
    bb = make_backbone("tiny")
    net = build_network(bb)
    with pytest.raises(TrainingError):
        train_stage2(net, net, data.pairs, data.style_target, bb, cfg())
    other = build_network(bb, seed=9)
    _, _, rep = train_stage2(net, other, data.pairs, data.style_target, bb, cfg(epochs_stage2=1))
    assert rep.warnings
    with pytest.raises(TrainingError):
        train_stage2(net, clone_weights(net), [], data.style_target, bb, cfg())


def test_stage2_leaves_backbone_untouched():
    data = toy_dataset()
    bb = make_backbone("tiny")
    before = checksum(bb)
    base = build_network(bb)
    ne, no, rep = train_stage2(clone_weights(base), clone_weights(base), data.pairs,
                               data.style_target, bb, cfg())
    assert checksum(bb) == before == rep.backbone_checksum
    assert not rep.warnings
    assert rep.checksums["stage2_e"] != rep.checksums["stage2_o"]


def test_run_modes(tmp_path):
    data = toy_dataset()
    ne, no, rep = run_lvdseg(data, cfg(), "stage1_only", out_dir=tmp_path / "s1")
    assert ne is not no and checksum(ne) == checksum(no) == rep.checksums["stage1"]
    assert not rep.curve(2)
    ne, no, rep = run_lvdseg(data, cfg(), "stage2_only")
    assert not rep.curve(1) and len(rep.curve(2)) == 2
    with pytest.raises(ValueError):
        run_lvdseg(data, cfg(), "bogus")


def test_full_run_writes_artifacts(tmp_path):
    data = toy_dataset()
    ne, no, rep = run_lvdseg(data, cfg(checkpoint_every=1), "full", out_dir=tmp_path)
    for name in ("stage1.pt", "ema.pt", "octa.pt", "report.jsonl"):
        assert (tmp_path / name).exists()
    assert checksum(load_network(tmp_path / "ema.pt")) == checksum(ne)
    assert len(list((tmp_path / "periodic").glob("*.pt"))) == 3 + 2 * 2
    lines = [json.loads(s) for s in (tmp_path / "report.jsonl").read_text().splitlines()]
    assert lines[-1]["summary"] and lines[-1]["determinism"] == "bitwise"
    assert rep.checksums["stage2_start_e"] == rep.checksums["stage1"]


def test_training_is_bitwise_reproducible():
    data = toy_dataset()
    a = run_lvdseg(data, cfg(), "full")[2]
    b = run_lvdseg(data, cfg(), "full")[2]
    assert a.checksums == b.checksums
    assert a.records == b.records
