import numpy as np
import pytest
import torch

from vddreg.core import GrayImage
from vddreg.errors import DimensionError, WeightsError
from vddreg.segmentation import (
    DEFAULT_TAPS,
    PerceptualBackbone,
    build_network,
    checksum,
    clone_weights,
    load_network,
    make_backbone,
    predict,
    save_network,
)


def test_backbone_taps_and_frozen():
    bb = make_backbone("small", seed=0)
    assert set(DEFAULT_TAPS) <= set(bb.taps)
    assert not any(p.requires_grad for p in bb.parameters())
    bb.train()
    assert not bb.training
    feats = bb(torch.rand(1, 1, 32, 32), DEFAULT_TAPS)
    assert [f.shape[-1] for f in feats.values()] == [32, 16, 8, 4]
    with pytest.raises(ValueError):
        bb(torch.rand(1, 1, 8, 8), ["relu9_9"])


def test_backbone_seeded():
    assert checksum(make_backbone("small", 3)) == checksum(make_backbone("small", 3))
    assert checksum(make_backbone("small", 3)) != checksum(make_backbone("small", 4))


def test_small_backbone_size():
    n = sum(p.numel() for p in make_backbone("small").parameters())
    assert 50_000 < n < 200_000


def test_network_output_shape_and_range():
    net = build_network(make_backbone("small"))
    with torch.no_grad():
        y = net(torch.rand(2, 1, 24, 32))
    assert y.shape == (2, 1, 24, 32)
    assert float(y.min()) >= 0 and float(y.max()) <= 1
    with pytest.raises(DimensionError):
        net(torch.rand(1, 1, 20, 32))


def test_network_does_not_share_backbone_params():
    bb = make_backbone("small")
    before = checksum(bb)
    net = build_network(bb)
    with torch.no_grad():
        next(net.encoder.parameters()).add_(1.0)
    assert checksum(bb) == before


def test_predict_requires_multiple_of_8():
    net = build_network(make_backbone("tiny"))
    p = predict(net, GrayImage(np.random.default_rng(0).random((16, 16))))
    assert p.shape == (16, 16)
    with pytest.raises(DimensionError):
        predict(net, GrayImage(np.zeros((12, 16))))


def test_clone_is_independent():
    net = build_network(make_backbone("tiny"))
    c = clone_weights(net)
    assert checksum(c) == checksum(net)
    with torch.no_grad():
        next(c.parameters()).add_(1.0)
    assert checksum(c) != checksum(net)


def test_save_load_round_trip(tmp_path):
    net = build_network(make_backbone("small", 2), seed=2)
    save_network(net, tmp_path / "n.pt", stage=1)
    back = load_network(tmp_path / "n.pt")
    assert checksum(back) == checksum(net)
    x = torch.rand(1, 1, 16, 16)
    assert torch.equal(back(x), net(x))
    with pytest.raises(WeightsError):
        load_network(tmp_path / "missing.pt")


def test_backbone_save_load(tmp_path):
    bb = make_backbone("small", 5)
    bb.save(tmp_path / "bb.pt")
    assert checksum(make_backbone(tmp_path / "bb.pt")) == checksum(bb)
    with pytest.raises(WeightsError):
        make_backbone(tmp_path / "none.pt")


def test_vgg16_state_dict_without_manifest(tmp_path):
    bb = PerceptualBackbone("vgg16", seed=0)
    torch.save({k: v for k, v in bb.state_dict().items() if k.startswith("features.")}, tmp_path / "vgg.pt")
    loaded = PerceptualBackbone.load(tmp_path / "vgg.pt")
    assert loaded.arch == "vgg16"
    assert torch.equal(loaded.features[0].weight, bb.features[0].weight)
