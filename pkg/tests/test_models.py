"""Network construction, forward shapes, fusion wiring, and state handling."""

import numpy as np
import pytest

from adpf.checkpoint import deserialize, serialize
from adpf.config import TrainConfig, desk_config, full_scale_config
from adpf.errors import (ChannelSplitError, ConfigError, FormatError,
                         PatchCountMismatch, ShapeMismatch)
from adpf.models import (FEATURE_FLOOR, AttentionNet, FusionNet, load_state,
                         set_requires_grad)
from adpf.patches import PatchSet
from adpf.tensor import GradTape, Tensor, backward, tsum


def make_anet(q=5, rng_seed=0, **overrides):
    cfg = TrainConfig(**overrides)
    return AttentionNet(cfg, q, np.random.default_rng(rng_seed)), cfg


def make_fnet(q=5, rng_seed=0, **overrides):
    cfg = TrainConfig(**overrides)
    return FusionNet(cfg, q, np.random.default_rng(rng_seed)), cfg


def image_for(cfg, seed=1):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((cfg.input_channels, cfg.input_size, cfg.input_size)))


# ------------------------------------------------------------ attention network

@pytest.mark.parametrize("heads", [1, 3, 5, 6])
@pytest.mark.parametrize("input_size", [32, 64, 128])
def test_attention_net_shape_grid(heads, input_size):
    anet, cfg = make_anet(q=5, heads=heads, input_size=input_size)
    logits, att = anet.forward(image_for(cfg))
    assert logits.data.shape == (5,)
    assert len(att.maps) == heads
    expected_map = input_size // 4
    for m in att.maps:
        assert m.data.shape == (1, expected_map, expected_map)


def test_desk_config_gives_five_8x8_maps():
    cfg = desk_config()
    anet = AttentionNet(cfg, 62, np.random.default_rng(0))
    assert anet.map_size == 8
    _, att = anet.forward(image_for(cfg))
    assert len(att.maps) == 5
    assert all(m.data.shape == (1, 8, 8) for m in att.maps)


def test_full_scale_construction():
    cfg = full_scale_config()
    assert cfg.resolved_backbone_channels() == 500
    anet = AttentionNet(cfg, 62, np.random.default_rng(0))
    assert anet.map_size == 32                       # 128 // 4
    assert len(anet.heads) == 5
    # 500 channels over 5 heads -> 100 per head, split 50/50 into QK and V
    assert anet.conv2.weights.data.shape == (500, 250, 3, 3)
    assert anet.heads[0].sa.proj_q.weights.data.shape == (50, 100, 1, 1)
    assert anet.heads[0].sa.proj_v.weights.data.shape == (50, 100, 1, 1)


def test_attention_net_rejects_bad_groupings():
    with pytest.raises(ConfigError):               # no heads at all
        make_anet(heads=0)
    with pytest.raises(ChannelSplitError):         # 40 channels not divisible by 3
        make_anet(heads=3, backbone_channels=40)
    with pytest.raises(ConfigError):               # 45 / 5 = 9 channels: odd split
        make_anet(heads=5, backbone_channels=45)
    with pytest.raises(ConfigError):               # value width 4 not divisible by 3
        make_anet(bottleneck_ratio=3)


def test_attention_net_rejects_wrong_image_shape():
    anet, cfg = make_anet()
    with pytest.raises(ShapeMismatch):
        anet.forward(Tensor(np.zeros((1, 16, 16))))
    with pytest.raises(ShapeMismatch):
        anet.forward(Tensor(np.zeros((3, cfg.input_size, cfg.input_size))))


def test_feature_floor_keeps_maps_strictly_positive():
    # Zero the backbone: ReLU output is identically zero, so heads see only the
    # constant floor. Every map must still have a strictly positive peak, which
    # is what keeps threshold cropping well defined on arbitrary inputs.
    anet, cfg = make_anet()
    for name in ("conv1", "conv2"):
        conv = getattr(anet, name)
        conv.weights.data[:] = 0.0
        conv.bias.data[:] = 0.0
    _, att = anet.forward(image_for(cfg))
    for raw in att.raw_maps:
        assert raw.data.min() > 0.0
        assert np.allclose(raw.data, raw.data.flat[0])  # constant input, constant map


def test_attention_net_named_parameters_layout():
    anet, _ = make_anet(heads=2)
    names = list(anet.named_parameters())
    assert names[0] == "backbone.conv1.weight"
    assert "heads.0.sa.q.weight" in names
    assert "heads.1.scale" in names
    assert names[-1] == "head_fc.bias"
    assert len(names) == 4 + 2 * 11 + 2


def test_nonneg_parameters_subset_of_named():
    anet, _ = make_anet(heads=3)
    named = set(anet.named_parameters())
    nonneg = anet.nonneg_parameters()
    assert nonneg == [f"heads.{i}.sa.v.weight" for i in range(3)]
    assert set(nonneg) <= named


def test_forward_deterministic_given_seed():
    anet1, cfg = make_anet(rng_seed=42)
    anet2, _ = make_anet(rng_seed=42)
    img = image_for(cfg)
    out1, _ = anet1.forward(img)
    out2, _ = anet2.forward(img)
    assert np.array_equal(out1.data, out2.data)


# --------------------------------------------------------------- fusion network

def test_fusion_net_zero_patches_is_plain_cnn():
    fnet, cfg = make_fnet(heads=0)
    assert len(fnet.main) == 1 and fnet.stems == []
    logits = fnet.forward(image_for(cfg), PatchSet([], [], cfg.input_size))
    assert logits.data.shape == (5,)


def test_fusion_widths_grow_by_stem_width():
    fnet, _ = make_fnet(heads=2, fusion_main_width=8, fusion_stem_width=4)
    assert fnet.main[0].weights.data.shape[0] == 8
    assert fnet.main[1].weights.data.shape == (12, 12, 3, 3)
    assert fnet.main[2].weights.data.shape == (16, 16, 3, 3)
    assert fnet.final_channels == 16


def test_fusion_path_length_strictly_decreasing_in_rank():
    fnet, _ = make_fnet(heads=5)
    remaining = [len(fnet.main) - rank for rank in range(1, 6)]
    assert remaining == [5, 4, 3, 2, 1]
    assert all(a > b for a, b in zip(remaining, remaining[1:]))
    assert len(fnet.stems) == 5
    assert all(len(blocks) == fnet.cfg.fusion_stem_blocks for blocks in fnet.stems)


def patch_set_for(cfg, seed=2):
    rng = np.random.default_rng(seed)
    p = cfg.crop.patch_size
    patches = [Tensor(rng.random((cfg.input_channels, p, p))) for _ in range(cfg.heads)]
    boxes = [(0, 0, p, p)] * cfg.heads
    return PatchSet(patches, boxes, cfg.input_size)


def test_fusion_forward_shapes_and_spatial():
    fnet, cfg = make_fnet(heads=2)
    assert fnet.final_spatial == 4          # 32 halved by main0, main1, main2
    logits = fnet.forward(image_for(cfg), patch_set_for(cfg))
    assert logits.data.shape == (5,)


def test_fusion_patch_count_mismatch():
    fnet, cfg = make_fnet(heads=2)
    short = patch_set_for(cfg)
    short.patches.pop()
    short.boxes.pop()
    with pytest.raises(PatchCountMismatch):
        fnet.forward(image_for(cfg), short)


def test_fusion_rejects_wrong_image_shape():
    fnet, cfg = make_fnet(heads=1)
    with pytest.raises(ShapeMismatch):
        fnet.forward(Tensor(np.zeros((1, 16, 16))), patch_set_for(cfg))


def test_every_patch_stem_influences_the_output():
    fnet, cfg = make_fnet(heads=2)
    with GradTape():
        logits = fnet.forward(image_for(cfg), patch_set_for(cfg))
        backward(tsum(logits))
    for rank, blocks in enumerate(fnet.stems):
        grad = blocks[0].weights.grad
        assert grad is not None and np.any(grad != 0), f"stem {rank} is disconnected"


# -------------------------------------------------------------- state handling

def test_load_state_round_trip():
    anet, cfg = make_anet(rng_seed=1)
    blob = serialize(anet.named_parameters())
    fresh, _ = make_anet(rng_seed=99)
    img = image_for(cfg)
    before, _ = fresh.forward(img)
    load_state(fresh, deserialize(blob))
    after, _ = fresh.forward(img)
    reference, _ = anet.forward(img)
    assert not np.array_equal(before.data, after.data)
    assert np.array_equal(after.data, reference.data)


def test_load_state_rejects_missing_and_extra():
    anet, _ = make_anet()
    arrays = dict(deserialize(serialize(anet.named_parameters())))
    del arrays["head_fc.bias"]
    with pytest.raises(FormatError, match="missing"):
        load_state(anet, arrays)
    arrays["head_fc.bias"] = np.zeros(5)
    arrays["bogus"] = np.zeros(1)
    with pytest.raises(FormatError, match="extra"):
        load_state(anet, arrays)


def test_load_state_rejects_shape_mismatch():
    anet, _ = make_anet()
    arrays = dict(deserialize(serialize(anet.named_parameters())))
    arrays["head_fc.bias"] = np.zeros(7)
    with pytest.raises(ShapeMismatch, match="head_fc.bias"):
        load_state(anet, arrays)


def test_set_requires_grad_freezes_and_thaws():
    anet, _ = make_anet()
    set_requires_grad(anet, False)
    params = anet.named_parameters()
    assert all(not t.requires_grad and t.grad is None for t in params.values())
    set_requires_grad(anet, True)
    params = anet.named_parameters()
    assert all(t.requires_grad for t in params.values())
    assert all(t.grad is not None and not t.grad.any() for t in params.values())
