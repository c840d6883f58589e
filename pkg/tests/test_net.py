import numpy as np
import pytest
import torch

from trifuse.net import (
    AttentionRefinement,
    BranchAggregator,
    FeatureFusion,
    NetworkConfig,
    ResNetFeatures,
    SpatialPath,
    TriFuseNet,
    adapt_stem_to_single_channel,
    attach_finite_check_hooks,
    count_trainable_parameters,
    global_avg_tail,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)

torch.manual_seed(0)


def conv_chain_oracle(size, first_padding):
    """Output-size arithmetic: k7 s2 p{1,2}, then two k3 s2 p1 layers."""
    n = (size + 2 * first_padding - 7) // 2 + 1
    for _ in range(2):
        n = (n + 2 * 1 - 3) // 2 + 1
    return n


# -------------------------------------------------------------- spatial path

@pytest.mark.parametrize(
    "width,height,padding,expected",
    [
        (2048, 1024, 2, (256, 128)),
        (1242, 375, 1, (155, 47)),
        (400, 800, 2, (50, 100)),
    ],
)
def test_spatial_path_shapes(width, height, padding, expected):
    path = SpatialPath(4, first_padding=padding).eval()
    with torch.no_grad():
        out = path(torch.zeros(1, 4, height, width))
    assert out.shape[2] == conv_chain_oracle(height, padding) == expected[1]
    assert out.shape[3] == conv_chain_oracle(width, padding) == expected[0]
    assert out.shape[1] == 256


def test_spatial_path_near_one_eighth():
    for w, h, pad in ((512, 256, 2), (320, 192, 1), (96, 64, 2)):
        path = SpatialPath(4, first_padding=pad).eval()
        with torch.no_grad():
            out = path(torch.zeros(1, 4, h, w))
        assert abs(out.shape[2] - h / 8) <= 1
        assert abs(out.shape[3] - w / 8) <= 1


def test_spatial_path_channel_mismatch():
    with pytest.raises(ValueError):
        SpatialPath(4)(torch.zeros(1, 3, 64, 64))


# ------------------------------------------------------------------ backbone

def test_context_stage_depths_small():
    net = ResNetFeatures(18).eval()
    with torch.no_grad():
        f16, f32, tail = net(torch.zeros(1, 3, 256, 256))
    assert tuple(f32.shape) == (1, 512, 8, 8)
    assert tuple(f16.shape) == (1, 256, 16, 16)
    assert tuple(tail.shape) == (1, 512)


def test_context_stage_depths_bottleneck():
    net = ResNetFeatures(50).eval()
    with torch.no_grad():
        _, f32, _ = net(torch.zeros(1, 3, 256, 256))
    assert tuple(f32.shape) == (1, 2048, 8, 8)


def test_threed_path_same_depths_as_context():
    net = ResNetFeatures(34, in_channels=1).eval()
    with torch.no_grad():
        f16, f32, tail = net(torch.zeros(1, 1, 256, 256))
    assert tuple(f32.shape) == (1, 512, 8, 8)
    ctx = ResNetFeatures(34).eval()
    with torch.no_grad():
        g16, g32, gtail = ctx(torch.zeros(1, 3, 256, 256))
    assert f16.shape == g16.shape and f32.shape == g32.shape and tail.shape == gtail.shape


def test_threed_all_zero_input_finite():
    net = ResNetFeatures(18, in_channels=1).eval()
    with torch.no_grad():
        f16, f32, tail = net(torch.zeros(2, 1, 64, 64))
    assert torch.isfinite(f16).all() and torch.isfinite(f32).all() and torch.isfinite(tail).all()


def test_unsupported_depth_rejected():
    with pytest.raises(ValueError):
        ResNetFeatures(42)
    with pytest.raises(ValueError):
        NetworkConfig(backbone_depth=42)


def test_tail_of_constant_map():
    f32 = torch.full((2, 16, 5, 7), 3.25)
    tail = global_avg_tail(f32)
    assert torch.equal(tail, torch.full((2, 16), 3.25))


def test_single_channel_stem_gray_identity():
    ctx = ResNetFeatures(18).double().eval()
    td = ResNetFeatures(18, in_channels=1).double().eval()
    td.conv1 = adapt_stem_to_single_channel(ctx.conv1)
    td.bn1.load_state_dict(ctx.bn1.state_dict())
    td.layer1.load_state_dict(ctx.layer1.state_dict())
    gray = torch.randn(1, 1, 64, 64, dtype=torch.float64)
    with torch.no_grad():
        stem_1ch = td.maxpool(td.relu(td.bn1(td.conv1(gray))))
        stage1_1ch = td.layer1(stem_1ch)
        stem_3ch = ctx.maxpool(ctx.relu(ctx.bn1(ctx.conv1(gray.repeat(1, 3, 1, 1)))))
        stage1_3ch = ctx.layer1(stem_3ch)
    assert torch.allclose(stage1_1ch, stage1_3ch, atol=1e-12)


# ----------------------------------------------------------------------- ARM

def _force_gate(arm, value):
    # eval-mode bn with neutral stats, bias drives the pre-sigmoid level
    arm.eval()
    with torch.no_grad():
        arm.conv.weight.zero_()
        arm.bn.running_mean.zero_()
        arm.bn.running_var.fill_(1.0)
        arm.bn.weight.fill_(1.0)
        arm.bn.bias.fill_(value)


def test_arm_saturated_gate_is_identity():
    arm = AttentionRefinement(8)
    _force_gate(arm, 200.0)  # sigmoid(200) == 1.0 in float32
    x = torch.randn(2, 8, 5, 5)
    assert torch.equal(arm(x), x)


def test_arm_zero_gate_is_zero():
    arm = AttentionRefinement(8)
    _force_gate(arm, -200.0)  # sigmoid(-200) underflows to 0.0
    x = torch.randn(2, 8, 5, 5)
    assert not arm(x).any()


def test_arm_matches_per_channel_multiply():
    arm = AttentionRefinement(6).eval()
    x = torch.randn(3, 6, 4, 4)
    with torch.no_grad():
        gate = torch.sigmoid(arm.bn(arm.conv(arm.pool(x))))
        out = arm(x)
    assert torch.allclose(out, x * gate)
    assert out.shape == x.shape


# ----------------------------------------------------------------------- FFM

def test_ffm_zero_inputs_finite():
    ffm = FeatureFusion(512, 256).eval()
    z = torch.zeros(1, 256, 8, 8)
    out = ffm(z, torch.zeros(1, 128, 8, 8), torch.zeros(1, 128, 8, 8))
    assert torch.isfinite(out).all()
    assert out.shape == (1, 256, 8, 8)


def test_ffm_shape_contract(rng):
    ffm = FeatureFusion(512, 256).eval()
    for h, w in ((8, 8), (5, 9), (16, 4)):
        out = ffm(
            torch.randn(1, 256, h, w), torch.randn(1, 128, h, w), torch.randn(1, 128, h, w)
        )
        assert out.shape[2:] == (h, w)


def test_ffm_rejects_spatial_mismatch():
    ffm = FeatureFusion(512, 256)
    with pytest.raises(ValueError):
        ffm(torch.zeros(1, 256, 8, 8), torch.zeros(1, 128, 4, 4), torch.zeros(1, 128, 8, 8))


def test_ffm_concat_permutation_identity():
    # swapping two stream blocks while permuting the projection weight's
    # input channels identically must not change the output
    torch.manual_seed(3)
    ffm = FeatureFusion(48, 32).double().eval()
    a, b, c = (torch.randn(1, 16, 6, 6, dtype=torch.float64) for _ in range(3))
    with torch.no_grad():
        base = ffm(a, b, c)
        w = ffm.project[0].weight.clone()
        perm = torch.cat([torch.arange(16, 32), torch.arange(0, 16), torch.arange(32, 48)])
        ffm.project[0].weight.copy_(w[:, perm])
        swapped = ffm(b, a, c)
        ffm.project[0].weight.copy_(w)
    assert torch.allclose(base, swapped, atol=1e-12)


# --------------------------------------------------------------- full model

def test_forward_shape_contract():
    model = TriFuseNet(NetworkConfig(backbone_depth=18, num_classes=19)).eval()
    with torch.no_grad():
        out = model(torch.randn(1, 3, 128, 256), torch.randn(1, 1, 128, 256))
    assert tuple(out.shape) == (1, 19, 128, 256)


def test_forward_bev_shape():
    model = TriFuseNet(NetworkConfig(backbone_depth=18, num_classes=2)).eval()
    with torch.no_grad():
        out = model(torch.randn(1, 3, 800, 400), torch.randn(1, 1, 800, 400))
    assert tuple(out.shape) == (1, 2, 800, 400)


def test_forward_deterministic():
    model = TriFuseNet(NetworkConfig(backbone_depth=18, num_classes=2)).eval()
    rgb, td = torch.randn(1, 3, 64, 96), torch.randn(1, 1, 64, 96)
    with torch.no_grad():
        a = model(rgb, td)
        b = model(rgb, td)
    assert torch.equal(a, b)


def test_forward_rejects_bad_inputs():
    model = TriFuseNet(NetworkConfig(backbone_depth=18, num_classes=2))
    with pytest.raises(ValueError):
        model(torch.zeros(1, 4, 64, 64), torch.zeros(1, 1, 64, 64))
    with pytest.raises(ValueError):
        model(torch.zeros(1, 3, 64, 64), torch.zeros(1, 1, 32, 64))
    with pytest.raises(ValueError):
        model(torch.zeros(1, 3, 16, 16), torch.zeros(1, 1, 16, 16))


def test_output_dims_equal_input_dims_across_resolutions():
    model = TriFuseNet(NetworkConfig(backbone_depth=18, num_classes=2)).eval()
    pad1 = TriFuseNet(NetworkConfig(backbone_depth=18, num_classes=2, first_layer_padding=1)).eval()
    cases = [(model, 1024, 2048), (pad1, 375, 1242), (model, 800, 400), (model, 128, 256)]
    for net, h, w in cases:
        with torch.no_grad():
            out = net(torch.randn(1, 3, h, w), torch.randn(1, 1, h, w))
        assert out.shape[2:] == (h, w)


def test_branch_triples_shape_identical():
    cfg = NetworkConfig(backbone_depth=18, num_classes=2)
    model = TriFuseNet(cfg).eval()
    with torch.no_grad():
        c16, c32, ct = model.context(torch.randn(1, 3, 64, 96))
        d16, d32, dt = model.threed(torch.randn(1, 1, 64, 96))
    assert c16.shape == d16.shape and c32.shape == d32.shape and ct.shape == dt.shape


def test_auxiliary_heads_training_outputs():
    cfg = NetworkConfig(backbone_depth=18, num_classes=3, auxiliary_heads=True)
    model = TriFuseNet(cfg).train()
    # batch of 2: training-mode batch statistics need >1 sample
    out = model(torch.randn(2, 3, 64, 96), torch.randn(2, 1, 64, 96))
    assert isinstance(out, tuple) and len(out) == 3
    for t in out:
        assert tuple(t.shape) == (2, 3, 64, 96)
    model.eval()
    with torch.no_grad():
        single = model(torch.randn(1, 3, 64, 96), torch.randn(1, 1, 64, 96))
    assert isinstance(single, torch.Tensor)


def test_finite_check_hooks():
    model = TriFuseNet(NetworkConfig(backbone_depth=18, num_classes=2)).eval()
    handles = attach_finite_check_hooks(model)
    with torch.no_grad():
        model(torch.randn(1, 3, 64, 96), torch.randn(1, 1, 64, 96))
    for h in handles:
        h.remove()


def test_gradient_flow_r18():
    model = TriFuseNet(NetworkConfig(backbone_depth=18, num_classes=5)).train()
    out = model(torch.randn(2, 3, 64, 96), torch.randn(2, 1, 64, 96))
    loss = torch.nn.functional.cross_entropy(out, torch.randint(0, 5, (2, 64, 96)))
    loss.backward()
    params = [p for p in model.parameters() if p.requires_grad]
    finite = sum(1 for p in params if p.grad is not None and torch.isfinite(p.grad).all())
    assert finite / len(params) >= 0.99


# ------------------------------------------------------------ param counting

def param_walk_oracle(model):
    """Layer-walk summation over direct parameters of every module."""
    total = 0
    for m in model.modules():
        for p in m._parameters.values():
            if p is not None and p.requires_grad:
                n = 1
                for d in p.shape:
                    n *= int(d)
                total += n
    return total


def test_count_single_conv():
    conv = torch.nn.Conv2d(4, 8, 3, bias=True)
    assert count_trainable_parameters(conv) == 3 * 3 * 4 * 8 + 8 == 296


def test_count_frozen_model_zero():
    model = SpatialPath(4)
    for p in model.parameters():
        p.requires_grad_(False)
    assert count_trainable_parameters(model) == 0


def test_count_matches_walk_oracle_r18():
    model = TriFuseNet(NetworkConfig(backbone_depth=18, num_classes=2))
    assert count_trainable_parameters(model) == param_walk_oracle(model)


# ----------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip(tmp_path):
    cfg = NetworkConfig(backbone_depth=18, num_classes=2)
    model = TriFuseNet(cfg).eval()
    opt = torch.optim.ASGD(model.parameters(), lr=0.01)
    path = tmp_path / "ckpt.pt"
    save_checkpoint(path, model, opt, epoch=7, seeds={"seed": 3})
    payload = load_checkpoint(path)
    assert payload["epoch"] == 7
    assert payload["seeds"]["seed"] == 3
    assert payload["config"]["backbone_depth"] == 18
    clone = model_from_checkpoint(payload).eval()
    rgb, td = torch.randn(1, 3, 64, 96), torch.randn(1, 1, 64, 96)
    with torch.no_grad():
        assert torch.equal(model(rgb, td), clone(rgb, td))
