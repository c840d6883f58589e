"""Three-branch fusion network for RGB + 3D semantic segmentation.

A shallow spatial path keeps 1/8-resolution detail from the 4-channel
(RGB plus one 3D channel) input; two residual backbones extract context
from the RGB image and from the single-channel 3D image; channel
attention refines their stage-3/4 features, which a three-way fusion
block merges at 1/8 resolution before a 1x1 classifier and a bilinear
upsample back to input size.
"""

import copy
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet18, resnet34, resnet50, resnet101, resnet152

_RESNET_CTORS = {18: resnet18, 34: resnet34, 50: resnet50, 101: resnet101, 152: resnet152}
# (stage-3, stage-4) channel widths per backbone depth
_STAGE_CHANNELS = {18: (256, 512), 34: (256, 512), 50: (1024, 2048), 101: (1024, 2048), 152: (1024, 2048)}

THREED_SOURCES = ("elvdiff", "disparity")


@dataclass
class NetworkConfig:
    backbone_depth: int = 18
    num_classes: int = 19
    first_layer_padding: int = 2  # 2 for 2048x1024 and 400x800 inputs, 1 for 1242x375
    threed_source: str = "elvdiff"
    pretrained_context: bool = False
    pretrained_threed: bool = False
    auxiliary_heads: bool = False
    spatial_channels: tuple = (64, 128, 256)
    branch_channels: int = 128
    fusion_channels: int = 256
    norm_momentum: float = 0.1
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.backbone_depth not in _RESNET_CTORS:
            raise ValueError(
                f"backbone_depth must be one of {sorted(_RESNET_CTORS)}, got {self.backbone_depth}"
            )
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if self.first_layer_padding not in (1, 2):
            raise ValueError(f"first_layer_padding must be 1 or 2, got {self.first_layer_padding}")
        if self.threed_source not in THREED_SOURCES:
            raise ValueError(f"threed_source must be one of {THREED_SOURCES}, got {self.threed_source}")


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class SpatialPath(nn.Module):
    """Three stride-2 conv+BN+ReLU layers keeping ~1/8 resolution.

    The first layer has kernel 7 and configurable padding (2 or 1
    depending on the input family); the next two use kernel 3, padding 1.
    """

    def __init__(self, in_channels=4, channels=(64, 128, 256), first_padding=2):
        super().__init__()
        c1, c2, c3 = channels
        self.layers = nn.Sequential(
            ConvBNReLU(in_channels, c1, 7, stride=2, padding=first_padding),
            ConvBNReLU(c1, c2, 3, stride=2, padding=1),
            ConvBNReLU(c2, c3, 3, stride=2, padding=1),
        )
        self.in_channels = in_channels
        self.out_channels = c3

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return self.layers(x)


def global_avg_tail(f):
    """Global average pool of the deepest feature map, as a (B, C) vector."""
    return f.mean(dim=(2, 3))


class ResNetFeatures(nn.Module):
    """Residual backbone exposing stage-3/4 features and the pooled tail.

    in_channels=1 swaps the stem conv for a single-channel one; when
    pretrained, that stem is derived from the pretrained 3-channel stem
    (see adapt_stem_to_single_channel) instead of random init.
    """

    def __init__(self, depth, in_channels=3, pretrained=False):
        super().__init__()
        if depth not in _RESNET_CTORS:
            raise ValueError(f"unsupported backbone depth {depth}")
        weights = "DEFAULT" if pretrained else None
        net = _RESNET_CTORS[depth](weights=weights)
        if in_channels != 3:
            if pretrained:
                net.conv1 = adapt_stem_to_single_channel(net.conv1)
            else:
                net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.conv1, self.bn1, self.relu, self.maxpool = net.conv1, net.bn1, net.relu, net.maxpool
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.layer3, self.layer4 = net.layer3, net.layer4
        self.depth = depth
        self.in_channels = in_channels
        self.f16_channels, self.f32_channels = _STAGE_CHANNELS[depth]

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer2(self.layer1(x))
        f16 = self.layer3(x)
        f32 = self.layer4(f16)
        return f16, f32, global_avg_tail(f32)


def adapt_stem_to_single_channel(conv):
    """Build a 1-channel stem from a 3-channel one.

    Kernels are summed over the input-channel axis (the channel average
    scaled back by the channel count), so feeding a gray image to the new
    stem reproduces the old stem's output on that image replicated to RGB.
    """
    new = nn.Conv2d(1, conv.out_channels, conv.kernel_size, stride=conv.stride,
                    padding=conv.padding, bias=conv.bias is not None,
                    dtype=conv.weight.dtype, device=conv.weight.device)
    with torch.no_grad():
        new.weight.copy_(conv.weight.sum(dim=1, keepdim=True))
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    return new


class AttentionRefinement(nn.Module):
    """Channel attention gate: GAP -> 1x1 conv -> BN -> sigmoid -> scale.

    Output shape equals input shape; no up-sampling involved.
    """

    def __init__(self, channels):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.conv = nn.Conv2d(channels, channels, 1, bias=False)
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, x):
        gate = torch.sigmoid(self.bn(self.conv(self.pool(x))))
        return x * gate


class BranchAggregator(nn.Module):
    """Collapse one backbone's (f16, f32, tail) triple to a 1/8 stream.

    The deepest features are attention-refined and gated by the broadcast
    tail vector, the stage-3 features are attention-refined, and both are
    projected and upsampled to the requested 1/8 size before summing.
    """

    def __init__(self, c16, c32, out_channels=128):
        super().__init__()
        self.arm16 = AttentionRefinement(c16)
        self.arm32 = AttentionRefinement(c32)
        self.head16 = ConvBNReLU(c16, out_channels, 3, padding=1)
        self.head32 = ConvBNReLU(c32, out_channels, 3, padding=1)
        self.out_channels = out_channels

    def forward(self, f16, f32, tail, size):
        g32 = self.arm32(f32) * tail[:, :, None, None]
        s32 = F.interpolate(self.head32(g32), size=size, mode="bilinear", align_corners=False)
        s16 = F.interpolate(self.head16(self.arm16(f16)), size=size, mode="bilinear", align_corners=False)
        return s32 + s16


class FeatureFusion(nn.Module):
    """Concatenate the three 1/8 streams, project, reweight, residual-add."""

    def __init__(self, in_channels, out_channels=256, reduction=4):
        super().__init__()
        self.project = ConvBNReLU(in_channels, out_channels, 1)
        self.excite = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(out_channels, out_channels // reduction, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels // reduction, out_channels, 1),
            nn.Sigmoid(),
        )
        self.out_channels = out_channels

    def forward(self, spatial, context, threed):
        if not (spatial.shape[2:] == context.shape[2:] == threed.shape[2:]):
            raise ValueError(
                f"fusion inputs disagree spatially: {tuple(spatial.shape[2:])}, "
                f"{tuple(context.shape[2:])}, {tuple(threed.shape[2:])}"
            )
        x = self.project(torch.cat([spatial, context, threed], dim=1))
        return x + x * self.excite(x)


class TriFuseNet(nn.Module):
    """The full three-branch segmentation network."""

    MIN_INPUT = 32  # stride-32 backbone floor

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.spatial = SpatialPath(4, cfg.spatial_channels, cfg.first_layer_padding)
        self.context = ResNetFeatures(cfg.backbone_depth, 3, cfg.pretrained_context)
        self.threed = ResNetFeatures(cfg.backbone_depth, 1, cfg.pretrained_threed)
        c16, c32 = self.context.f16_channels, self.context.f32_channels
        self.context_agg = BranchAggregator(c16, c32, cfg.branch_channels)
        self.threed_agg = BranchAggregator(c16, c32, cfg.branch_channels)
        self.fuse = FeatureFusion(
            self.spatial.out_channels + 2 * cfg.branch_channels, cfg.fusion_channels
        )
        self.classifier = nn.Conv2d(cfg.fusion_channels, cfg.num_classes, 1)
        if cfg.auxiliary_heads:
            self.aux_context = nn.Conv2d(cfg.branch_channels, cfg.num_classes, 1)
            self.aux_threed = nn.Conv2d(cfg.branch_channels, cfg.num_classes, 1)
        for m in self.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.momentum = cfg.norm_momentum
                m.eps = cfg.norm_eps

    def forward(self, rgb, threed):
        if rgb.shape[1] != 3 or threed.shape[1] != 1:
            raise ValueError(
                f"expected 3-channel rgb and 1-channel 3D input, got {rgb.shape[1]} and {threed.shape[1]}"
            )
        if rgb.shape[2:] != threed.shape[2:]:
            raise ValueError(f"rgb {tuple(rgb.shape[2:])} and 3D {tuple(threed.shape[2:])} sizes differ")
        h, w = rgb.shape[2:]
        if h < self.MIN_INPUT or w < self.MIN_INPUT:
            raise ValueError(f"input {w}x{h} too small for the stride-32 backbone")
        sp = self.spatial(torch.cat([rgb, threed], dim=1))
        size = sp.shape[2:]
        ctx = self.context_agg(*self.context(rgb), size=size)
        td = self.threed_agg(*self.threed(threed), size=size)
        fused = self.fuse(sp, ctx, td)
        logits = F.interpolate(
            self.classifier(fused), size=(h, w), mode="bilinear", align_corners=False
        )
        if self.cfg.auxiliary_heads and self.training:
            aux_c = F.interpolate(self.aux_context(ctx), size=(h, w), mode="bilinear", align_corners=False)
            aux_t = F.interpolate(self.aux_threed(td), size=(h, w), mode="bilinear", align_corners=False)
            return logits, aux_c, aux_t
        return logits

    def backbone_parameters(self):
        """Parameters of the two residual backbones (for warm-up freezing)."""
        for m in (self.context, self.threed):
            yield from m.parameters()

    def fresh_modules(self):
        """Modules that need scaled init because they carry no pretrained
        weights; the backbones appear here only when not pretrained."""
        mods = [self.spatial, self.context_agg, self.threed_agg, self.fuse, self.classifier]
        if self.cfg.auxiliary_heads:
            mods += [self.aux_context, self.aux_threed]
        if not self.cfg.pretrained_context:
            mods.append(self.context)
        if not self.cfg.pretrained_threed:
            mods.append(self.threed)
        return mods


def count_trainable_parameters(model):
    """Total element count over parameters flagged trainable."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def attach_finite_check_hooks(model):
    """Forward hooks asserting no NaN/Inf leaves any submodule."""
    handles = []

    def check(module, _inputs, output):
        outs = output if isinstance(output, tuple) else (output,)
        for out in outs:
            if isinstance(out, torch.Tensor) and not torch.isfinite(out).all():
                raise FloatingPointError(f"non-finite output from {module.__class__.__name__}")

    for mod in model.modules():
        handles.append(mod.register_forward_hook(check))
    return handles


def save_checkpoint(path, model, optimizer=None, epoch=0, seeds=None, extra=None):
    """Self-describing checkpoint: config, named parameters, optimizer state,
    epoch counter and RNG seeds."""
    payload = {
        "format_version": 1,
        "config": asdict(model.cfg),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "seeds": dict(seeds or {}),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path):
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(payload_or_path):
    """Rebuild a TriFuseNet from a checkpoint payload or file path."""
    payload = payload_or_path
    if not isinstance(payload, dict):
        payload = load_checkpoint(payload)
    cfg_dict = copy.deepcopy(payload["config"])
    for key in ("spatial_channels",):
        if key in cfg_dict and isinstance(cfg_dict[key], list):
            cfg_dict[key] = tuple(cfg_dict[key])
    cfg = NetworkConfig(**cfg_dict)
    # weights come from the checkpoint; never touch the download path here
    cfg.pretrained_context = False
    cfg.pretrained_threed = False
    model = TriFuseNet(cfg)
    model.load_state_dict(payload["model_state"])
    return model
