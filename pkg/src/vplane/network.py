"""ERFNet-style shared encoder, lane decoder, VP heatmap head and the four fusion topologies."""
from dataclasses import asdict, dataclass
from enum import Enum
import json
import os
from typing import Dict, NamedTuple, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import ImageDims, InvalidConfigError


class FusionTopology(str, Enum):
    LD_VP = "LD_VP"            # lane output + features -> VP head
    VP_MID_LD = "VP_MID_LD"    # VP output + features -> middle -> lane decoder
    PARALLEL = "PARALLEL"      # independent heads
    LD_MID_VP = "LD_MID_VP"    # lane output + features -> middle -> VP head


class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    topology: FusionTopology = FusionTopology.LD_MID_VP
    input_dims: ImageDims = ImageDims(128, 64)
    lane_categories: int = 4
    base_channels: int = 16
    encoder_depth: Union[int, Tuple[int, int]] = 2
    decoder_depth: int = 1
    heatmap_stride: int = 4
    mid_channels: int = 8
    vp_head_channels: int = 8
    dilations: Tuple[int, ...] = (2, 4)
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.topology = FusionTopology(self.topology)
        if not isinstance(self.input_dims, ImageDims):
            self.input_dims = ImageDims(*self.input_dims)
        if isinstance(self.encoder_depth, (list, tuple)):
            self.encoder_depth = tuple(int(d) for d in self.encoder_depth)
        self.dilations = tuple(self.dilations)
        w, h = self.input_dims.width, self.input_dims.height
        s = self.heatmap_stride
        if w % 8 or h % 8:
            raise InvalidConfigError(f"input dims {w}x{h} must be divisible by 8")
        if s < 1 or w % s or h % s:
            raise InvalidConfigError(f"input dims {w}x{h} must be divisible by heatmap_stride {s}")
        if s > 8 or 8 % s:
            raise InvalidConfigError(f"heatmap_stride must divide 8, got {s}")
        if self.base_channels < 4:
            raise InvalidConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.lane_categories < 1:
            raise InvalidConfigError("lane_categories must be >= 1")

    @property
    def stage_depths(self) -> Tuple[int, int]:
        d = self.encoder_depth
        return (d, d) if isinstance(d, int) else d

    @property
    def widths(self) -> Tuple[int, int, int]:
        """Channel widths at 1/2, 1/4 and 1/8 resolution (16/64/128 for ERFNet)."""
        c = self.base_channels
        return max(4, c // 4), c, 2 * c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topology"] = self.topology.value
        d["input_dims"] = [self.input_dims.width, self.input_dims.height]
        d["encoder_depth"] = list(self.encoder_depth) if isinstance(self.encoder_depth, tuple) else self.encoder_depth
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def full_scale_config(topology=FusionTopology.LD_MID_VP) -> ModelConfig:
    """ERFNet-class footprint (16/64/128 channels, 5 + 8 encoder blocks) at 976x352."""
    return ModelConfig(topology=topology, input_dims=ImageDims(976, 352), base_channels=64,
                       encoder_depth=(5, 8), decoder_depth=2, dilations=(2, 4, 8, 16),
                       dropout=0.1)


class ForwardOutput(NamedTuple):
    seg_logits: torch.Tensor   # (B, K + 1, H, W)
    vp_heatmap: torch.Tensor   # (B, 1, H / stride, W / stride)


class DownsamplerBlock(nn.Module):
    def __init__(self, ninput, noutput):
        super().__init__()
        # the pooled copy of the input only fits when the block widens; otherwise conv alone
        self.pool = nn.MaxPool2d(2, stride=2) if noutput > ninput else None
        nconv = noutput - ninput if self.pool is not None else noutput
        self.conv = nn.Conv2d(ninput, nconv, 3, stride=2, padding=1, bias=True)
        self.bn = nn.BatchNorm2d(noutput, eps=1e-3)

    def forward(self, x):
        out = self.conv(x)
        if self.pool is not None:
            out = torch.cat([out, self.pool(x)], 1)
        return F.relu(self.bn(out))


class NonBottleneck1D(nn.Module):
    """Residual block of factorized 3x1 / 1x3 convolutions, the second pair dilated."""

    def __init__(self, chann, dilated=1, dropprob=0.0):
        super().__init__()
        self.conv3x1_1 = nn.Conv2d(chann, chann, (3, 1), padding=(1, 0), bias=True)
        self.conv1x3_1 = nn.Conv2d(chann, chann, (1, 3), padding=(0, 1), bias=True)
        self.bn1 = nn.BatchNorm2d(chann, eps=1e-3)
        self.conv3x1_2 = nn.Conv2d(chann, chann, (3, 1), padding=(dilated, 0), dilation=(dilated, 1), bias=True)
        self.conv1x3_2 = nn.Conv2d(chann, chann, (1, 3), padding=(0, dilated), dilation=(1, dilated), bias=True)
        self.bn2 = nn.BatchNorm2d(chann, eps=1e-3)
        self.dropout = nn.Dropout2d(dropprob) if dropprob > 0 else nn.Identity()

    def forward(self, x):
        out = F.relu(self.conv3x1_1(x))
        out = F.relu(self.bn1(self.conv1x3_1(out)))
        out = F.relu(self.conv3x1_2(out))
        out = self.dropout(self.bn2(self.conv1x3_2(out)))
        return F.relu(out + x)


class UpsamplerBlock(nn.Module):
    def __init__(self, ninput, noutput):
        super().__init__()
        self.conv = nn.ConvTranspose2d(ninput, noutput, 3, stride=2, padding=1, output_padding=1, bias=True)
        self.bn = nn.BatchNorm2d(noutput, eps=1e-3)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3 = cfg.widths
        d2, d3 = cfg.stage_depths
        layers = [DownsamplerBlock(3, c1), DownsamplerBlock(c1, c2)]
        layers += [NonBottleneck1D(c2, 1, cfg.dropout) for _ in range(d2)]
        layers.append(DownsamplerBlock(c2, c3))
        layers += [NonBottleneck1D(c3, cfg.dilations[i % len(cfg.dilations)], cfg.dropout) for i in range(d3)]
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


class LaneDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3 = cfg.widths
        layers = [UpsamplerBlock(c3, c2)]
        layers += [NonBottleneck1D(c2) for _ in range(cfg.decoder_depth)]
        layers.append(UpsamplerBlock(c2, c1))
        layers += [NonBottleneck1D(c1) for _ in range(cfg.decoder_depth)]
        self.layers = nn.Sequential(*layers)
        self.output_conv = nn.ConvTranspose2d(c1, cfg.lane_categories + 1, 2, stride=2, bias=True)

    def forward(self, x):
        return self.output_conv(self.layers(x))


class MiddleBlock(nn.Module):
    """1x1 projection of the fused input followed by one non-bottleneck block."""

    def __init__(self, cin, cout):
        super().__init__()
        self.proj = nn.Conv2d(cin, cout, 1, bias=False)
        self.bn = nn.BatchNorm2d(cout, eps=1e-3)
        self.block = NonBottleneck1D(cout)

    def forward(self, x):
        return self.block(F.relu(self.bn(self.proj(x))))


class VPHead(nn.Module):
    def __init__(self, cin, hidden, upscale):
        super().__init__()
        self.upscale = upscale
        self.conv = nn.Conv2d(cin, hidden, 3, padding=1, bias=False)
        # normalized pre-activations keep the hidden units from dying on early VP-loss spikes
        self.bn = nn.BatchNorm2d(hidden, eps=1e-3)
        self.out = nn.Conv2d(hidden, 1, 1, bias=True)

    def forward(self, x):
        if self.upscale > 1:
            x = F.interpolate(x, scale_factor=self.upscale, mode="bilinear", align_corners=False)
        return self.out(F.relu(self.bn(self.conv(x))))


def _resample(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    down = size[0] < x.shape[-2]
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=down)


class VPLaneNet(nn.Module):
    """Shared encoder with a lane-segmentation decoder and a VP heatmap head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        T = FusionTopology
        c3 = cfg.widths[2]
        nlane = cfg.lane_categories + 1
        upscale = 8 // cfg.heatmap_stride
        self.encoder = Encoder(cfg)
        self.lane_decoder = LaneDecoder(cfg)
        if cfg.topology is T.LD_MID_VP:
            self.middle = MiddleBlock(c3 + nlane, cfg.mid_channels)
            vp_in = cfg.mid_channels
        elif cfg.topology is T.VP_MID_LD:
            # output width must match what the lane decoder expects
            self.middle = MiddleBlock(c3 + 1, c3)
            vp_in = c3
        else:
            self.middle = None
            vp_in = c3 + nlane if cfg.topology is T.LD_VP else c3
        self.vp_head = VPHead(vp_in, cfg.vp_head_channels, upscale)

    def forward(self, x) -> ForwardOutput:
        cfg = self.cfg
        expected = (3, cfg.input_dims.height, cfg.input_dims.width)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected input (B, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(x.shape)}")
        feats = self.encoder(x)
        size = feats.shape[-2:]
        T = FusionTopology
        if cfg.topology is T.VP_MID_LD:
            vp = self.vp_head(feats)
            fused = torch.cat([feats, _resample(vp, size)], 1)
            seg = self.lane_decoder(self.middle(fused))
            return ForwardOutput(seg, vp)
        seg = self.lane_decoder(feats)
        if cfg.topology is T.PARALLEL:
            vp_in = feats
        else:
            probs = _resample(torch.softmax(seg, 1), size)
            vp_in = torch.cat([feats, probs], 1)
            if cfg.topology is T.LD_MID_VP:
                vp_in = self.middle(vp_in)
        return ForwardOutput(seg, self.vp_head(vp_in))


def build_model(cfg: ModelConfig) -> VPLaneNet:
    """Construct a model with seeded fan-in-scaled initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = VPLaneNet(cfg)
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        # prediction layers start near zero so the first VP-loss gradients stay small
        for m in (model.lane_decoder.output_conv, model.vp_head.out):
            nn.init.normal_(m.weight, std=0.01)
    return model


COMPONENTS = ("encoder", "lane_decoder", "middle", "vp_head")


def count_parameters(model: VPLaneNet) -> Dict[str, int]:
    counts = {}
    for name in COMPONENTS:
        module = getattr(model, name)
        counts[name] = sum(p.numel() for p in module.parameters()) if module is not None else 0
    counts["total"] = sum(p.numel() for p in model.parameters())
    assert counts["total"] == sum(counts[n] for n in COMPONENTS)
    return counts


def component_parameters(model: VPLaneNet, name: str):
    module = getattr(model, name)
    return [] if module is None else list(module.parameters())


def reachable_parameters(output: torch.Tensor, model: nn.Module) -> set:
    """Names of parameters with an autograd path into ``output``."""
    by_id = {id(p): n for n, p in model.named_parameters()}
    seen, found = set(), set()
    stack = [output.grad_fn]
    while stack:
        fn = stack.pop()
        if fn is None or fn in seen:
            continue
        seen.add(fn)
        var = getattr(fn, "variable", None)
        if var is not None and id(var) in by_id:
            found.add(by_id[id(var)])
        stack.extend(nxt for nxt, _ in fn.next_functions)
    return found


def forward_batch(model: VPLaneNet, images) -> ForwardOutput:
    """Inference-mode forward pass on uint8 ``(B, H, W, 3)`` arrays or float tensors."""
    model.eval()
    x = images_to_tensor(images)
    with torch.no_grad():
        return model(x.to(next(model.parameters()).dtype))


def images_to_tensor(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()


def save_checkpoint(path, model: VPLaneNet, extra: dict = None) -> None:
    payload = {
        "config": model.cfg.to_json(),
        "params": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


class CheckpointMismatchError(ValueError):
    pass


def load_checkpoint(path, expected: ModelConfig = None) -> Tuple[VPLaneNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg = ModelConfig.from_dict(json.loads(payload["config"]))
    if expected is not None and expected.to_dict() != cfg.to_dict():
        raise CheckpointMismatchError(
            f"checkpoint config {cfg.to_json()} does not match expected {expected.to_json()}")
    model = build_model(cfg)
    params = payload["params"]
    if params and next(iter(params.values())).dtype == torch.float64:
        model = model.double()
    model.load_state_dict(params, strict=True)
    return model, json.loads(payload["extra"])
