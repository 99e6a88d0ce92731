"""Haze-removal network: three-scale encoder fused bottom-up with SKFF.

Data flow (widths for the default config in brackets)::

    high  = relu(conv(x))                       # full res   [32]
    mid   = d2(high)                            # 1/2        [64]
    low   = d4(high)                            # 1/4        [128]
    fmid  = SKFF(align(mid), up(low))           # 1/2        [128]
    fhigh = SKFF(align(high), up(fmid))         # full res   [128]
    out   = tanh(conv(fhigh))                   # 3 channels

Both downsampling convs read the full-resolution feature directly. ``up`` is
bilinear x2 followed by a 1x1 conv and ``align`` is a 1x1 conv; both bring
their operand to the width of the coarsest scale before fusion.
"""

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .ccnet import conv, init_weights


@dataclass
class HrNetConfig:
    scale_widths: tuple[int, int, int] = (32, 64, 128)
    kernel_size: int = 3
    reduction: int = 8

    @property
    def base_width(self) -> int:
        return self.scale_widths[0]

    def validate(self) -> None:
        if len(self.scale_widths) != 3:
            raise ValueError(f"exactly three scale widths required, got {self.scale_widths}")
        if min(self.scale_widths) < 8:
            raise ValueError(f"scale widths must be >= 8, got {self.scale_widths}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd number, got {self.kernel_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_widths"] = list(self.scale_widths)
        return d


class SKFF(nn.Module):
    """Selective kernel feature fusion of two equally shaped feature maps.

    Follows MIRNet: sum the branches, global-average-pool, squeeze to a
    bottleneck of ``max(C // reduction, 4)`` channels, expand once per branch
    and softmax across the branches, so for every channel the two weights are
    non-negative and sum to one.
    """

    def __init__(self, channels: int, reduction: int = 8, branches: int = 2):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.branches = branches
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.squeeze = nn.Sequential(nn.Conv2d(channels, hidden, 1, bias=False), nn.LeakyReLU(0.2))
        self.expand = nn.ModuleList(
            [nn.Conv2d(hidden, channels, 1, bias=False) for _ in range(branches)]
        )

    def attention(self, a: Tensor, b: Tensor) -> Tensor:
        """Branch weights of shape (B, 2, C, 1, 1)."""
        if a.shape != b.shape:
            raise ValueError(f"SKFF inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
        z = self.squeeze(self.pool(a + b))
        logits = torch.stack([fc(z) for fc in self.expand], dim=1)
        return torch.softmax(logits, dim=1)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        weights = self.attention(a, b)
        return weights[:, 0] * a + weights[:, 1] * b


def skff(module: SKFF, features_a: Tensor, features_b: Tensor) -> Tensor:
    return module(features_a, features_b)


class Upsample2x(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, 1, bias=True)

    def forward(self, x: Tensor, size: tuple[int, int]) -> Tensor:
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return self.proj(x)


class HRNet(nn.Module):
    def __init__(self, config: HrNetConfig | None = None):
        super().__init__()
        config = config or HrNetConfig()
        config.validate()
        self.config = config
        w1, w2, w3 = config.scale_widths
        k = config.kernel_size
        self.head = conv(3, w1, k)
        self.down2 = conv(w1, w2, k, stride=2)
        self.down4 = conv(w1, w3, k, stride=4)
        self.up_low = Upsample2x(w3, w3)
        self.align_mid = nn.Conv2d(w2, w3, 1, bias=True)
        self.fuse_mid = SKFF(w3, config.reduction)
        self.up_mid = Upsample2x(w3, w3)
        self.align_high = nn.Conv2d(w1, w3, 1, bias=True)
        self.fuse_high = SKFF(w3, config.reduction)
        self.tail = conv(w3, 3, k)

    def _forward_aligned(self, x: Tensor) -> Tensor:
        high = F.relu(self.head(x))
        mid = self.down2(high)
        low = self.down4(high)
        mid_up = self.up_low(low, mid.shape[-2:])
        fused_mid = self.fuse_mid(self.align_mid(mid), mid_up)
        high_up = self.up_mid(fused_mid, high.shape[-2:])
        fused_high = self.fuse_high(self.align_high(high), high_up)
        return torch.tanh(self.tail(fused_high))

    def forward(self, x: Tensor) -> Tensor:
        """Map a (B, 3, H, W) image in [-1, 1] to an enhanced one in [-1, 1].

        Sizes not divisible by 4 are padded up to the next multiple and the
        result is cropped back.
        """
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected image of shape (B, 3, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        pad_h, pad_w = (-h) % 4, (-w) % 4
        if pad_h or pad_w:
            # reflect needs the pad to be smaller than the side
            mode = "reflect" if h > pad_h and w > pad_w else "replicate"
            x = F.pad(x, (0, pad_w, 0, pad_h), mode=mode)
        out = self._forward_aligned(x)
        return out[..., :h, :w]


def build_hrnet(config: HrNetConfig | None = None, seed: int = 0) -> HRNet:
    config = config or HrNetConfig()
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = HRNet(config)
        init_weights(model)
    return model


def hrnet_forward(model: HRNet, img: Tensor) -> Tensor:
    if img.dim() == 3:
        return model(img.unsqueeze(0)).squeeze(0)
    return model(img)
