"""Colour-correction network operating on normalized Lab chroma.

The network predicts a residual on the two chroma channels::

    feats  = relu(conv(relu(conv(ab))))        # 2 -> width -> width
    feats  = FAB^5(feats)
    delta  = conv(relu(conv(feats)))           # width -> width -> 2
    ab_out = tanh(ab + delta)

The feature attention block follows the FFA-Net block (conv, ReLU, local
skip, conv, channel attention, pixel attention, block skip).
"""

from dataclasses import asdict, dataclass

import torch
from torch import Tensor, nn


@dataclass
class CcNetConfig:
    base_width: int = 64
    num_fab: int = 5
    kernel_size: int = 3
    reduction: int = 8

    def validate(self) -> None:
        if self.base_width < 8:
            raise ValueError(f"base_width must be >= 8, got {self.base_width}")
        if self.num_fab < 1:
            raise ValueError(f"num_fab must be >= 1, got {self.num_fab}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd number, got {self.kernel_size}")
        if self.reduction < 1 or self.base_width // self.reduction < 1:
            raise ValueError(f"reduction {self.reduction} too large for width {self.base_width}")

    def to_dict(self) -> dict:
        return asdict(self)


def conv(in_ch: int, out_ch: int, kernel_size: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=kernel_size // 2, bias=True)


def init_weights(module: nn.Module) -> None:
    """Fan-in uniform weights, zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            # torch's default conv init is U(-1/sqrt(fan_in), 1/sqrt(fan_in))
            m.reset_parameters()
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels // reduction, 1, bias=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels // reduction, channels, 1, bias=True),
            nn.Sigmoid(),
        )

    def forward(self, x: Tensor) -> Tensor:
        return x * self.body(self.pool(x))


class PixelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels // reduction, 1, bias=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels // reduction, 1, 1, bias=True),
            nn.Sigmoid(),
        )

    def forward(self, x: Tensor) -> Tensor:
        return x * self.body(x)


class FeatureAttentionBlock(nn.Module):
    """FFA-style block; output has the same shape as the input."""

    def __init__(self, channels: int, kernel_size: int = 3, reduction: int = 8):
        super().__init__()
        self.conv1 = conv(channels, channels, kernel_size)
        self.act = nn.ReLU(inplace=True)
        self.conv2 = conv(channels, channels, kernel_size)
        self.ca = ChannelAttention(channels, reduction)
        self.pa = PixelAttention(channels, reduction)

    def forward(self, x: Tensor) -> Tensor:
        res = self.act(self.conv1(x))
        res = res + x
        res = self.conv2(res)
        res = self.ca(res)
        res = self.pa(res)
        return res + x


def fab_forward(block: FeatureAttentionBlock, features: Tensor) -> Tensor:
    if features.shape[-3] != block.conv1.in_channels:
        raise ValueError(
            f"expected {block.conv1.in_channels} channels, got {features.shape[-3]}"
        )
    return block(features)


class CCNet(nn.Module):
    def __init__(self, config: CcNetConfig | None = None):
        super().__init__()
        config = config or CcNetConfig()
        config.validate()
        self.config = config
        w, k = config.base_width, config.kernel_size
        self.stem = nn.Sequential(
            conv(2, w, k), nn.ReLU(inplace=True),
            conv(w, w, k), nn.ReLU(inplace=True),
        )
        self.fabs = nn.Sequential(
            *[FeatureAttentionBlock(w, k, config.reduction) for _ in range(config.num_fab)]
        )
        self.head = nn.Sequential(conv(w, w, k), nn.ReLU(inplace=True), conv(w, 2, k))

    def delta(self, chroma: Tensor) -> Tensor:
        """The predicted chroma residual before the skip and tanh."""
        return self.head(self.fabs(self.stem(chroma)))

    def forward(self, chroma: Tensor) -> Tensor:
        if chroma.dim() != 4 or chroma.shape[1] != 2:
            raise ValueError(f"expected chroma of shape (B, 2, H, W), got {tuple(chroma.shape)}")
        return torch.tanh(chroma + self.delta(chroma))


def build_ccnet(config: CcNetConfig | None = None, seed: int = 0) -> CCNet:
    """Build a CC-Net whose parameters depend only on ``(config, seed)``."""
    config = config or CcNetConfig()
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CCNet(config)
        init_weights(model)
    return model


def ccnet_forward(model: CCNet, chroma: Tensor) -> Tensor:
    """Correct a chroma tensor; accepts ``(2, H, W)`` or ``(B, 2, H, W)``."""
    if chroma.dim() == 3:
        return model(chroma.unsqueeze(0)).squeeze(0)
    return model(chroma)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
