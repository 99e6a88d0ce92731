"""Training objectives for both stages.

Images passed to these functions are RGB in [0, 1], channel-first, batched
``(B, 3, H, W)``. Chroma tensors are the normalized ``(B, 2, H, W)`` output of
:func:`cclnet.color.split_lab`.
"""

import os
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .color import chroma_to_rgb, rgb_to_lab, split_lab

BACKBONE_ENV = "CCL_BACKBONE_WEIGHTS"

# Indices into torchvision's vgg19().features of the ReLU that follows the
# 1st, 3rd, 5th, 9th and 13th conv layer (relu1_1 .. relu5_1).
VGG19_TAPS = (1, 6, 11, 20, 29)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class LossWeights:
    lambda_cc: float = 0.5
    lambda_hr: float = 0.5
    s_cc: float = 100.0
    s_hr: float = 1.0
    w: tuple[float, ...] = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
    eps: float = 1e-7

    def __post_init__(self):
        self.w = tuple(float(v) for v in self.w)
        if len(self.w) != 5:
            raise ValueError(f"exactly five layer weights required, got {len(self.w)}")
        if min(self.w) <= 0:
            raise ValueError("layer weights must be positive")
        for name in ("lambda_cc", "lambda_hr", "s_cc", "s_hr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.s_cc <= 0 or self.s_hr <= 0:
            raise ValueError("contrastive scales must be positive")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["w"] = list(self.w)
        return d


class FeatureExtractor(nn.Module):
    """Frozen VGG-19 returning the five tapped activations.

    Pretrained weights come from ``weights_path`` (or ``$CCL_BACKBONE_WEIGHTS``),
    a torchvision ``vgg19`` state dict. Without a file the backbone is randomly
    initialised from ``seed``; that is only meant for offline tests, and
    ``pretrained`` tells the two apart. ``use_env=False`` ignores the
    environment variable.
    """

    def __init__(
        self,
        weights_path: str | os.PathLike | None = None,
        seed: int = 0,
        use_env: bool = True,
    ):
        super().__init__()
        from torchvision.models import vgg19

        if weights_path is None and use_env:
            weights_path = os.environ.get(BACKBONE_ENV) or None
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = vgg19(weights=None)
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            if any(k.startswith("features.") for k in state):
                net.load_state_dict(state)
            else:
                net.features.load_state_dict(state)
        self.pretrained = bool(weights_path)
        self.features = net.features[: VGG19_TAPS[-1] + 1]
        for m in self.features:
            if isinstance(m, nn.ReLU):
                m.inplace = False
            elif isinstance(m, nn.MaxPool2d):
                # identical for sides divisible by 16; keeps tiny inputs from pooling to 0x0
                m.ceil_mode = True
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, img: Tensor) -> list[Tensor]:
        x = (img - self.mean.to(img.dtype)) / self.std.to(img.dtype)
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in VGG19_TAPS:
                feats.append(x)
        return feats


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def color_loss(pred_chroma: Tensor, ref_chroma: Tensor) -> Tensor:
    """Squared L2 over both chroma channels divided by H*W, batch-averaged."""
    _check_same(pred_chroma, ref_chroma, "color_loss")
    h, w = pred_chroma.shape[-2:]
    sq = (pred_chroma - ref_chroma) ** 2
    if sq.dim() == 3:
        sq = sq.unsqueeze(0)
    return sq.sum(dim=(1, 2, 3)).mean() / (h * w)


def contrastive_loss(
    anchor: Tensor,
    positive: Tensor,
    negative: Tensor,
    extractor: FeatureExtractor,
    weights: LossWeights,
    scale: float,
) -> Tensor:
    """Ratio of anchor-positive to anchor-negative feature L1 distances.

    ``sum_i w_i * mean|E_i(a) - E_i(p)| / (mean|E_i(a) - E_i(n)| + eps) / scale``

    Positive and negative features are treated as constants. With
    ``weights.eps == 0`` an anchor that coincides with the negative raises
    ``ZeroDivisionError`` instead of returning inf/NaN.
    """
    _check_same(anchor, positive, "contrastive_loss")
    _check_same(anchor, negative, "contrastive_loss")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    fa = extractor(anchor)
    with torch.no_grad():
        fp = extractor(positive)
        fn = extractor(negative)
    loss = anchor.new_zeros(())
    for w_i, a, p, n in zip(weights.w, fa, fp, fn):
        num = (a - p).abs().mean()
        den = (a - n).abs().mean()
        if weights.eps == 0 and den.item() == 0:
            raise ZeroDivisionError("anchor coincides with the negative sample and eps is 0")
        loss = loss + w_i * num / (den + weights.eps)
    return loss / scale


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32) -> Tensor:
    coords = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def ssim_map(pred: Tensor, ref: Tensor, data_range: float = 1.0) -> Tensor:
    """Per-pixel, per-channel SSIM with an 11x11 Gaussian window (sigma 1.5).

    Borders are reflect-padded so the map has the input's size; that needs
    both sides larger than the window radius.
    """
    _check_same(pred, ref, "ssim")
    if pred.dim() == 3:
        pred, ref = pred.unsqueeze(0), ref.unsqueeze(0)
    radius = SSIM_WINDOW // 2
    h, w = pred.shape[-2:]
    if h <= radius or w <= radius:
        raise ValueError(f"image {h}x{w} too small for a {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c = pred.shape[1]
    window = gaussian_window(SSIM_WINDOW, SSIM_SIGMA, pred.dtype).to(pred.device)
    window = window.expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(x: Tensor) -> Tensor:
        x = F.pad(x, (radius,) * 4, mode="reflect")
        return F.conv2d(x, window, groups=c)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu1, mu2 = filt(pred), filt(ref)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = filt(pred * pred) - mu1_sq
    s2 = filt(ref * ref) - mu2_sq
    s12 = filt(pred * ref) - mu12
    return ((2 * mu12 + c1) * (2 * s12 + c2)) / ((mu1_sq + mu2_sq + c1) * (s1 + s2 + c2))


def ssim_loss(pred: Tensor, ref: Tensor) -> Tensor:
    """``1 - mean SSIM`` over windows, channels and batch."""
    return 1.0 - ssim_map(pred, ref).mean()


class LossTerms(NamedTuple):
    total: Tensor
    main: Tensor
    ctr: Tensor


def hybrid_cc_loss(
    pred_chroma: Tensor,
    ref_chroma: Tensor,
    ref_rgb_hat: Tensor,
    raw_rgb: Tensor,
    extractor: FeatureExtractor | None,
    weights: LossWeights,
    use_contrastive: bool = True,
) -> LossTerms:
    """Colour loss plus ``lambda_cc`` times the stage-1 contrastive loss.

    The anchor is the RGB image rebuilt from ``pred_chroma`` and the raw
    luminance; ``ref_rgb_hat`` (reference chroma on raw luminance) is the
    positive and the raw image the negative.
    """
    main = color_loss(pred_chroma, ref_chroma)
    if not use_contrastive or weights.lambda_cc == 0:
        return LossTerms(main, main, main.new_zeros(()))
    _, raw_L = split_lab(rgb_to_lab(raw_rgb))
    anchor = chroma_to_rgb(pred_chroma, raw_L)
    ctr = contrastive_loss(anchor, ref_rgb_hat, raw_rgb, extractor, weights, weights.s_cc)
    return LossTerms(main + weights.lambda_cc * ctr, main, ctr)


def hybrid_hr_loss(
    pred: Tensor,
    ref: Tensor,
    negative: Tensor,
    extractor: FeatureExtractor | None,
    weights: LossWeights,
    use_contrastive: bool = True,
) -> LossTerms:
    """SSIM loss plus ``lambda_hr`` times the stage-2 contrastive loss.

    ``negative`` is normally the stage-1 output; the raw image under the
    raw-as-negative ablation.
    """
    main = ssim_loss(pred, ref)
    if not use_contrastive or weights.lambda_hr == 0:
        return LossTerms(main, main, main.new_zeros(()))
    ctr = contrastive_loss(pred, ref, negative, extractor, weights, weights.s_hr)
    return LossTerms(main + weights.lambda_hr * ctr, main, ctr)


def reference_rgb_hat(ref_rgb: Tensor, raw_rgb: Tensor) -> Tensor:
    """Reference chroma merged onto the raw image's luminance, back in RGB."""
    ref_chroma, _ = split_lab(rgb_to_lab(ref_rgb))
    _, raw_L = split_lab(rgb_to_lab(raw_rgb))
    return chroma_to_rgb(ref_chroma, raw_L)
