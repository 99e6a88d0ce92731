"""Inference chain shared by training, stage-1 materialisation and the CLI."""

import torch
from torch import Tensor

from .ccnet import CCNet
from .color import chroma_to_rgb, rgb_to_lab, split_lab
from .hrnet import HRNet


def color_correct(model: CCNet, raw: Tensor) -> tuple[Tensor, Tensor]:
    """Run CC-Net on the chroma of ``raw`` (B, 3, H, W in [0, 1]).

    Returns the corrected chroma and the RGB image rebuilt with raw luminance.
    """
    chroma, L = split_lab(rgb_to_lab(raw))
    corrected = model(chroma)
    return corrected, chroma_to_rgb(corrected, L)


def remove_haze(model: HRNet, img: Tensor) -> Tensor:
    """Run HR-Net on a [0, 1] image; the network itself works in [-1, 1]."""
    return (model(img * 2.0 - 1.0) + 1.0) / 2.0


@torch.no_grad()
def enhance(cc_model: CCNet, hr_model: HRNet, raw: Tensor) -> tuple[Tensor, Tensor]:
    """Full cascade; returns ``(stage1_rgb, final_rgb)``."""
    _, cc_rgb = color_correct(cc_model, raw)
    return cc_rgb, remove_haze(hr_model, cc_rgb)
