"""sRGB <-> CIELAB conversion and Lab channel split/merge.

All functions work on channel-first tensors shaped ``(..., 3, H, W)``, so a
single image ``(3, H, W)`` and a batch ``(B, 3, H, W)`` are both accepted.
Everything is written in plain torch ops and is differentiable, which the
colour-correction stage relies on: its contrastive term is computed on the
RGB image rebuilt from predicted chroma.

Colour standard is sRGB primaries with a D65 white point.
"""

import torch
from torch import Tensor

# sRGB (linear) -> XYZ, D65.
RGB_TO_XYZ = torch.tensor(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ],
    dtype=torch.float64,
)
XYZ_TO_RGB = torch.linalg.inv(RGB_TO_XYZ)
# Row sums of the matrix, so that any gray maps to a = b = 0 exactly.
WHITE_D65 = RGB_TO_XYZ.sum(dim=1)

_DELTA = 6.0 / 29.0
_EPSILON = _DELTA**3  # 216 / 24389

# Chroma a, b are divided by this to land in [-1, 1] on the network side.
CHROMA_SCALE = 128.0


def _check_image(img: Tensor, name: str = "img") -> None:
    if img.dim() < 3 or img.shape[-3] != 3:
        raise ValueError(f"{name} must have shape (..., 3, H, W), got {tuple(img.shape)}")
    if not torch.isfinite(img).all():
        raise ValueError(f"{name} contains non-finite values")


def _channel_matmul(mat: Tensor, img: Tensor) -> Tensor:
    mat = mat.to(dtype=img.dtype, device=img.device)
    return torch.einsum("ij,...jhw->...ihw", mat, img)


def _srgb_to_linear(c: Tensor) -> Tensor:
    # clamp inside the pow branch so torch.where never sees a NaN gradient
    high = ((c.clamp(min=0.04045) + 0.055) / 1.055) ** 2.4
    return torch.where(c > 0.04045, high, c / 12.92)


def _linear_to_srgb(c: Tensor) -> Tensor:
    high = 1.055 * c.clamp(min=0.0031308) ** (1.0 / 2.4) - 0.055
    return torch.where(c > 0.0031308, high, 12.92 * c)


def _lab_f(t: Tensor) -> Tensor:
    high = t.clamp(min=_EPSILON) ** (1.0 / 3.0)
    return torch.where(t > _EPSILON, high, t / (3 * _DELTA**2) + 4.0 / 29.0)


def _lab_f_inv(t: Tensor) -> Tensor:
    return torch.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_lab(img: Tensor) -> Tensor:
    """Convert sRGB in [0, 1] to CIELAB.

    Returns a tensor of the same shape whose channels are ``L`` in [0, 100]
    and ``a``, ``b`` (roughly [-128, 127]).

    >>> rgb_to_lab(torch.ones(3, 1, 1)).flatten()
    tensor([100.,   0.,   0.])
    """
    _check_image(img)
    xyz = _channel_matmul(RGB_TO_XYZ, _srgb_to_linear(img))
    white = WHITE_D65.to(dtype=img.dtype, device=img.device).view(3, 1, 1)
    fx, fy, fz = _lab_f(xyz / white).unbind(dim=-3)
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return torch.stack([L, a, b], dim=-3)


def lab_to_rgb(lab: Tensor) -> Tensor:
    """Convert CIELAB back to sRGB, clamping out-of-gamut results to [0, 1].

    Clamping is deliberate: predicted chroma can be representable in Lab yet
    fall outside the sRGB gamut.
    """
    _check_image(lab, "lab")
    L, a, b = lab.unbind(dim=-3)
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    white = WHITE_D65.to(dtype=lab.dtype, device=lab.device).view(3, 1, 1)
    xyz = _lab_f_inv(torch.stack([fx, fy, fz], dim=-3)) * white
    linear = _channel_matmul(XYZ_TO_RGB, xyz).clamp(0.0, 1.0)
    return _linear_to_srgb(linear).clamp(0.0, 1.0)


def split_lab(lab: Tensor) -> tuple[Tensor, Tensor]:
    """Split Lab into network-facing chroma in [-1, 1] and the untouched L.

    Returns ``(chroma, L)`` with shapes ``(..., 2, H, W)`` and ``(..., 1, H, W)``.
    """
    _check_image(lab, "lab")
    L = lab[..., 0:1, :, :]
    chroma = lab[..., 1:3, :, :] / CHROMA_SCALE
    return chroma, L


def merge_lab(chroma: Tensor, L: Tensor) -> Tensor:
    """Inverse of :func:`split_lab`: rescale chroma by 128 and re-attach L."""
    if chroma.dim() < 3 or chroma.shape[-3] != 2:
        raise ValueError(f"chroma must have shape (..., 2, H, W), got {tuple(chroma.shape)}")
    if L.dim() < 3 or L.shape[-3] != 1:
        raise ValueError(f"L must have shape (..., 1, H, W), got {tuple(L.shape)}")
    if chroma.shape[:-3] != L.shape[:-3] or chroma.shape[-2:] != L.shape[-2:]:
        raise ValueError(
            f"chroma {tuple(chroma.shape)} and L {tuple(L.shape)} disagree in size"
        )
    return torch.cat([L, chroma * CHROMA_SCALE], dim=-3)


def rgb_to_chroma(img: Tensor) -> tuple[Tensor, Tensor]:
    """Shorthand for ``split_lab(rgb_to_lab(img))``."""
    return split_lab(rgb_to_lab(img))


def chroma_to_rgb(chroma: Tensor, L: Tensor) -> Tensor:
    """Shorthand for ``lab_to_rgb(merge_lab(chroma, L))``."""
    return lab_to_rgb(merge_lab(chroma, L))
