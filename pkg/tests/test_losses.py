import numpy as np
import pytest
import torch
import torch.nn.functional as F
from skimage.metrics import structural_similarity

from cclnet.color import rgb_to_lab, split_lab
from cclnet.losses import (
    LossWeights,
    color_loss,
    contrastive_loss,
    hybrid_cc_loss,
    hybrid_hr_loss,
    reference_rgb_hat,
    ssim_loss,
    ssim_map,
)

from conftest import check_gradients


class PoolPyramid(torch.nn.Module):
    """Stand-in extractor: the image average-pooled at five scales."""

    def forward(self, x):
        return [F.avg_pool2d(x, 2**i) if i else x for i in range(5)]


def rand_img(seed, shape=(1, 3, 16, 16), dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=gen, dtype=dtype)


# --- colour loss ------------------------------------------------------------


def test_color_loss_zero_for_identical():
    x = rand_img(0, (2, 2, 8, 8)) * 2 - 1
    assert color_loss(x, x).item() == 0.0


@pytest.mark.parametrize("hw", [(1, 1), (7, 3), (32, 32)])
def test_color_loss_constant_offset(hw):
    ref = torch.zeros(1, 2, *hw)
    assert color_loss(ref + 0.5, ref).item() == pytest.approx(0.5, abs=1e-7)


def test_color_loss_shape_mismatch():
    with pytest.raises(ValueError):
        color_loss(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 5))


def test_color_loss_gradient():
    pred = (rand_img(1, (1, 2, 8, 8), torch.float64) * 2 - 1).requires_grad_()
    ref = rand_img(2, (1, 2, 8, 8), torch.float64) * 2 - 1
    errors = check_gradients(lambda: color_loss(pred, ref), {"pred": pred})
    assert errors["pred"] < 1e-4


# --- contrastive loss -------------------------------------------------------


def test_contrastive_zero_when_anchor_is_positive(extractor):
    w = LossWeights()
    p, n = rand_img(3), rand_img(4)
    assert contrastive_loss(p, p.clone(), n, extractor, w, 1.0).item() == 0.0


def test_contrastive_guarded_pole(extractor):
    w = LossWeights()
    p, n = rand_img(5), rand_img(6)
    value = contrastive_loss(n, p, n.clone(), extractor, w, 1.0).item()
    assert np.isfinite(value) and value > 1e3


def test_contrastive_without_eps_raises(extractor):
    w = LossWeights(eps=0.0)
    p, n = rand_img(7), rand_img(8)
    with pytest.raises(ZeroDivisionError):
        contrastive_loss(n, p, n.clone(), extractor, w, 1.0)


def test_contrastive_scale_covariance(extractor):
    w = LossWeights()
    a, p, n = rand_img(9), rand_img(10), rand_img(11)
    base = contrastive_loss(a, p, n, extractor, w, 1.0).item()
    for s in (0.5, 3.0, 100.0):
        assert contrastive_loss(a, p, n, extractor, w, s).item() == pytest.approx(base / s, rel=1e-6)


def test_contrastive_interpolation_probe(extractor):
    w = LossWeights()
    p, n = rand_img(12, (1, 3, 32, 32)), rand_img(13, (1, 3, 32, 32))
    near_pos = contrastive_loss(0.9 * p + 0.1 * n, p, n, extractor, w, 1.0)
    near_neg = contrastive_loss(0.1 * p + 0.9 * n, p, n, extractor, w, 1.0)
    assert near_pos < near_neg


def test_layer_weights_golden_vector():
    # Each pyramid level of a constant-offset image has the same offsets, so
    # every per-layer ratio is |a-p| / |a-n| = 0.1 / 0.3.
    ext = PoolPyramid()
    p = torch.full((1, 3, 16, 16), 0.5)
    a, n = p + 0.1, p + 0.4
    w = LossWeights()
    value = contrastive_loss(a, p, n, ext, w, 1.0).item()
    golden = sum(w.w) * (0.1 / (0.3 + w.eps))
    assert value == pytest.approx(golden, rel=1e-5)

    # Layer-dependent ratios: only scale 0 differs from the rest.
    img = torch.zeros(1, 1, 16, 16)
    img[..., ::2, ::2] = 1.0  # checkerboard-ish pattern averages out when pooled
    a, p, n = img, torch.zeros_like(img), torch.full_like(img, 0.25)
    ratios = []
    for fa, fp, fn in zip(ext(a), ext(p), ext(n)):
        ratios.append((fa - fp).abs().mean().item() / ((fa - fn).abs().mean().item() + w.eps))
    assert ratios == pytest.approx([0.25 / 0.375] + [0.25 / (0.0 + w.eps)] * 4, rel=1e-5)

    rev = LossWeights(w=tuple(reversed(w.w)))
    forward_val = contrastive_loss(a, p, n, ext, w, 1.0).item()
    reverse_val = contrastive_loss(a, p, n, ext, rev, 1.0).item()
    assert forward_val == pytest.approx(sum(wi * r for wi, r in zip(w.w, ratios)), rel=1e-5)
    assert reverse_val != pytest.approx(forward_val)


def test_contrastive_shape_and_scale_checks(extractor):
    w = LossWeights()
    with pytest.raises(ValueError):
        contrastive_loss(rand_img(0), rand_img(1, (1, 3, 8, 8)), rand_img(2), extractor, w, 1.0)
    with pytest.raises(ValueError):
        contrastive_loss(rand_img(0), rand_img(1), rand_img(2), extractor, w, 0.0)


def test_contrastive_gradient(extractor64):
    w = LossWeights()
    a = rand_img(20, (1, 3, 8, 8), torch.float64).requires_grad_()
    p = rand_img(21, (1, 3, 8, 8), torch.float64)
    n = rand_img(22, (1, 3, 8, 8), torch.float64)
    errors = check_gradients(lambda: contrastive_loss(a, p, n, extractor64, w, 1.0), {"anchor": a})
    assert errors["anchor"] < 1e-3


def test_extractor_is_frozen(extractor):
    assert all(not p.requires_grad for p in extractor.parameters())
    extractor.train()
    assert not extractor.training
    assert len(extractor(rand_img(0))) == 5


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(w=(1.0, 1.0))
    with pytest.raises(ValueError):
        LossWeights(w=(1.0, 1.0, 1.0, 1.0, -1.0))
    with pytest.raises(ValueError):
        LossWeights(s_cc=0.0)


# --- SSIM -------------------------------------------------------------------


def test_ssim_loss_identical():
    x = rand_img(30)
    assert ssim_loss(x, x).item() == pytest.approx(0.0, abs=1e-6)


def test_ssim_loss_noise_in_unit_interval():
    x = rand_img(31, (1, 3, 32, 32))
    noisy = (x + torch.randn(x.shape, generator=torch.Generator().manual_seed(0)) * 0.5).clamp(0, 1)
    value = ssim_loss(noisy, x).item()
    assert 0 < value <= 1


def test_ssim_interior_matches_skimage():
    rng = np.random.default_rng(0)
    a = rng.random((32, 40, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ta = torch.from_numpy(a.transpose(2, 0, 1)).unsqueeze(0)
    tb = torch.from_numpy(b.transpose(2, 0, 1)).unsqueeze(0)
    ours = ssim_map(ta, tb)[..., 5:-5, 5:-5].mean().item()
    ref = structural_similarity(
        a, b, data_range=1.0, channel_axis=2, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False,
    )
    assert ours == pytest.approx(ref, abs=1e-6)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim_loss(torch.zeros(1, 3, 5, 5), torch.zeros(1, 3, 5, 5))


def test_ssim_gradient():
    pred = rand_img(32, (1, 3, 8, 8), torch.float64).requires_grad_()
    ref = rand_img(33, (1, 3, 8, 8), torch.float64)
    errors = check_gradients(lambda: ssim_loss(pred, ref), {"pred": pred})
    assert errors["pred"] < 1e-3


# --- hybrid losses ----------------------------------------------------------


def _cc_inputs(seed):
    raw, ref = rand_img(seed), rand_img(seed + 1)
    ref_chroma, _ = split_lab(rgb_to_lab(ref))
    return raw, ref_chroma, reference_rgb_hat(ref, raw)


def test_hybrid_cc_perfect_prediction(extractor):
    raw, ref_chroma, ref_hat = _cc_inputs(40)
    terms = hybrid_cc_loss(ref_chroma.clone(), ref_chroma, ref_hat, raw, extractor, LossWeights())
    assert terms.total.item() == pytest.approx(0.0, abs=1e-6)


def test_hybrid_cc_lambda_zero_is_color_loss(extractor):
    raw, ref_chroma, ref_hat = _cc_inputs(42)
    pred = torch.tanh(rand_img(44, (1, 2, 16, 16)) * 2 - 1)
    terms = hybrid_cc_loss(pred, ref_chroma, ref_hat, raw, extractor, LossWeights(lambda_cc=0.0))
    assert terms.total.item() == color_loss(pred, ref_chroma).item()


def test_hybrid_cc_composition(extractor):
    from cclnet.color import chroma_to_rgb

    raw, ref_chroma, ref_hat = _cc_inputs(46)
    pred = torch.tanh(rand_img(48, (1, 2, 16, 16)) * 2 - 1)
    w = LossWeights()
    terms = hybrid_cc_loss(pred, ref_chroma, ref_hat, raw, extractor, w)
    _, raw_L = split_lab(rgb_to_lab(raw))
    anchor = chroma_to_rgb(pred, raw_L)
    manual = color_loss(pred, ref_chroma) + 0.5 * contrastive_loss(anchor, ref_hat, raw, extractor, w, 100.0)
    assert terms.total.item() == pytest.approx(manual.item(), rel=1e-6)
    assert terms.ctr.item() > 0


def test_hybrid_cc_without_contrastive(extractor):
    raw, ref_chroma, ref_hat = _cc_inputs(50)
    pred = torch.zeros_like(ref_chroma)
    terms = hybrid_cc_loss(pred, ref_chroma, ref_hat, raw, None, LossWeights(), use_contrastive=False)
    assert terms.total.item() == color_loss(pred, ref_chroma).item()
    assert terms.ctr.item() == 0.0


def test_hybrid_hr_perfect_prediction(extractor):
    ref, cc = rand_img(60), rand_img(61)
    terms = hybrid_hr_loss(ref.clone(), ref, cc, extractor, LossWeights())
    assert terms.total.item() == pytest.approx(0.0, abs=1e-6)


def test_hybrid_hr_lambda_zero_is_ssim_loss(extractor):
    pred, ref, cc = rand_img(62), rand_img(63), rand_img(64)
    terms = hybrid_hr_loss(pred, ref, cc, extractor, LossWeights(lambda_hr=0.0))
    assert terms.total.item() == ssim_loss(pred, ref).item()


def test_hybrid_hr_composition(extractor):
    pred, ref, cc = rand_img(65), rand_img(66), rand_img(67)
    w = LossWeights()
    terms = hybrid_hr_loss(pred, ref, cc, extractor, w)
    manual = ssim_loss(pred, ref) + 0.5 * contrastive_loss(pred, ref, cc, extractor, w, 1.0)
    assert terms.total.item() == pytest.approx(manual.item(), rel=1e-6)


def test_losses_non_negative(extractor):
    w = LossWeights()
    for seed in range(5):
        a, p, n = rand_img(seed), rand_img(seed + 10), rand_img(seed + 20)
        assert contrastive_loss(a, p, n, extractor, w, 1.0) >= 0
        assert ssim_loss(a, p) >= 0
        assert color_loss(a[:, :2], p[:, :2]) >= 0
