import csv
import math

import numpy as np
import pytest
import torch

from cclnet.images import save_image, to_tensor
from cclnet.losses import ssim_loss
from cclnet.metrics import evaluate_dataset, psnr, ssim_index, uciqe, uicm, uiqm

from oracles import uciqe_oracle, uicm_oracle, uiqm_oracle

# Frozen outputs of the loop-based oracles on the images below.
GOLDEN = {
    "ramp": (1.8944201855026732, 0.5408745402407789),
    "checker": (1.3954512667806844, 0.33033535085019267),
    "noise": (4.216691895230939, 0.4433073060772461),
}


def golden_images():
    yy, xx = np.mgrid[0:20, 0:20]
    ramp = np.stack([xx / 19.0, yy / 19.0, 0.5 * (1 - xx / 19.0)], -1)
    on = (((yy // 3 + xx // 3) % 2) == 1)[..., None]
    checker = np.where(on, np.array([0.1, 0.6, 0.7]), np.array([0.05, 0.3, 0.35]))
    noise = np.random.default_rng(7).random((20, 20, 3)) * 0.8 + 0.1
    return {"ramp": ramp, "checker": checker, "noise": noise}


# --- PSNR / SSIM ------------------------------------------------------------


def test_psnr_closed_forms():
    img = np.random.default_rng(0).random((8, 8, 3)) * 0.8
    assert psnr(img, img) == 100.0
    assert psnr(img + 0.1, img) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(0.0, abs=1e-12)


def test_psnr_symmetric_and_validated():
    rng = np.random.default_rng(1)
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, b[:4])


def test_ssim_index_properties():
    rng = np.random.default_rng(2)
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    assert ssim_index(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim_index(a, b) == pytest.approx(ssim_index(b, a), abs=1e-12)
    loss = ssim_loss(to_tensor(a, torch.float64)[None], to_tensor(b, torch.float64)[None])
    assert ssim_index(a, b) == 1.0 - float(loss)


def test_ssim_index_noise_near_zero():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        assert abs(ssim_index(rng.random((64, 64, 3)), rng.random((64, 64, 3)))) < 0.1


# --- UIQM / UCIQE -----------------------------------------------------------


def test_uicm_hand_checked_4x4():
    # Left half pure red, right half black. 16 pixels, trim ceil(1.6)=2 low, floor(1.6)=1 high,
    # leaving 6 zeros and 7 ones (in units of 255 for RG, 127.5 for YB).
    img = np.zeros((4, 4, 3))
    img[:, :2, 0] = 1.0
    mu_rg, mu_yb = 255 * 7 / 13, 127.5 * 7 / 13
    var_rg = 0.5 * (255 - mu_rg) ** 2 + 0.5 * mu_rg**2
    var_yb = 0.5 * (127.5 - mu_yb) ** 2 + 0.5 * mu_yb**2
    expected = -0.0268 * math.hypot(mu_rg, mu_yb) + 0.1586 * math.sqrt(var_rg + var_yb)
    assert uicm_oracle(img.tolist()) == pytest.approx(expected, rel=1e-12)
    assert uicm(img * 255) == pytest.approx(expected, rel=1e-12)
    # no 10x10 block fits, so the sharpness and contrast terms vanish
    assert uiqm(img) == pytest.approx(0.0282 * expected, rel=1e-12)


def test_uciqe_hand_checked_4x4():
    # Black and white halves: no chroma spread, contrast 1, saturation 0.
    img = np.zeros((4, 4, 3))
    img[:, 2:] = 1.0
    # the oracle's rounded white point puts white at L = 100 only to ~1e-5
    assert uciqe_oracle(img.tolist()) == pytest.approx(0.2745, abs=1e-6)
    assert uciqe(img) == pytest.approx(0.2745, abs=1e-6)


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_values(name):
    img = golden_images()[name]
    want_uiqm, want_uciqe = GOLDEN[name]
    assert uiqm_oracle(img.tolist()) == pytest.approx(want_uiqm, rel=1e-12)
    assert uciqe_oracle(img.tolist()) == pytest.approx(want_uciqe, rel=1e-12)
    assert uiqm(img) == pytest.approx(want_uiqm, rel=1e-9)
    assert uciqe(img) == pytest.approx(want_uciqe, abs=1e-6)


@pytest.mark.parametrize("v", [0.0, 0.3, 0.5, 1.0])
def test_constant_gray(v):
    img = np.full((16, 16, 3), v)
    assert uicm(img * 255) == 0.0
    assert uciqe(img) == pytest.approx(0.0, abs=1e-9)
    assert math.isfinite(uiqm(img))


@pytest.mark.parametrize("color", [(0, 0, 0), (1, 1, 1), (0.1, 0.7, 0.4), (1, 0, 0)])
def test_metrics_finite_on_flat_images(color):
    img = np.broadcast_to(np.array(color, dtype=np.float64), (24, 24, 3)).copy()
    for fn in (uiqm, uciqe):
        assert math.isfinite(fn(img))
    assert math.isfinite(psnr(img, img)) and math.isfinite(ssim_index(img, img))


def test_translation_invariance_on_centre_crop():
    big = np.random.default_rng(3).random((48, 48, 3))
    crop = big[4:44, 4:44]
    shifted = np.roll(big, (3, -2), axis=(0, 1))[7:47, 2:42]
    assert np.array_equal(crop, shifted)
    assert uiqm(shifted) == uiqm(crop)
    assert uciqe(shifted) == uciqe(crop)


# --- evaluate_dataset -------------------------------------------------------


def _write_pairs(root, n=3, extra_pred=False):
    rng = np.random.default_rng(4)
    for i in range(n):
        ref = rng.random((24, 24, 3))
        save_image(root / "ref" / f"img{i}.png", ref)
        save_image(root / "pred" / f"img{i}.png", np.clip(ref + rng.normal(0, 0.05, ref.shape), 0, 1))
    if extra_pred:
        save_image(root / "pred" / "orphan.png", rng.random((24, 24, 3)))


def test_evaluate_with_reference(tmp_path):
    _write_pairs(tmp_path)
    report = evaluate_dataset(tmp_path / "pred", tmp_path / "ref")
    assert [r["id"] for r in report.rows] == ["img0", "img1", "img2"]
    for col in ("psnr", "ssim", "uiqm", "uciqe"):
        assert report.means[col] == pytest.approx(np.mean([r[col] for r in report.rows]), rel=1e-12)
    out = tmp_path / "m.csv"
    report.to_csv(out)
    rows = list(csv.reader(open(out, encoding="utf-8")))
    assert rows[0] == ["id", "psnr", "ssim", "uiqm", "uciqe"]
    assert len(rows) == 5 and rows[-1][0] == "mean"


def test_evaluate_without_reference(tmp_path):
    _write_pairs(tmp_path)
    report = evaluate_dataset(tmp_path / "pred")
    assert report.columns == ["uiqm", "uciqe"]
    assert "psnr" not in report.rows[0]


def test_evaluate_skips_unmatched(tmp_path):
    _write_pairs(tmp_path, extra_pred=True)
    report = evaluate_dataset(tmp_path / "pred", tmp_path / "ref", jobs=2)
    assert report.skipped == ["orphan"]
    assert len(report.rows) == 3


def test_evaluate_all_skipped_or_empty(tmp_path):
    _write_pairs(tmp_path)
    (tmp_path / "other").mkdir()
    with pytest.raises(ValueError):
        evaluate_dataset(tmp_path / "pred", tmp_path / "other")
    with pytest.raises(ValueError):
        evaluate_dataset(tmp_path / "other")
