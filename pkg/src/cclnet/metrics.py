"""Full-reference (PSNR, SSIM) and underwater no-reference (UIQM, UCIQE) metrics.

Metric functions take HxWx3 RGB arrays in [0, 1] and return Python floats.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .color import rgb_to_lab
from .images import list_images, load_image, to_tensor
from .losses import ssim_loss

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0

# UIQM coefficients from the metric's original definition
UIQM_C1, UIQM_C2, UIQM_C3 = 0.0282, 0.2953, 3.5753
UICM_ALPHA = 0.1
UISM_WEIGHTS = (0.299, 0.587, 0.114)
BLOCK = 10

# UCIQE coefficients from the metric's original definition
UCIQE_C1, UCIQE_C2, UCIQE_C3 = 0.4680, 0.2745, 0.2576


def _check_pair(pred: np.ndarray, ref: np.ndarray) -> None:
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")


def psnr(pred: np.ndarray, ref: np.ndarray) -> float:
    """PSNR in dB for data range 1, capped at 100 dB (so identical images give 100)."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_pair(pred, ref)
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_index(pred: np.ndarray, ref: np.ndarray) -> float:
    """Mean windowed SSIM; the same kernel as the training loss, in float64."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    _check_pair(pred, ref)
    a = to_tensor(pred, torch.float64).unsqueeze(0)
    b = to_tensor(ref, torch.float64).unsqueeze(0)
    return float(1.0 - ssim_loss(a, b))


# --- UIQM -------------------------------------------------------------------


def _trimmed_mean(x: np.ndarray, alpha_low: float = UICM_ALPHA, alpha_high: float = UICM_ALPHA) -> float:
    x = np.sort(x, axis=None)
    k = x.size
    lo = math.ceil(alpha_low * k)
    hi = math.floor(alpha_high * k)
    kept = x[lo : k - hi]
    return float(kept.mean()) if kept.size else float(x.mean())


def uicm(img255: np.ndarray) -> float:
    """Colourfulness from alpha-trimmed RG / YB opponent statistics."""
    r, g, b = img255[..., 0], img255[..., 1], img255[..., 2]
    rg = r - g
    yb = (r + g) / 2.0 - b
    mu_rg, mu_yb = _trimmed_mean(rg), _trimmed_mean(yb)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    return -0.0268 * math.sqrt(mu_rg**2 + mu_yb**2) + 0.1586 * math.sqrt(var_rg + var_yb)


def _blocks(ch: np.ndarray, block: int) -> np.ndarray:
    """Non-overlapping ``block`` x ``block`` tiles; remainder rows/cols dropped."""
    k2, k1 = ch.shape[0] // block, ch.shape[1] // block
    ch = ch[: k2 * block, : k1 * block]
    return ch.reshape(k2, block, k1, block).swapaxes(1, 2).reshape(k2 * k1, block * block)


def eme(ch: np.ndarray, block: int = BLOCK) -> float:
    tiles = _blocks(ch, block)
    if tiles.shape[0] == 0:
        return 0.0
    mx, mn = tiles.max(axis=1), tiles.min(axis=1)
    ok = (mn > 0) & (mx > 0)
    total = np.sum(np.log(mx[ok] / mn[ok]))
    return float(2.0 / tiles.shape[0] * total)


def _sobel_magnitude(ch: np.ndarray) -> np.ndarray:
    return np.hypot(ndimage.sobel(ch, axis=0), ndimage.sobel(ch, axis=1))


def uism(img255: np.ndarray) -> float:
    """Sharpness: weighted EME of each channel's Sobel-edge-weighted image."""
    total = 0.0
    for c, lam in enumerate(UISM_WEIGHTS):
        ch = img255[..., c]
        total += lam * eme(ch * _sobel_magnitude(ch))
    return total


def logamee(ch: np.ndarray, block: int = BLOCK) -> float:
    tiles = _blocks(ch, block)
    if tiles.shape[0] == 0:
        return 0.0
    mx, mn = tiles.max(axis=1), tiles.min(axis=1)
    top, bot = mx - mn, mx + mn
    ok = (top > 0) & (bot > 0)
    ratio = top[ok] / bot[ok]
    # ratio <= 1 so each term is <= 0; negate for a non-negative contrast score
    return float(-np.sum(ratio * np.log(ratio)) / tiles.shape[0])


def uiconm(img255: np.ndarray) -> float:
    """Contrast: log-AMEE of the intensity image."""
    intensity = img255 @ np.array(UISM_WEIGHTS)
    return logamee(intensity)


def uiqm(img: np.ndarray) -> float:
    img255 = np.asarray(img, dtype=np.float64) * 255.0
    return UIQM_C1 * uicm(img255) + UIQM_C2 * uism(img255) + UIQM_C3 * uiconm(img255)


# --- UCIQE ------------------------------------------------------------------


def _lab(img: np.ndarray) -> np.ndarray:
    lab = rgb_to_lab(to_tensor(np.asarray(img, dtype=np.float64), torch.float64))
    return lab.permute(1, 2, 0).numpy()


def hsv_saturation(img: np.ndarray) -> np.ndarray:
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    return np.divide(mx - mn, mx, out=np.zeros_like(mx), where=mx > 0)


def uciqe(img: np.ndarray) -> float:
    """Chroma spread, luminance contrast and mean saturation, weighted.

    Lab L and chroma are divided by 100; contrast is the mean of the
    brightest 1% of L minus the mean of the darkest 1%.
    """
    img = np.asarray(img, dtype=np.float64)
    lab = _lab(img)
    L = lab[..., 0].ravel() / 100.0
    chroma = np.hypot(lab[..., 1], lab[..., 2]).ravel() / 100.0
    sigma_c = float(np.std(chroma))
    n = max(1, int(round(0.01 * L.size)))
    sl = np.sort(L)
    con_l = float(sl[-n:].mean() - sl[:n].mean())
    mu_s = float(hsv_saturation(img).mean())
    return UCIQE_C1 * sigma_c + UCIQE_C2 * con_l + UCIQE_C3 * mu_s


# --- batch evaluation -------------------------------------------------------


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    means: dict = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    with_reference: bool = True

    @property
    def columns(self) -> list[str]:
        return ["psnr", "ssim", "uiqm", "uciqe"] if self.with_reference else ["uiqm", "uciqe"]

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["id", *self.columns])
            for row in self.rows:
                writer.writerow([row["id"], *(f"{row[c]:.6f}" for c in self.columns)])
            writer.writerow(["mean", *(f"{self.means[c]:.6f}" for c in self.columns)])


def _match_reference(pred: Path, ref_dir: Path) -> Path | None:
    exact = ref_dir / pred.name
    if exact.is_file():
        return exact
    for cand in list_images(ref_dir):
        if cand.stem == pred.stem:
            return cand
    return None


def _score(pred_path: Path, ref_path: Path | None) -> dict:
    pred = load_image(pred_path)
    row = {"id": pred_path.stem}
    if ref_path is not None:
        ref = load_image(ref_path)
        if ref.shape != pred.shape:
            raise ValueError(f"{pred_path.name}: size {pred.shape} differs from reference {ref.shape}")
        row["psnr"] = psnr(pred, ref)
        row["ssim"] = ssim_index(pred, ref)
    row["uiqm"] = uiqm(pred)
    row["uciqe"] = uciqe(pred)
    return row


def evaluate_dataset(
    pred_dir: str | Path,
    ref_dir: str | Path | None = None,
    jobs: int = 1,
) -> MetricReport:
    """Score every image in ``pred_dir``; with ``ref_dir`` also PSNR/SSIM.

    Predictions without a reference (matched by file name, then by stem) are
    skipped with a warning. Raises ``ValueError`` if nothing could be scored.
    """
    pred_dir = Path(pred_dir)
    preds = list_images(pred_dir)
    if not preds:
        raise ValueError(f"no images in {pred_dir}")
    report = MetricReport(with_reference=ref_dir is not None)
    tasks = []
    for p in preds:
        ref = None
        if ref_dir is not None:
            ref = _match_reference(p, Path(ref_dir))
            if ref is None:
                logger.warning("no reference for %s, skipping", p.name)
                report.skipped.append(p.stem)
                continue
        tasks.append((p, ref))
    if not tasks:
        raise ValueError(f"no prediction in {pred_dir} has a reference in {ref_dir}")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda t: _score(*t), tasks))
    else:
        rows = [_score(*t) for t in tasks]
    report.rows = sorted(rows, key=lambda r: r["id"])
    report.means = {c: float(np.mean([r[c] for r in report.rows])) for c in report.columns}
    return report
