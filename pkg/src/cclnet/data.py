"""Paired datasets, training augmentation and a synthetic underwater corpus.

On-disk layout of a paired dataset::

    root/[split/]raw/<name>.png|jpg
    root/[split/]reference/<name>.png|jpg

References are matched by file name first and then by stem, so a PNG
stage-1 output can be paired with a JPEG reference.
"""

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch.utils.data import Dataset

from .images import list_images, load_image, save_image, to_numpy, to_tensor

logger = logging.getLogger(__name__)

TRAIN_SIZE = 256


@dataclass
class PairedSample:
    id: str
    raw: np.ndarray
    reference: np.ndarray | None = None

    def __post_init__(self):
        if self.reference is not None and self.reference.shape != self.raw.shape:
            raise ValueError(
                f"{self.id}: raw {self.raw.shape} and reference {self.reference.shape} differ"
            )


@dataclass
class DatasetManifest:
    root: Path
    split: str
    ids: list[str]
    raw_paths: dict[str, Path]
    ref_paths: dict[str, Path | None]
    augmentation: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def paired_ids(self) -> list[str]:
        return [i for i in self.ids if self.ref_paths.get(i) is not None]

    def load(self, sample_id: str) -> PairedSample:
        raw = load_image(self.raw_paths[sample_id])
        ref_path = self.ref_paths.get(sample_id)
        ref = load_image(ref_path) if ref_path is not None else None
        return PairedSample(sample_id, raw, ref)

    def to_dict(self) -> dict:
        return {
            "root": str(self.root),
            "split": self.split,
            "ids": list(self.ids),
            "raw": {i: str(p) for i, p in self.raw_paths.items()},
            "reference": {i: (str(p) if p else None) for i, p in self.ref_paths.items()},
            "augmentation": dict(self.augmentation),
        }


def _split_dir(root: Path, split: str) -> Path:
    if split and (root / split / "raw").is_dir():
        return root / split
    return root


def load_paired_dataset(root: str | Path, split: str = "train") -> DatasetManifest:
    """Index ``root/raw`` against ``root/reference``; ids are sorted file stems.

    Raw images without a reference are kept as no-reference samples.
    """
    root = Path(root)
    base = _split_dir(root, split)
    raw_dir, ref_dir = base / "raw", base / "reference"
    if not raw_dir.is_dir():
        raise FileNotFoundError(f"missing raw directory {raw_dir}")
    raws = list_images(raw_dir)
    if not raws:
        raise ValueError(f"no images in {raw_dir}")
    refs = list_images(ref_dir) if ref_dir.is_dir() else []
    by_name = {p.name: p for p in refs}
    by_stem = {p.stem: p for p in refs}

    raw_paths, ref_paths = {}, {}
    for p in raws:
        if p.stem in raw_paths:
            raise ValueError(f"duplicate id {p.stem!r} in {raw_dir}")
        raw_paths[p.stem] = p
        ref = by_name.get(p.name) or by_stem.get(p.stem)
        if ref is None:
            logger.warning("%s has no reference; treated as a no-reference sample", p.name)
        ref_paths[p.stem] = ref
    ids = sorted(raw_paths)
    return DatasetManifest(base, split, ids, raw_paths, ref_paths)


def sample_seed(seed: int, sample_id: str, epoch: int = 0) -> int:
    """Per-sample seed derived from the global seed, the id and the epoch."""
    return zlib.crc32(f"{seed}:{sample_id}:{epoch}".encode())


def resize(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    t = to_tensor(img).unsqueeze(0)
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return to_numpy(t).clip(0.0, 1.0)


def augment(
    sample: PairedSample,
    seed: int,
    size: int = TRAIN_SIZE,
    flip_prob: float = 0.5,
) -> PairedSample:
    """Resize raw and reference to ``size`` x ``size`` and flip both or neither."""
    rng = np.random.default_rng(seed)
    flip = rng.random() < flip_prob

    def apply(img):
        if img is None:
            return None
        img = resize(img, size)
        return np.ascontiguousarray(img[:, ::-1]) if flip else img

    return PairedSample(sample.id, apply(sample.raw), apply(sample.reference))


# --- synthetic degradation --------------------------------------------------


@dataclass
class DegradationParams:
    """Per-channel attenuation ``exp(-beta * depth)`` then veiling light.

    ``degraded = clean * exp(-beta * depth) * t + veil * (1 - t)``
    """

    attenuation: tuple[float, float, float] = (1.2, 0.25, 0.45)
    depth: float = 1.0
    transmission: float = 0.6
    veil: tuple[float, float, float] = (0.10, 0.55, 0.45)
    jitter: float = 0.0

    def validate(self) -> None:
        if not 0.0 < self.transmission <= 1.0:
            raise ValueError(f"transmission must be in (0, 1], got {self.transmission}")
        if min(self.attenuation) < 0 or self.depth < 0:
            raise ValueError("attenuation and depth must be non-negative")
        if not all(0.0 <= v <= 1.0 for v in self.veil):
            raise ValueError(f"veil colour must lie in [0, 1], got {self.veil}")
        if not 0.0 <= self.jitter < 1.0:
            raise ValueError(f"jitter must be in [0, 1), got {self.jitter}")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "greenish": DegradationParams((1.2, 0.25, 0.45), 1.0, 0.6, (0.10, 0.55, 0.45), 0.1),
    "bluish": DegradationParams((1.3, 0.45, 0.15), 1.0, 0.6, (0.05, 0.35, 0.60), 0.1),
    "turbid": DegradationParams((0.9, 0.35, 0.60), 1.0, 0.5, (0.40, 0.50, 0.35), 0.1),
}


def synth_degrade(clean: np.ndarray, params: DegradationParams, seed: int = 0) -> np.ndarray:
    """Apply a colour cast and haze to a clean HxWx3 image in [0, 1].

    With ``jitter > 0`` the transmission and veil colour are perturbed by a
    seeded relative amount, so one preset yields varied but reproducible
    degradations.
    """
    params.validate()
    clean = np.asarray(clean, dtype=np.float64)
    if clean.min() < 0 or clean.max() > 1:
        raise ValueError("clean image must lie in [0, 1]")
    t = params.transmission
    veil = np.array(params.veil, dtype=np.float64)
    if params.jitter > 0:
        rng = np.random.default_rng(seed)
        t = float(np.clip(t * (1 + rng.uniform(-params.jitter, params.jitter)), 1e-3, 1.0))
        veil = np.clip(veil * (1 + rng.uniform(-params.jitter, params.jitter, size=3)), 0.0, 1.0)
    direct = clean * np.exp(-np.asarray(params.attenuation) * params.depth)
    out = direct * t + veil * (1.0 - t)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def procedural_scene(size: int, seed: int) -> np.ndarray:
    """A colourful clean test scene: gradient, blobs, rectangles and texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0, c1 = rng.uniform(0.2, 0.9, size=(2, 3))
    angle = rng.uniform(0, np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.08, 0.3, size=2)
        color = rng.uniform(0.0, 1.0, size=3)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[mask] = color
    for _ in range(rng.integers(1, 4)):
        y0, x0 = rng.integers(0, size, size=2)
        h, w = rng.integers(size // 8, size // 3 + 1, size=2)
        img[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0.0, 1.0, size=3)
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=max(size / 64, 0.8))
    texture /= max(np.abs(texture).max(), 1e-9)
    img = img + 0.08 * texture[..., None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_synthetic_corpus(
    out_root: str | Path,
    count: int,
    preset: str = "greenish",
    seed: int = 0,
    size: int = 64,
    clean_images: list[Path] | None = None,
) -> DatasetManifest:
    """Write ``count`` degraded/clean pairs plus ``provenance.json``.

    Clean images are procedural unless ``clean_images`` is given, in which case
    they are cycled through and resized to ``size``.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if count < 1:
        raise ValueError("count must be >= 1")
    params = PRESETS[preset]
    out_root = Path(out_root)
    width = max(4, len(str(count - 1)))
    for i in range(count):
        name = f"{i:0{width}d}.png"
        if clean_images:
            clean = resize(load_image(clean_images[i % len(clean_images)]), size)
        else:
            clean = procedural_scene(size, sample_seed(seed, "clean", i))
        raw = synth_degrade(clean, params, sample_seed(seed, "degrade", i))
        save_image(out_root / "reference" / name, clean)
        save_image(out_root / "raw" / name, raw)
    provenance = {
        "generator": "cclnet.data.write_synthetic_corpus",
        "preset": preset,
        "params": params.to_dict(),
        "seed": seed,
        "count": count,
        "size": size,
        "clean_source": [str(p) for p in clean_images] if clean_images else "procedural",
    }
    (out_root / "provenance.json").write_text(json.dumps(provenance, indent=2))
    return load_paired_dataset(out_root)


class PairedImageDataset(Dataset):
    """Torch view of a manifest yielding augmented ``(3, H, W)`` tensors.

    ``negatives`` optionally maps ids to a third image (e.g. the raw input when
    stage 2 uses raw images as contrastive negatives); it receives the same
    resize and flip as the pair.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        size: int = TRAIN_SIZE,
        seed: int = 0,
        train: bool = True,
        negatives: dict[str, Path] | None = None,
    ):
        self.manifest = manifest
        self.ids = manifest.paired_ids
        if not self.ids:
            raise ValueError(f"dataset at {manifest.root} has no paired samples")
        self.size = size
        self.seed = seed
        self.train = train
        self.negatives = negatives
        self.epoch = 0
        if negatives is not None:
            missing = [i for i in self.ids if i not in negatives]
            if missing:
                raise ValueError(f"no negative image for ids {missing[:5]}")

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> dict:
        sid = self.ids[index]
        sample = self.manifest.load(sid)
        seed = sample_seed(self.seed, sid, self.epoch)
        flip_prob = 0.5 if self.train else 0.0
        out = augment(sample, seed, self.size, flip_prob)
        item = {"id": sid, "raw": to_tensor(out.raw), "reference": to_tensor(out.reference)}
        if self.negatives is not None:
            neg = augment(PairedSample(sid, load_image(self.negatives[sid])), seed, self.size, flip_prob)
            item["negative"] = to_tensor(neg.raw)
        return item
