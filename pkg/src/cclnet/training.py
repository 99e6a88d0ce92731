"""Two-stage cascaded training, LR schedule and checkpoint persistence.

Checkpoint directory layout::

    <dir>/model.pt          torch state dict
    <dir>/manifest.json     model name and config, train config, epoch,
                            parameter count, per-epoch loss history, seed, git hash
    <dir>/loss_log.csv      epoch,iter,loss_total,loss_main,loss_ctr,lr
    <dir>/epochs/epoch_NNN/ per-epoch snapshots (model.pt + manifest.json)
"""

import csv
import json
import logging
import math
import shutil
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader

from .ccnet import CCNet, CcNetConfig, build_ccnet, count_parameters
from .color import rgb_to_lab, split_lab, chroma_to_rgb
from .data import DatasetManifest, PairedImageDataset, load_paired_dataset
from .hrnet import HRNet, HrNetConfig, build_hrnet
from .images import load_image, save_image, to_numpy, to_tensor
from .losses import FeatureExtractor, LossWeights, hybrid_cc_loss, hybrid_hr_loss
from .pipeline import color_correct, remove_haze

logger = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "iter", "loss_total", "loss_main", "loss_ctr", "lr"]
NEGATIVE_SOURCES = ("cc_output", "raw")


@dataclass
class TrainConfig:
    stage: str = "cc"
    batch_size: int = 8
    epochs: int = 150
    lr_cc: float = 5e-4
    lr_hr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    decay_start_epoch: int = 75
    seed: int = 0
    use_contrastive: bool = True
    negative_source: str = "cc_output"
    image_size: int = 256
    grad_clip: float | None = None
    save_every: int = 1
    select: str = "last"
    single_thread: bool = False
    num_workers: int = 0
    backbone_weights: str | None = None
    cc_model: CcNetConfig = field(default_factory=CcNetConfig)
    hr_model: HrNetConfig = field(default_factory=HrNetConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.cc_model, dict):
            self.cc_model = CcNetConfig(**self.cc_model)
        if isinstance(self.hr_model, dict):
            hr = dict(self.hr_model)
            if "scale_widths" in hr:
                hr["scale_widths"] = tuple(hr["scale_widths"])
            self.hr_model = HrNetConfig(**hr)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.validate()

    @property
    def lr(self) -> float:
        return self.lr_cc if self.stage == "cc" else self.lr_hr

    def validate(self) -> None:
        if self.stage not in ("cc", "hr"):
            raise ValueError(f"stage must be 'cc' or 'hr', got {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.decay_start_epoch < self.epochs:
            raise ValueError(
                f"decay_start_epoch ({self.decay_start_epoch}) must be in [0, epochs={self.epochs})"
            )
        if self.lr_cc <= 0 or self.lr_hr <= 0:
            raise ValueError("learning rates must be positive")
        if self.negative_source not in NEGATIVE_SOURCES:
            raise ValueError(f"negative_source must be one of {NEGATIVE_SOURCES}")
        if self.select not in ("last", "best"):
            raise ValueError("select must be 'last' or 'best'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cc_model"] = self.cc_model.to_dict()
        d["hr_model"] = self.hr_model.to_dict()
        d["loss_weights"] = self.loss_weights.to_dict()
        return d


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Constant LR, then linear decay towards 0 from ``decay_start_epoch``."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.decay_start_epoch:
        return config.lr
    return config.lr * (config.epochs - epoch) / (config.epochs - config.decay_start_epoch)


def _git_hash() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


MODEL_BUILDERS = {"ccnet": (CcNetConfig, build_ccnet), "hrnet": (HrNetConfig, build_hrnet)}


@dataclass
class Checkpoint:
    model_name: str
    state_dict: dict
    model_config: dict
    train_config: dict = field(default_factory=dict)
    epoch: int = 0
    parameter_count: int = 0
    loss_history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: nn.Module, **kwargs) -> "Checkpoint":
        name = "ccnet" if isinstance(model, CCNet) else "hrnet"
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(name, state, model.config.to_dict(), parameter_count=count_parameters(model), **kwargs)

    def build_model(self) -> nn.Module:
        config_cls, builder = MODEL_BUILDERS[self.model_name]
        cfg = dict(self.model_config)
        if "scale_widths" in cfg:
            cfg["scale_widths"] = tuple(cfg["scale_widths"])
        model = builder(config_cls(**cfg))
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def manifest(self) -> dict:
        return {
            "model": self.model_name,
            "model_config": self.model_config,
            "train_config": self.train_config,
            "epoch": self.epoch,
            "parameter_count": self.parameter_count,
            "loss_history": self.loss_history,
            **self.extra,
        }

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict, directory / "model.pt")
        (directory / "manifest.json").write_text(json.dumps(self.manifest(), indent=2))
        return directory

    @classmethod
    def load(cls, directory: str | Path, expect: str | None = None) -> "Checkpoint":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        name = manifest.pop("model")
        if name not in MODEL_BUILDERS:
            raise ValueError(f"{directory}: unknown model {name!r}")
        if expect is not None and name != expect:
            raise ValueError(f"{directory} holds a {name} checkpoint, expected {expect}")
        state = torch.load(directory / "model.pt", map_location="cpu", weights_only=True)
        return cls(
            name,
            state,
            manifest.pop("model_config"),
            manifest.pop("train_config", {}),
            manifest.pop("epoch", 0),
            manifest.pop("parameter_count", 0),
            manifest.pop("loss_history", []),
            manifest,
        )


class _LossLog:
    def __init__(self, path: Path | None):
        self.file = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.file = open(path, "w", newline="")
            self.writer = csv.writer(self.file)
            self.writer.writerow(LOG_HEADER)

    def write(self, epoch, it, total, main, ctr, lr):
        if self.file is not None:
            self.writer.writerow([epoch, it, f"{total:.8g}", f"{main:.8g}", f"{ctr:.8g}", f"{lr:.8g}"])

    def close(self):
        if self.file is not None:
            self.file.close()


def _dump_bad_batch(out_dir: Path | None, batch: dict, epoch: int, it: int) -> None:
    ids = list(batch["id"])
    msg = f"non-finite loss at epoch {epoch}, iteration {it}; batch ids {ids}"
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.save({k: v for k, v in batch.items()}, out_dir / "nan_batch.pt")
        msg += f" (batch dumped to {out_dir / 'nan_batch.pt'})"
    raise FloatingPointError(msg)


def _run(
    model: nn.Module,
    dataset: PairedImageDataset,
    config: TrainConfig,
    loss_fn,
    out_dir: Path | None,
) -> Checkpoint:
    if config.single_thread:
        torch.set_num_threads(1)
    gen = torch.Generator().manual_seed(config.seed)
    loader = DataLoader(
        dataset, batch_size=config.batch_size, shuffle=True, generator=gen,
        num_workers=config.num_workers,
    )
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    log = _LossLog(out_dir / "loss_log.csv" if out_dir else None)
    history = []
    best = (math.inf, None)
    extra = {"seed": config.seed, "git_hash": _git_hash()}
    if isinstance(model, CCNet):
        extra["notes"] = {"stem_channels": "2->width then width->width"}
    if config.stage == "hr":
        extra["negative_source"] = config.negative_source
    it = 0
    model.train()
    try:
        for epoch in range(config.epochs):
            lr = lr_at_epoch(config, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            dataset.set_epoch(epoch)
            sums = np.zeros(3)
            batches = 0
            for batch in loader:
                terms = loss_fn(model, batch)
                if not torch.isfinite(terms.total):
                    _dump_bad_batch(out_dir, batch, epoch, it)
                opt.zero_grad(set_to_none=True)
                terms.total.backward()
                if config.grad_clip:
                    nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                vals = [terms.total.item(), terms.main.item(), terms.ctr.item()]
                log.write(epoch, it, *vals, lr)
                sums += vals
                batches += 1
                it += 1
            mean = sums / max(batches, 1)
            history.append(
                {"epoch": epoch, "loss_total": mean[0], "loss_main": mean[1], "loss_ctr": mean[2], "lr": lr}
            )
            logger.info("epoch %d/%d loss %.5f lr %.3g", epoch + 1, config.epochs, mean[0], lr)
            ckpt = Checkpoint.from_model(
                model, train_config=config.to_dict(), epoch=epoch,
                loss_history=list(history), extra=dict(extra),
            )
            if mean[0] < best[0]:
                best = (mean[0], ckpt)
            if out_dir is not None and config.save_every and (epoch + 1) % config.save_every == 0:
                ckpt.save(out_dir / "epochs" / f"epoch_{epoch:03d}")
    finally:
        log.close()
    final = best[1] if config.select == "best" else ckpt
    final.loss_history = list(history)
    if out_dir is not None:
        final.save(out_dir)
    model.eval()
    return final


def train_stage1(
    dataset: DatasetManifest,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    extractor: FeatureExtractor | None = None,
) -> Checkpoint:
    """Train CC-Net on raw/reference pairs with the hybrid colour loss.

    With ``use_contrastive=False`` only the colour loss is optimised.
    """
    if config.stage != "cc":
        raise ValueError("train_stage1 needs stage='cc'")
    model = build_ccnet(config.cc_model, config.seed)
    weights = config.loss_weights
    if config.use_contrastive and extractor is None:
        extractor = FeatureExtractor(config.backbone_weights, seed=config.seed)
    ds = PairedImageDataset(dataset, config.image_size, config.seed, train=True)

    def loss_fn(model, batch):
        raw, ref = batch["raw"], batch["reference"]
        ref_chroma, _ = split_lab(rgb_to_lab(ref))
        _, raw_L = split_lab(rgb_to_lab(raw))
        pred_chroma, _ = color_correct(model, raw)
        ref_hat = chroma_to_rgb(ref_chroma, raw_L)
        return hybrid_cc_loss(pred_chroma, ref_chroma, ref_hat, raw, extractor, weights, config.use_contrastive)

    return _run(model, ds, config, loss_fn, Path(out_dir) if out_dir else None)


def train_stage2(
    cc_outputs: DatasetManifest,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    raw_dataset: DatasetManifest | None = None,
    extractor: FeatureExtractor | None = None,
) -> Checkpoint:
    """Train HR-Net on stage-1 outputs paired with their references.

    The contrastive negative is the stage-1 output itself, or with
    ``negative_source='raw'`` the original raw image from ``raw_dataset``
    (found automatically from a stage-1 manifest when omitted). Raw images
    are never used as network input.
    """
    if config.stage != "hr":
        raise ValueError("train_stage2 needs stage='hr'")
    model = build_hrnet(config.hr_model, config.seed)
    weights = config.loss_weights
    if config.use_contrastive and extractor is None:
        extractor = FeatureExtractor(config.backbone_weights, seed=config.seed)
    negatives = None
    if config.use_contrastive and config.negative_source == "raw":
        negatives = _raw_sources(cc_outputs, raw_dataset)
    ds = PairedImageDataset(cc_outputs, config.image_size, config.seed, train=True, negatives=negatives)

    def loss_fn(model, batch):
        cc, ref = batch["raw"], batch["reference"]
        pred = remove_haze(model, cc)
        negative = batch.get("negative", cc)
        return hybrid_hr_loss(pred, ref, negative, extractor, weights, config.use_contrastive)

    return _run(model, ds, config, loss_fn, Path(out_dir) if out_dir else None)


STAGE1_MANIFEST = "stage1_manifest.json"


def _raw_sources(cc_outputs: DatasetManifest, raw_dataset: DatasetManifest | None) -> dict[str, Path]:
    if raw_dataset is not None:
        return dict(raw_dataset.raw_paths)
    manifest = cc_outputs.root / STAGE1_MANIFEST
    if not manifest.is_file():
        raise ValueError("negative_source='raw' needs raw_dataset or a stage-1 manifest")
    entries = json.loads(manifest.read_text())["samples"]
    return {e["id"]: Path(e["source_raw"]) for e in entries}


@torch.no_grad()
def generate_stage1_outputs(
    checkpoint: Checkpoint,
    dataset: DatasetManifest,
    out_dir: str | Path,
) -> DatasetManifest:
    """Write CC-Net results for every raw image as a new paired dataset.

    ``out_dir/raw`` receives the colour-corrected images (PNG, native size),
    ``out_dir/reference`` a copy of each reference, and ``stage1_manifest.json``
    records where everything came from.
    """
    if checkpoint.model_name != "ccnet":
        raise ValueError(f"expected a ccnet checkpoint, got {checkpoint.model_name}")
    model = checkpoint.build_model()
    out_dir = Path(out_dir)
    (out_dir / "raw").mkdir(parents=True, exist_ok=True)
    entries = []
    for sid in dataset.ids:
        src = dataset.raw_paths[sid]
        try:
            raw = load_image(src)
        except (OSError, ValueError) as exc:
            logger.warning("skipping unreadable %s: %s", src, exc)
            continue
        _, cc_rgb = color_correct(model, to_tensor(raw).unsqueeze(0))
        out_path = out_dir / "raw" / f"{sid}.png"
        save_image(out_path, to_numpy(cc_rgb))
        ref_src = dataset.ref_paths.get(sid)
        ref_dst = None
        if ref_src is not None:
            ref_dst = out_dir / "reference" / ref_src.name
            ref_dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(ref_src, ref_dst)
        entries.append(
            {
                "id": sid,
                "cc_output": str(out_path),
                "reference": str(ref_dst) if ref_dst else None,
                "source_raw": str(src),
            }
        )
    manifest = {
        "checkpoint_epoch": checkpoint.epoch,
        "source_root": str(dataset.root),
        "samples": entries,
    }
    (out_dir / STAGE1_MANIFEST).write_text(json.dumps(manifest, indent=2))
    return load_paired_dataset(out_dir)
