"""Command-line entry point: ``cclnet {train,enhance,evaluate,grid,synth}``.

A JSON config file (``--config``) may hold any :class:`TrainConfig` field;
explicit flags override it. Exit status is 0 only when every requested
output was written.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from PIL import Image, ImageDraw

from .data import PRESETS, load_paired_dataset, write_synthetic_corpus
from .images import list_images, load_image, save_image, to_numpy, to_tensor
from .losses import BACKBONE_ENV, FeatureExtractor
from .metrics import evaluate_dataset
from .pipeline import enhance
from .training import (
    Checkpoint,
    TrainConfig,
    generate_stage1_outputs,
    train_stage1,
    train_stage2,
)

logger = logging.getLogger("cclnet")

# flag dest -> TrainConfig field
TRAIN_FLAGS = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr_cc": "lr_cc",
    "lr_hr": "lr_hr",
    "beta1": "beta1",
    "decay_start_epoch": "decay_start_epoch",
    "image_size": "image_size",
    "seed": "seed",
    "negative_source": "negative_source",
    "backbone_weights": "backbone_weights",
    "select": "select",
    "grad_clip": "grad_clip",
}


class CliError(Exception):
    pass


def build_train_config(args: argparse.Namespace, stage: str) -> TrainConfig:
    values = {}
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
    for flag, key in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if args.no_contrastive:
        values["use_contrastive"] = False
    if args.deterministic:
        values["single_thread"] = True
    if args.jobs is not None:
        # --jobs counts the main process too
        values["num_workers"] = max(0, args.jobs - 1)
    values["stage"] = stage
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from exc


def _echo_config(config: TrainConfig, out_dir: Path, name: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(config.to_dict(), indent=2)
    logger.info("effective %s config:\n%s", name, text)
    (out_dir / f"{name}_config.json").write_text(text)


def cmd_train(args: argparse.Namespace) -> int:
    root = Path(args.dataset_root)
    if not root.is_dir():
        raise CliError(f"dataset root {root} does not exist")
    out = Path(args.out)
    try:
        dataset = load_paired_dataset(root, args.split)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    stages = ["cc", "hr"] if args.stage == "all" else [args.stage]
    configs = {s: build_train_config(args, s) for s in stages}
    extractor = None
    if any(c.use_contrastive for c in configs.values()):
        c = next(iter(configs.values()))
        extractor = FeatureExtractor(c.backbone_weights, seed=c.seed)
        if not extractor.pretrained:
            logger.warning("no backbone weights (set %s); using a random frozen VGG-19", BACKBONE_ENV)

    run = {"stages": stages}
    if "cc" in configs:
        _echo_config(configs["cc"], out, "cc")
        ckpt = train_stage1(dataset, configs["cc"], out / "cc", extractor)
        stage1 = generate_stage1_outputs(ckpt, dataset, out / "stage1")
        run["cc"] = {"checkpoint": str(out / "cc"), "parameter_count": ckpt.parameter_count}
        run["stage1_outputs"] = str(out / "stage1")
    else:
        stage1 = dataset
    if "hr" in configs:
        _echo_config(configs["hr"], out, "hr")
        raw = load_paired_dataset(args.raw_root) if args.raw_root else None
        if configs["hr"].negative_source == "raw" and raw is None and "cc" in configs:
            raw = dataset
        ckpt = train_stage2(stage1, configs["hr"], out / "hr", raw_dataset=raw, extractor=extractor)
        run["hr"] = {
            "checkpoint": str(out / "hr"),
            "parameter_count": ckpt.parameter_count,
            "negative_source": configs["hr"].negative_source,
        }
    if "cc" in run and "hr" in run:
        run["total_parameter_count"] = run["cc"]["parameter_count"] + run["hr"]["parameter_count"]
    (out / "run_manifest.json").write_text(json.dumps(run, indent=2))
    return 0


def cmd_enhance(args: argparse.Namespace) -> int:
    try:
        cc_model = Checkpoint.load(args.cc_ckpt, expect="ccnet").build_model()
        hr_model = Checkpoint.load(args.hr_ckpt, expect="hrnet").build_model()
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        raise CliError(f"cannot load checkpoints: {exc}") from exc
    inputs = list_images(args.input_dir)
    if not inputs:
        raise CliError(f"no images in {args.input_dir}")
    out = Path(args.out)
    failed = 0
    for path in inputs:
        try:
            raw = to_tensor(load_image(path)).unsqueeze(0)
        except OSError as exc:
            logger.warning("skipping %s: %s", path, exc)
            failed += 1
            continue
        cc, final = enhance(cc_model, hr_model, raw)
        save_image(out / f"{path.stem}.png", to_numpy(final))
        if args.emit_intermediate:
            save_image(out / "cc" / f"{path.stem}.png", to_numpy(cc))
    return 1 if failed else 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    try:
        report = evaluate_dataset(args.pred_dir, args.ref_dir, jobs=args.jobs)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    report.to_csv(args.out)
    for k, v in report.means.items():
        print(f"{k}: {v:.4f}")
    if report.skipped:
        print(f"skipped {len(report.skipped)} without reference: {', '.join(report.skipped)}")
    return 0


def make_grid(dirs: list[Path], labels: list[str], cell_height: int = 128) -> Image.Image:
    """Rows are image ids, columns follow ``dirs``; a header row holds labels."""
    id_sets = [{p.stem: p for p in list_images(d)} for d in dirs]
    all_ids = set().union(*id_sets)
    diffs = {str(d): sorted(all_ids - set(s)) for d, s in zip(dirs, id_sets) if all_ids - set(s)}
    if diffs:
        raise CliError("image ids differ between directories; missing: " + json.dumps(diffs))
    ids = sorted(all_ids)
    if not ids:
        raise CliError("no images found")
    cells = []
    for sid in ids:
        row = []
        for s in id_sets:
            im = Image.open(s[sid]).convert("RGB")
            w = max(1, round(im.width * cell_height / im.height))
            row.append(im.resize((w, cell_height), Image.BILINEAR))
        cells.append(row)
    col_w = [max(r[c].width for r in cells) for c in range(len(dirs))]
    header = 20
    grid = Image.new("RGB", (sum(col_w), header + cell_height * len(ids)), "white")
    draw = ImageDraw.Draw(grid)
    x = 0
    for c, label in enumerate(labels):
        draw.text((x + 4, 4), label, fill="black")
        for r, row in enumerate(cells):
            grid.paste(row[c], (x, header + r * cell_height))
        x += col_w[c]
    return grid


def cmd_grid(args: argparse.Namespace) -> int:
    dirs = [Path(d) for d in args.dirs]
    for d in dirs:
        if not d.is_dir():
            raise CliError(f"{d} is not a directory")
    labels = args.labels or [d.name for d in dirs]
    if len(labels) != len(dirs):
        raise CliError("need one label per directory")
    grid = make_grid(dirs, labels, args.cell_height)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    grid.save(out, format="PNG")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    clean = list_images(args.clean_dir) if args.clean_dir else None
    if args.clean_dir and not clean:
        raise CliError(f"no clean images in {args.clean_dir}")
    manifest = write_synthetic_corpus(args.out, args.count, args.preset, args.seed, args.size, clean)
    print(f"wrote {len(manifest)} pairs to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cclnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train CC-Net, HR-Net or the full cascade")
    p.add_argument("dataset_root", help="paired dataset (root/raw, root/reference)")
    p.add_argument("--stage", choices=["cc", "hr", "all"], default="all")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--split", default="train")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-cc", type=float)
    p.add_argument("--lr-hr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--decay-start-epoch", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-contrastive", action="store_true", help="ablation: drop the contrastive terms")
    p.add_argument("--negative-source", choices=["cc_output", "raw"], help="stage-2 negative ('raw' = RAN ablation)")
    p.add_argument("--raw-root", help="raw dataset for --negative-source raw with --stage hr")
    p.add_argument("--backbone-weights", help=f"VGG-19 state dict (default: ${BACKBONE_ENV})")
    p.add_argument("--select", choices=["last", "best"], help="which epoch to keep as the final checkpoint")
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--jobs", type=int, help="data loading processes")
    p.add_argument("--deterministic", action="store_true", help="single-threaded reproducible mode")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="run the trained cascade on a directory")
    p.add_argument("input_dir")
    p.add_argument("--cc-ckpt", required=True)
    p.add_argument("--hr-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-intermediate", action="store_true", help="also write stage-1 images to OUT/cc")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="PSNR/SSIM/UIQM/UCIQE report as CSV")
    p.add_argument("pred_dir")
    p.add_argument("--ref-dir")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="side-by-side comparison image")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", nargs="+")
    p.add_argument("--cell-height", type=int, default=128)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("synth", help="write a synthetic paired underwater corpus")
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--preset", choices=sorted(PRESETS), default="greenish")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--clean-dir", help="use these clean images instead of procedural scenes")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cclnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
