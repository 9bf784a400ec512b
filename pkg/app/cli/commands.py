"""Command-line surface: preprocess, synth, train, eval, explain, stats.

Every command is a function of its inputs, flags and seed; per-item failures
are recorded in CSV logs and turn the exit code to 1.
"""

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from matplotlib import colormaps
from pydantic import BaseModel

from app.config import FOV_FALLBACKS, RunConfig, load_run_config
from app.dataset.augment import derive_seed
from app.dataset.manifest import QualityLabel, SampleRecord, encode_manifest, read_manifest
from app.dataset.stacking import ChannelStack, StackOrder, branch_inputs, load_stack, save_stack, stack_channels
from app.dataset.synthetic import DEFAULT_SIZE, generate_synthetic
from app.errors import (
    CorruptData,
    EmptyDataset,
    IoFailure,
    NoFovFound,
    SalStructError,
    UnsupportedFormat,
)
from app.evaluation.metrics import Metrics, confusion, metrics, mts_cdf
from app.evaluation.report import render_cdf, render_report, write_predictions, write_trials_summary
from app.fov.detector import preprocess_detailed
from app.nn.checkpoint import load_checkpoint, save_checkpoint
from app.nn.gradcam import grad_cam
from app.nn.model import predict
from app.nn.training import batch_inputs, train
from app.raster.image import RasterImage, decode_image, encode_pgm, encode_ppm, resize_array, resize_bilinear
from app.saliency.large_structures import detect_large, export_mask_pgm, export_saliency_pgm
from app.saliency.tiny_structures import detect_tiny, export_line_response_pgm

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".ppm", ".pgm", ".png", ".jpg", ".jpeg")
TRAIN_FRACTION = 0.8
STATS_THRESHOLDS = (1513, 2160)
OVERLAY_ALPHA = 0.5
PREPROCESS_LOG = "preprocess_log.csv"
CHECKPOINT_NAME = "model.siqa"


class PreprocessLogRow(BaseModel):
    image: str
    status: str
    cx: Optional[float] = None
    cy: Optional[float] = None
    r: Optional[float] = None
    m_ls: Optional[int] = None
    m_ts: Optional[int] = None
    error: str = ""

    def csv_row(self) -> List[str]:
        def fmt(value: Any) -> str:
            if value is None:
                return ""
            return repr(value) if isinstance(value, float) else str(value)

        return [fmt(getattr(self, name)) for name in PreprocessLogRow.model_fields]


# ---------------------------
# Shared helpers
# ---------------------------

def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


def _write_bytes(path: str, payload: bytes) -> None:
    try:
        with open(path, "wb") as f:
            f.write(payload)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _makedirs(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {path}: {e}") from e


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def build_stacks(
    img: RasterImage, resolution: int, detect_resolution: int, fallback: str, export_maps: bool = False
) -> Tuple[Dict[StackOrder, ChannelStack], PreprocessLogRow, Dict[str, bytes]]:
    """Preprocess, detect both structure masks at detect_resolution, then
    resample to resolution (image bilinear, masks nearest) and stack.

    With export_maps the detection-resolution P_LS, M_LS, R''_line and M_TS
    come back as PGM payloads keyed by file suffix.
    """
    result = preprocess_detailed(img, detect_resolution, fallback)
    saliency, ls_mask = detect_large(result.image, result.fov)
    standardized, ts_mask = detect_tiny(result.image, result.fov)

    image = resize_bilinear(result.image, resolution, resolution)
    ls = resize_array(ls_mask, resolution, resolution, order=0)
    ts = resize_array(ts_mask, resolution, resolution, order=0)
    stacks = {order: stack_channels(image, ls, ts, order) for order in StackOrder}

    row = PreprocessLogRow(
        image="",
        status="full_frame" if result.used_fallback else "ok",
        cx=result.circle.cx,
        cy=result.circle.cy,
        r=result.circle.r,
        m_ls=int(ls_mask.sum()),
        m_ts=int(ts_mask.sum()),
    )
    maps: Dict[str, bytes] = {}
    if export_maps:
        maps = {
            "p_ls": export_saliency_pgm(saliency),
            "m_ls": export_mask_pgm(ls_mask),
            "r_line": export_line_response_pgm(standardized),
            "m_ts": export_mask_pgm(ts_mask),
        }
    return stacks, row, maps


def preprocess_one(
    path: str, out_dir: str, resolution: int, detect_resolution: int, fallback: str, export_maps: bool = False
) -> PreprocessLogRow:
    """Turn one image file into its three RSTK stacks; never raises for
    per-image problems, the log row carries them instead."""
    name = os.path.basename(path)
    try:
        img = decode_image(_read_bytes(path))
        stacks, row, maps = build_stacks(img, resolution, detect_resolution, fallback, export_maps)
        for order, stack in stacks.items():
            save_stack(stack, os.path.join(out_dir, f"{_stem(path)}.{order.suffix}.rstk"))
        for suffix, payload in maps.items():
            _write_bytes(os.path.join(out_dir, f"{_stem(path)}.{suffix}.pgm"), payload)
    except IoFailure as e:
        return PreprocessLogRow(image=name, status="io_error", error=str(e))
    except UnsupportedFormat as e:
        return PreprocessLogRow(image=name, status="unsupported", error=str(e))
    except CorruptData as e:
        return PreprocessLogRow(image=name, status="corrupt", error=str(e))
    except NoFovFound as e:
        return PreprocessLogRow(image=name, status="no_fov", error=str(e))
    except SalStructError as e:
        return PreprocessLogRow(image=name, status="error", error=str(e))
    return row.model_copy(update={"image": name})


def _list_images(in_dir: str) -> List[str]:
    try:
        names = sorted(os.listdir(in_dir))
    except OSError as e:
        raise IoFailure(f"cannot list {in_dir}: {e}") from e
    return [
        os.path.join(in_dir, n)
        for n in names
        if n.lower().endswith(IMAGE_EXTENSIONS) and os.path.isfile(os.path.join(in_dir, n))
    ]


def _write_log(path: str, rows: Sequence[PreprocessLogRow]) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(list(PreprocessLogRow.model_fields))
            writer.writerows(row.csv_row() for row in rows)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_preprocess_log(path: str) -> Dict[str, PreprocessLogRow]:
    """Log rows keyed by image file name."""
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    parsed = {}
    for row in rows:
        clean = {k: (v if v != "" else None) for k, v in row.items()}
        clean["error"] = row.get("error", "")
        parsed[row["image"]] = PreprocessLogRow(**clean)
    return parsed


def stratified_split(labels: Sequence[int], fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """Indices (first, second) with round(fraction * n_c) of each class in
    `first`; classes are shuffled with one generator in label order."""
    rng = np.random.default_rng(seed)
    first, second = [], []
    for label in QualityLabel:
        members = [i for i, l in enumerate(labels) if int(l) == int(label)]
        if not members:
            continue
        order = rng.permutation(len(members))
        cut = int(round(fraction * len(members)))
        first.extend(members[j] for j in order[:cut])
        second.extend(members[j] for j in order[cut:])
    return sorted(first), sorted(second)


def _stack_path(stacks_dir: str, record: SampleRecord) -> str:
    return os.path.join(stacks_dir, f"{_stem(record.image_path)}.{StackOrder.RGB_LS_TS.suffix}.rstk")


def _load_samples(records: Sequence[SampleRecord], stacks_dir: str) -> List[Tuple[ChannelStack, int]]:
    return [(load_stack(_stack_path(stacks_dir, r)), int(r.label)) for r in records]


# ---------------------------
# Commands
# ---------------------------

def cmd_preprocess(in_dir: str, out_dir: str, config: RunConfig) -> int:
    paths = _list_images(in_dir)
    _makedirs(out_dir)
    logger.info(f"[1/2] Preprocessing {len(paths)} images from {in_dir} ({config.workers} worker(s))")

    args = [
        (p, out_dir, config.resolution, config.detect_resolution, config.fov_fallback, config.export_maps)
        for p in paths
    ]
    if config.workers > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(preprocess_one, *zip(*args)))
    else:
        rows = [preprocess_one(*a) for a in args]

    for row in rows:
        if row.status in ("ok", "full_frame"):
            logger.debug(f"{row.image}: |M_LS|={row.m_ls} |M_TS|={row.m_ts}")
        else:
            logger.warning(f"{row.image}: {row.status} ({row.error})")

    _write_log(os.path.join(out_dir, PREPROCESS_LOG), rows)
    failures = sum(row.status not in ("ok", "full_frame") for row in rows)
    logger.info(f"[2/2] ✓ Wrote {3 * (len(rows) - failures)} stacks, {failures} failure(s)")
    return 1 if failures else 0


def cmd_synth(n_per_class: int, out_dir: str, config: RunConfig, size: int = DEFAULT_SIZE) -> int:
    if n_per_class < 1:
        raise EmptyDataset("need at least one image per class")
    images_dir = os.path.join(out_dir, "images")
    masks_dir = os.path.join(out_dir, "masks")
    _makedirs(images_dir)
    _makedirs(masks_dir)

    records: List[SampleRecord] = []
    truths: List[str] = []
    total = 3 * n_per_class
    logger.info(f"[1/2] Rendering {total} synthetic images (seed {config.seed})")
    for label in QualityLabel:
        for i in range(n_per_class):
            sample_seed = config.seed ^ i
            img, truth = generate_synthetic(label, sample_seed, size)
            name = f"{label.slug}_{i:04d}"
            image_path = f"images/{name}.ppm"
            _write_bytes(os.path.join(out_dir, image_path), encode_ppm(img))
            _write_bytes(os.path.join(masks_dir, f"{name}.vessels.pgm"), encode_pgm(truth.vessels))
            records.append(SampleRecord(image_path=image_path, label=label, split="train"))
            truths.append(json.dumps({
                "image": image_path,
                "label": int(label),
                "seed": sample_seed,
                "fov": {"cx": truth.fov.cx, "cy": truth.fov.cy, "r": truth.fov.r},
                "disc": {"cx": truth.disc.cx, "cy": truth.disc.cy, "r": truth.disc.r},
                "vessel_pixels": int(truth.vessels.sum()),
            }, sort_keys=True))

    train_idx, _ = stratified_split([r.label for r in records], TRAIN_FRACTION, config.seed)
    train_set = set(train_idx)
    records = [
        r.model_copy(update={"split": "train" if i in train_set else "test"}) for i, r in enumerate(records)
    ]
    _write_bytes(os.path.join(out_dir, "ground_truth.jsonl"), ("\n".join(truths) + "\n").encode("utf-8"))
    _write_bytes(os.path.join(out_dir, "manifest.csv"), encode_manifest(records))
    logger.info(f"[2/2] ✓ Wrote manifest with {len(train_set)} train / {total - len(train_set)} test rows")
    return 0


def trial_seed(seed: int, trial: int) -> int:
    """Seed of one independent trial; trial 0 keeps the run seed."""
    return seed if trial == 0 else derive_seed(seed, trial)


def trial_dirs(out_dir: str, trials: int) -> List[str]:
    """A single trial writes straight into out_dir, several into trial_<k>/."""
    if trials == 1:
        return [out_dir]
    return [os.path.join(out_dir, f"trial_{k}") for k in range(trials)]


def _write_loss_curve(path: str, history) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_acc", "lr"])
            for s in history:
                writer.writerow([s.epoch, repr(s.train_loss), repr(s.val_acc), repr(s.lr)])
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def cmd_train(manifest_path: str, stacks_dir: str, out_dir: str, config: RunConfig) -> int:
    records = [r for r in read_manifest(manifest_path) if r.split == "train"]
    if not records:
        raise EmptyDataset(f"{manifest_path} has no train rows")
    logger.info(f"[1/3] Loading {len(records)} training stacks")
    samples = _load_samples(records, stacks_dir)

    val_idx, train_idx = stratified_split([r.label for r in records], config.val_fraction, config.seed)
    train_set = [samples[i] for i in train_idx]
    val_set = [samples[i] for i in val_idx]

    for trial, trial_dir in enumerate(trial_dirs(out_dir, config.trials)):
        trial_config = config.model_copy(update={"seed": trial_seed(config.seed, trial)})
        logger.info(
            f"[2/3] Training {config.architecture} model"
            f" (trial {trial + 1}/{config.trials}, seed {trial_config.seed})"
        )
        result = train(config.architecture, train_set, val_set, trial_config)

        logger.info(f"[3/3] Writing checkpoint and loss curve to {trial_dir}")
        _makedirs(trial_dir)
        save_checkpoint(result.checkpoint, os.path.join(trial_dir, CHECKPOINT_NAME))
        _write_loss_curve(os.path.join(trial_dir, "loss_curve.csv"), result.history)
    return 0


def _evaluate(
    checkpoint_path: str,
    records: Sequence[SampleRecord],
    stacks_dir: str,
    out_dir: str,
    distribution,
) -> Metrics:
    checkpoint = load_checkpoint(checkpoint_path)
    logger.info(f"Predicting {len(records)} samples with {checkpoint.architecture} model {checkpoint_path}")
    preds: List[int] = []
    prediction_rows = []
    for start in range(0, len(records), 32):
        chunk = records[start:start + 32]
        stacks = [s for s, _ in _load_samples(chunk, stacks_dir)]
        labels, probs = predict(checkpoint.params, batch_inputs(checkpoint.architecture, stacks))
        for record, label, p in zip(chunk, labels, probs):
            preds.append(int(label))
            prediction_rows.append((record.image_path, int(record.label), int(label), p))

    _makedirs(out_dir)
    write_predictions(os.path.join(out_dir, "predictions.csv"), prediction_rows)
    cm = confusion(preds, [int(r.label) for r in records])
    scores = metrics(cm)
    logger.info(f"✓ Accuracy {float(scores.acc):.4f}, macro F {float(scores.macro_f):.4f}")
    render_report(scores, cm, distribution, out_dir)
    return scores


def cmd_eval(
    checkpoint_path: str,
    manifest_path: str,
    stacks_dir: str,
    out_dir: str,
    split: str = "test",
    log_path: Optional[str] = None,
    trials: int = 1,
) -> int:
    """Score one checkpoint, or with trials > 1 the trial_<k>/ checkpoints a
    multi-trial `train` wrote under checkpoint_path, plus their average."""
    records = [r for r in read_manifest(manifest_path) if r.split == split]
    if not records:
        raise EmptyDataset(f"{manifest_path} has no {split} rows")

    log_path = log_path or os.path.join(stacks_dir, PREPROCESS_LOG)
    distribution = None
    if os.path.exists(log_path):
        distribution = _distribution(records, read_preprocess_log(log_path))
    else:
        logger.warning(f"No preprocess log at {log_path}; skipping mask-size statistics")

    if trials == 1:
        _evaluate(checkpoint_path, records, stacks_dir, out_dir, distribution)
        return 0

    per_trial = [
        _evaluate(os.path.join(model_dir, CHECKPOINT_NAME), records, stacks_dir, report_dir, distribution)
        for model_dir, report_dir in zip(trial_dirs(checkpoint_path, trials), trial_dirs(out_dir, trials))
    ]
    path = write_trials_summary(per_trial, out_dir)
    mean_acc = sum(float(m.acc) for m in per_trial) / trials
    logger.info(f"✓ Mean accuracy over {trials} trials {mean_acc:.4f}, summary in {path}")
    return 0


def _distribution(records: Sequence[SampleRecord], log: Dict[str, PreprocessLogRow]):
    pairs = []
    for record in records:
        row = log.get(os.path.basename(record.image_path))
        if row is None or row.m_ts is None:
            logger.warning(f"{record.image_path}: no mask size in preprocess log")
            continue
        pairs.append((row.m_ts, int(record.label)))
    return mts_cdf(pairs)


def overlay(rgb: np.ndarray, heatmap: np.ndarray) -> RasterImage:
    """0.5 * image + 0.5 * jet-coloured heatmap."""
    coloured = colormaps["jet"](heatmap)[:, :, :3]
    return RasterImage(np.clip(OVERLAY_ALPHA * rgb + (1.0 - OVERLAY_ALPHA) * coloured, 0.0, 1.0))


def cmd_explain(
    checkpoint_path: str,
    image_path: str,
    out_dir: str,
    config: RunConfig,
    target_class: Optional[int] = None,
) -> int:
    checkpoint = load_checkpoint(checkpoint_path)
    if image_path.endswith(".rstk"):
        stack = load_stack(image_path)
    else:
        img = decode_image(_read_bytes(image_path))
        stacks, _, _ = build_stacks(img, config.resolution, config.detect_resolution, config.fov_fallback)
        stack = stacks[StackOrder.RGB_LS_TS]

    maps, target = grad_cam(checkpoint.params, branch_inputs(checkpoint.architecture, stack), target_class)
    _makedirs(out_dir)
    stem = _stem(image_path).replace(".lsts", "")
    suffixes = ["cam_ls", "cam_ts"] if len(maps) == 2 else ["cam"]
    rgb = stack.rgb().astype(np.float64)
    for suffix, cam in zip(suffixes, maps):
        _write_bytes(os.path.join(out_dir, f"{stem}.{suffix}.pgm"), encode_pgm(cam))
        _write_bytes(os.path.join(out_dir, f"{stem}.{suffix}.overlay.ppm"), encode_ppm(overlay(rgb, cam)))
    logger.info(f"✓ Explained class {QualityLabel(target).slug} with {len(maps)} map(s) in {out_dir}")
    return 0


def cmd_stats(manifest_path: str, log_path: str, out_dir: str, split: Optional[str] = None) -> int:
    records = [r for r in read_manifest(manifest_path) if split is None or r.split == split]
    distribution = _distribution(records, read_preprocess_log(log_path))
    _makedirs(out_dir)
    render_cdf(distribution, out_dir)
    for label in distribution.labels:
        values = ", ".join(f"CDF({t})={distribution.cdf(label, t):.4f}" for t in STATS_THRESHOLDS)
        print(f"{label.slug}: n={distribution.sizes(label).size} {values}")
    return 0


# ---------------------------
# Argument parsing
# ---------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--resolution", type=int, default=None)
    common.add_argument("--config", default=None, help="key=value run configuration file")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(prog="salstruct", description="Salient-structure fundus quality assessment")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="images -> RSTK stacks + preprocess_log.csv")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--fov-fallback", choices=FOV_FALLBACKS, default=None)
    p.add_argument("--detect-resolution", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument(
        "--export-maps", dest="export_maps", action="store_const", const=True, default=None,
        help="also write P_LS, M_LS, R''_line and M_TS as PGM next to the stacks",
    )

    p = sub.add_parser("synth", parents=[common], help="render a synthetic three-grade corpus")
    p.add_argument("--n", type=int, default=100, help="images per class")
    p.add_argument("--size", type=int, default=DEFAULT_SIZE)
    p.add_argument("--out", dest="out_dir", required=True)

    p = sub.add_parser("train", parents=[common], help="train a classifier on preprocessed stacks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stacks", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--architecture", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False, default=None)
    p.add_argument("--trials", type=int, default=None, help="independent trials with derived seeds")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--stacks", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--log", dest="log_path", default=None)
    p.add_argument("--trials", type=int, default=None, help="average the trial_<k> checkpoints under --checkpoint")

    p = sub.add_parser("explain", parents=[common], help="Grad-CAM heatmaps for one image or stack")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--class", dest="target_class", type=int, choices=(0, 1, 2), default=None)
    p.add_argument("--fov-fallback", choices=FOV_FALLBACKS, default=None)

    p = sub.add_parser("stats", parents=[common], help="|M_TS| cumulative distributions per grade")
    p.add_argument("--manifest", required=True)
    p.add_argument("--log", dest="log_path", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--split", default=None, choices=("train", "test"))
    return parser


_CONFIG_FLAGS = (
    "seed", "resolution", "fov_fallback", "detect_resolution", "workers",
    "architecture", "epochs", "batch_size", "augment", "trials", "export_maps",
)


def _run(args: argparse.Namespace) -> int:
    overrides = {name: getattr(args, name, None) for name in _CONFIG_FLAGS}
    config = load_run_config(args.config, overrides)

    if args.command == "preprocess":
        return cmd_preprocess(args.in_dir, args.out_dir, config)
    if args.command == "synth":
        return cmd_synth(args.n, args.out_dir, config, args.size)
    if args.command == "train":
        return cmd_train(args.manifest, args.stacks, args.out_dir, config)
    if args.command == "eval":
        return cmd_eval(
            args.checkpoint, args.manifest, args.stacks, args.out_dir, args.split, args.log_path, config.trials
        )
    if args.command == "explain":
        return cmd_explain(args.checkpoint, args.image, args.out_dir, config, args.target_class)
    return cmd_stats(args.manifest, args.log_path, args.out_dir, args.split)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO))
    try:
        return _run(args)
    except SalStructError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    except Exception:
        logger.exception(f"{args.command} crashed")
        return 2


if __name__ == "__main__":
    sys.exit(main())
