import csv
import logging
import os
from typing import Iterable, List, Optional, Sequence, Tuple

import matplotlib
from matplotlib.figure import Figure

from app.dataset.manifest import QualityLabel
from app.errors import IoFailure
from app.evaluation.metrics import ConfusionMatrix, Metrics, MtsDistribution, average_metrics

logger = logging.getLogger(__name__)

SVG_SETTINGS = {"svg.hashsalt": "salstruct", "svg.fonttype": "path"}
SVG_METADATA = {"Date": None}
CLASS_NAMES = [label.slug for label in QualityLabel]


def _write_csv(path: str, header: Optional[Sequence[str]], rows: Iterable[Sequence]) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            if header:
                writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _save_svg(fig: Figure, path: str) -> None:
    try:
        with matplotlib.rc_context(SVG_SETTINGS):
            fig.savefig(path, format="svg", metadata=SVG_METADATA)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def confusion_figure(cm: ConfusionMatrix) -> Figure:
    fig = Figure(figsize=(4, 4))
    ax = fig.add_subplot(1, 1, 1)
    ax.pcolormesh(cm.counts, cmap="Blues", vmin=0)
    ax.set_xticks([i + 0.5 for i in range(3)], labels=CLASS_NAMES)
    ax.set_yticks([i + 0.5 for i in range(3)], labels=CLASS_NAMES)
    ax.invert_yaxis()
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    peak = max(int(cm.counts.max()), 1)
    for t in range(3):
        for p in range(3):
            value = int(cm.counts[t, p])
            ax.text(p + 0.5, t + 0.5, str(value), ha="center", va="center",
                    color="white" if value > peak / 2 else "black")
    fig.tight_layout()
    return fig


def cdf_figure(distribution: MtsDistribution, markers: Sequence[int] = (1513, 2160)) -> Figure:
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot(1, 1, 1)
    table = distribution.table()
    for label in distribution.labels:
        points = [(t, value) for t, row_label, value in table if row_label == label]
        ax.step([t for t, _ in points], [v for _, v in points], where="post", label=label.slug)
    for marker in markers:
        ax.axvline(marker, color="grey", linestyle=":", linewidth=0.8)
    ax.set_xlabel("|M_TS| (pixels)")
    ax.set_ylabel("cumulative fraction")
    ax.set_ylim(0.0, 1.02)
    ax.legend(loc="lower right")
    fig.tight_layout()
    return fig


def render_cdf(distribution: MtsDistribution, out_dir: str) -> List[str]:
    """mts_cdf.csv and mts_cdf.svg."""
    csv_path = os.path.join(out_dir, "mts_cdf.csv")
    svg_path = os.path.join(out_dir, "mts_cdf.svg")
    _write_csv(csv_path, ["t", "class", "value"],
               ((t, label.slug, repr(value)) for t, label, value in distribution.table()))
    _save_svg(cdf_figure(distribution), svg_path)
    return [csv_path, svg_path]


def render_report(
    metrics: Metrics,
    cm: ConfusionMatrix,
    distribution: Optional[MtsDistribution],
    out_dir: str,
) -> List[str]:
    """Write metrics.csv, confusion.csv/.svg and, given a distribution,
    mts_cdf.csv/.svg. Returns the written paths."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {out_dir}: {e}") from e

    written = []
    metrics_path = os.path.join(out_dir, "metrics.csv")
    _write_csv(metrics_path, ["metric", "value"], ((name, repr(value)) for name, value in metrics.rows()))
    written.append(metrics_path)

    confusion_path = os.path.join(out_dir, "confusion.csv")
    _write_csv(confusion_path, ["true"] + CLASS_NAMES,
               ([CLASS_NAMES[t]] + [int(v) for v in cm.counts[t]] for t in range(3)))
    written.append(confusion_path)

    confusion_svg = os.path.join(out_dir, "confusion.svg")
    _save_svg(confusion_figure(cm), confusion_svg)
    written.append(confusion_svg)

    if distribution is not None and distribution.labels:
        written.extend(render_cdf(distribution, out_dir))

    logger.info(f"✓ Wrote {len(written)} report files to {out_dir}")
    return written


def write_predictions(path: str, rows: Iterable[Tuple[str, int, int, Sequence[float]]]) -> None:
    """predictions.csv: image, truth, predicted and the three probabilities."""
    _write_csv(
        path,
        ["image", "truth", "predicted", "p_good", "p_usable", "p_reject"],
        ([image, truth, pred] + [repr(float(p)) for p in probs] for image, truth, pred, probs in rows),
    )


def write_trials_summary(per_trial: Sequence[Metrics], out_dir: str) -> str:
    """trials.csv: every metric per trial, then its mean and population std."""
    path = os.path.join(out_dir, "trials.csv")
    header = ["metric"] + [f"trial_{k}" for k in range(len(per_trial))] + ["mean", "std"]
    per_row = [dict(m.rows()) for m in per_trial]
    _write_csv(path, header, (
        [name] + [repr(row[name]) for row in per_row] + [repr(mean), repr(std)]
        for name, mean, std in average_metrics(per_trial)
    ))
    return path
