"""Scoring protocol, report assembly, and the annotation-density experiment.

Per-frame quality is intersection-over-union (Jaccard). Sequences are
scored under an exclusion protocol (the standard benchmark drops the first
and last frames; single-annotation datasets drop only the first), sequence
means average the evaluated frames, and the dataset mean averages sequence
means. The density experiment annotates every k-th frame, propagates
bidirectionally (or copies the nearest annotation for the baseline curve),
pools all per-frame IoUs across sequences, and summarizes the pool with
eight quantiles.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import (
    Annotation,
    BinaryMask,
    DatasetManifest,
    EvalProtocol,
    VideoSequence,
    tight_box,
)
from .propagation import (
    PropagationConfig,
    PropagationResult,
    copy_baseline,
    propagate_multi,
)
from .refiners import Refiner

QUANTILE_LEVELS = (5, 10, 20, 30, 70, 80, 90, 95)

CLASS_ATTRIBUTE_PREFIX = "class:"

RefinerFactory = Callable[[VideoSequence, list[Annotation]], Refiner]


def iou(pred: BinaryMask, gt: BinaryMask, both_empty: float = 1.0) -> float:
    """Jaccard index |pred n gt| / |pred u gt|.

    When both masks are empty there is nothing to intersect; the convention
    is 1.0 (absence correctly predicted), switchable via ``both_empty``.
    """
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValueError(
            f"mask sizes differ: {pred.width}x{pred.height} vs {gt.width}x{gt.height}"
        )
    union = int(np.logical_or(pred.data, gt.data).sum())
    if union == 0:
        return both_empty
    inter = int(np.logical_and(pred.data, gt.data).sum())
    return inter / union


@dataclass(frozen=True)
class SequenceScore:
    """Per-frame IoUs of one sequence, restricted to the evaluated frames."""

    name: str
    frame_indices: tuple[int, ...]
    frame_ious: tuple[float, ...]
    mean_iou: float

    def __post_init__(self) -> None:
        if len(self.frame_indices) != len(self.frame_ious):
            raise ValueError("one IoU per evaluated frame is required")
        if not self.frame_ious:
            raise ValueError("a sequence score needs at least one evaluated frame")
        expected = sum(self.frame_ious) / len(self.frame_ious)
        if abs(self.mean_iou - expected) > 1e-12:
            raise ValueError("mean_iou does not match the per-frame values")


def evaluated_frames(n_frames: int, protocol: EvalProtocol) -> range:
    start = 1 if protocol.exclude_first else 0
    stop = n_frames - 1 if protocol.exclude_last else n_frames
    return range(start, stop)


def score_sequence(
    result: PropagationResult,
    sequence: VideoSequence,
    protocol: EvalProtocol | None = None,
    both_empty: float = 1.0,
) -> SequenceScore:
    """Score a propagation result against the sequence's ground truth.

    Annotated frames count like any other (their IoU is 1.0 by the
    fixed-point property) unless the protocol excludes them positionally.
    """
    if sequence.ground_truth is None:
        raise ValueError(f"sequence {sequence.name!r} has no ground truth")
    if len(result.masks) != len(sequence.frames):
        raise ValueError(
            f"result has {len(result.masks)} masks for the "
            f"{len(sequence.frames)}-frame sequence {sequence.name!r}"
        )
    protocol = protocol if protocol is not None else sequence.protocol
    indices = tuple(evaluated_frames(len(sequence.frames), protocol))
    if not indices:
        raise ValueError(
            f"protocol excludes every frame of the {len(sequence.frames)}-frame "
            f"sequence {sequence.name!r}"
        )
    ious = tuple(
        iou(result.masks[i], sequence.ground_truth[i], both_empty) for i in indices
    )
    return SequenceScore(
        name=sequence.name,
        frame_indices=indices,
        frame_ious=ious,
        mean_iou=sum(ious) / len(ious),
    )


@dataclass(frozen=True)
class Report:
    """Dataset summary: one row per sequence plus aggregate means.

    ``dataset_mean`` is the mean of sequence means (for category-tagged
    datasets this is the "mean per object" row); ``class_means`` average
    the sequences carrying each ``class:<name>`` attribute, and
    ``mean_per_class`` averages those class means.
    """

    sequences: tuple[SequenceScore, ...]
    dataset_mean: float
    attribute_means: dict[str, float]
    class_means: dict[str, float]
    mean_per_class: float | None


def dataset_report(scores: Sequence[SequenceScore], manifest: DatasetManifest) -> Report:
    if not scores:
        raise ValueError("cannot build a report from zero scored sequences")
    by_attr: dict[str, list[float]] = {}
    for score in scores:
        for attr in manifest.get(score.name).attributes:
            by_attr.setdefault(attr, []).append(score.mean_iou)
    attribute_means = {
        attr: sum(vals) / len(vals)
        for attr, vals in sorted(by_attr.items())
        if not attr.startswith(CLASS_ATTRIBUTE_PREFIX)
    }
    class_means = {
        attr[len(CLASS_ATTRIBUTE_PREFIX):]: sum(vals) / len(vals)
        for attr, vals in sorted(by_attr.items())
        if attr.startswith(CLASS_ATTRIBUTE_PREFIX)
    }
    mean_per_class = (
        sum(class_means.values()) / len(class_means) if class_means else None
    )
    return Report(
        sequences=tuple(scores),
        dataset_mean=sum(s.mean_iou for s in scores) / len(scores),
        attribute_means=attribute_means,
        class_means=class_means,
        mean_per_class=mean_per_class,
    )


# ---------------------------------------------------------------------------
# Annotation-density experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DensityPoint:
    """Pooled scores for one annotation stride.

    ``quantiles`` aligns with QUANTILE_LEVELS and must be nondecreasing;
    ``percent_annotated`` is the exact pooled fraction, not a nominal one.
    """

    annotation_stride: int
    percent_annotated: float
    mean_iou: float
    quantiles: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.quantiles) != len(QUANTILE_LEVELS):
            raise ValueError(f"expected {len(QUANTILE_LEVELS)} quantiles")
        if any(b < a - 1e-12 for a, b in zip(self.quantiles, self.quantiles[1:])):
            raise ValueError("quantiles must be nondecreasing")


def stride_annotations(
    sequence: VideoSequence, stride: int, use_boxes: bool = False
) -> list[Annotation]:
    """Ground-truth annotations on frames 0, stride, 2*stride, ...

    In box mode each annotated mask is replaced by its tight bounding box;
    a frame whose ground truth is empty keeps the empty segment (there is
    no box to draw).
    """
    if stride < 1:
        raise ValueError("annotation stride must be >= 1")
    if sequence.ground_truth is None:
        raise ValueError(f"sequence {sequence.name!r} has no ground truth")
    annotations = []
    for frame in range(0, len(sequence.frames), stride):
        gt = sequence.ground_truth[frame]
        if use_boxes and not gt.is_empty():
            annotations.append(Annotation(frame, tight_box(gt)))
        else:
            annotations.append(Annotation(frame, gt))
    return annotations


def density_experiment(
    sequences: Sequence[VideoSequence],
    strides: Sequence[int],
    make_refiner: RefinerFactory | None,
    config: PropagationConfig = PropagationConfig(),
    use_boxes: bool = False,
    protocol: EvalProtocol | None = None,
) -> list[DensityPoint]:
    """Quality as a function of annotation density.

    ``make_refiner`` builds a backend per sequence (oracle and fitted
    backends depend on the sequence); None selects the copy baseline.
    Strides are processed in sorted order; per-frame IoUs are pooled over
    all sequences, each scored under its own protocol unless one is forced.
    """
    if not sequences:
        raise ValueError("density experiment needs at least one sequence")
    points = []
    for stride in sorted(set(strides)):
        pool: list[float] = []
        annotated = 0
        total = 0
        for sequence in sequences:
            annotations = stride_annotations(sequence, stride, use_boxes)
            if make_refiner is None:
                result = copy_baseline(sequence, annotations)
            else:
                refiner = make_refiner(sequence, annotations)
                result = propagate_multi(sequence, annotations, refiner, config)
            score = score_sequence(result, sequence, protocol)
            pool.extend(score.frame_ious)
            annotated += len(annotations)
            total += len(sequence.frames)
        quantiles = tuple(
            float(q) for q in np.percentile(pool, QUANTILE_LEVELS, method="linear")
        )
        points.append(
            DensityPoint(
                annotation_stride=stride,
                percent_annotated=100.0 * annotated / total,
                mean_iou=float(np.mean(pool)),
                quantiles=quantiles,
            )
        )
    return points


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _write_text(path: Path | str, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def render_report(report: Report, fmt: str) -> str:
    """Deterministic CSV or JSON for a dataset report."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sequence", "frames_evaluated", "mean_iou"])
        for score in report.sequences:
            writer.writerow([score.name, len(score.frame_indices), repr(score.mean_iou)])
        writer.writerow(["mean", "", repr(report.dataset_mean)])
        return buf.getvalue()
    if fmt == "json":
        payload = {
            "sequences": [
                {
                    "sequence": s.name,
                    "frames_evaluated": len(s.frame_indices),
                    "mean_iou": s.mean_iou,
                    "frame_ious": list(s.frame_ious),
                }
                for s in report.sequences
            ],
            "mean_iou": report.dataset_mean,
            "attribute_means": report.attribute_means,
            "class_means": report.class_means,
            "mean_per_class": report.mean_per_class,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(report: Report, fmt: str, path: Path | str) -> None:
    _write_text(path, render_report(report, fmt))


def render_density(points: Sequence[DensityPoint], fmt: str) -> str:
    """Deterministic CSV or JSON for density-experiment points."""
    header = ["stride", "percent", "mean"] + [f"q{q:02d}" for q in QUANTILE_LEVELS]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for p in sorted(points, key=lambda p: p.annotation_stride):
            writer.writerow(
                [p.annotation_stride, repr(p.percent_annotated), repr(p.mean_iou)]
                + [repr(q) for q in p.quantiles]
            )
        return buf.getvalue()
    if fmt == "json":
        payload = [
            {
                "stride": p.annotation_stride,
                "percent": p.percent_annotated,
                "mean": p.mean_iou,
                **{f"q{q:02d}": v for q, v in zip(QUANTILE_LEVELS, p.quantiles)},
            }
            for p in sorted(points, key=lambda p: p.annotation_stride)
        ]
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def emit_density(points: Sequence[DensityPoint], fmt: str, path: Path | str) -> None:
    _write_text(path, render_density(points, fmt))
