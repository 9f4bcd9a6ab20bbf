"""Frame-by-frame guided mask propagation.

Each step coarsens the previous frame's estimate by disc dilation, hands it
to the refiner as guidance, and thresholds the returned scores. Annotated
frames are fixed points: the annotation is copied, never re-estimated. The
multi-annotation variant runs a forward and a backward chain out of every
annotated frame and keeps, per frame, the chain whose annotation is nearest
in time (ties go to the forward chain).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Annotation, BinaryMask, BoundingBox, ScoreMap, VideoSequence, load_mask, mask_from_box, save_mask
from .refiners import Refiner, RefinerRequest, threshold
from .synthesis import dilate

PROVENANCE_ANNOTATED = "annotated"
PROVENANCE_FORWARD = "propagated-forward"
PROVENANCE_BACKWARD = "propagated-backward"
PROVENANCE_FALLBACK = "fallback"
_PROVENANCES = frozenset(
    {PROVENANCE_ANNOTATED, PROVENANCE_FORWARD, PROVENANCE_BACKWARD, PROVENANCE_FALLBACK}
)

PROVENANCE_FILE = "provenance.json"


class PropagationError(RuntimeError):
    """Propagation aborted; the message names the failing frame."""


class EmptyMaskPolicy(enum.Enum):
    """What to do when a thresholded estimate has no foreground."""

    FALLBACK_TO_DILATED_PREVIOUS = "fallback-to-dilated-previous"
    PROPAGATE_EMPTY = "propagate-empty"


class Direction(enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(frozen=True)
class PropagationConfig:
    """Propagation knobs; defaults follow the method's test-time settings."""

    test_dilation_radius: float = 5
    tau: float = 0.5
    empty_mask_policy: EmptyMaskPolicy = EmptyMaskPolicy.FALLBACK_TO_DILATED_PREVIOUS
    direction: Direction = Direction.FORWARD
    keep_scores: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.test_dilation_radius < 0:
            raise ValueError("dilation radius must be >= 0")


@dataclass(frozen=True)
class PropagationResult:
    """Per-frame masks with the provenance of each and optional raw scores."""

    masks: tuple[BinaryMask, ...]
    provenance: tuple[str, ...]
    scores: tuple[ScoreMap, ...] | None = None

    def __post_init__(self) -> None:
        if len(self.masks) != len(self.provenance):
            raise ValueError("one provenance entry per frame is required")
        if self.scores is not None and len(self.scores) != len(self.masks):
            raise ValueError("one score map per frame is required when retained")
        unknown = set(self.provenance) - _PROVENANCES
        if unknown:
            raise ValueError(f"unknown provenance labels: {sorted(unknown)}")


def _annotation_mask(annotation: Annotation, sequence: VideoSequence) -> BinaryMask:
    target = annotation.target
    if isinstance(target, BoundingBox):
        return mask_from_box(target, sequence.width, sequence.height)
    if (target.height, target.width) != (sequence.height, sequence.width):
        raise PropagationError(
            f"annotation on frame {annotation.frame_index} does not match the "
            f"sequence resolution"
        )
    return target


def _checked_annotations(
    sequence: VideoSequence, annotations: list[Annotation]
) -> dict[int, BinaryMask]:
    if not annotations:
        raise PropagationError("at least one annotation is required")
    by_frame: dict[int, BinaryMask] = {}
    for annotation in sorted(annotations, key=lambda a: a.frame_index):
        idx = annotation.frame_index
        if not 0 <= idx < len(sequence.frames):
            raise PropagationError(
                f"annotation frame {idx} outside the {len(sequence.frames)}-frame sequence"
            )
        if idx in by_frame:
            raise PropagationError(f"duplicate annotation on frame {idx}")
        by_frame[idx] = _annotation_mask(annotation, sequence)
    return by_frame


def _mask_scores(mask: BinaryMask) -> ScoreMap:
    return ScoreMap(mask.data.astype(np.float64))


def _run_chain(
    sequence: VideoSequence,
    start_mask: BinaryMask,
    frame_indices: list[int],
    refiner: Refiner,
    config: PropagationConfig,
    forward: bool,
) -> list[tuple[int, BinaryMask, str, ScoreMap]]:
    """Walk frames sequentially from an annotated seed; yields per-frame results."""
    label = PROVENANCE_FORWARD if forward else PROVENANCE_BACKWARD
    previous = start_mask
    out = []
    for t in frame_indices:
        guidance = dilate(previous, config.test_dilation_radius)
        request = RefinerRequest(
            image=sequence.frames[t], guidance_mask=guidance, frame_index=t
        )
        try:
            scores = refiner.refine(request)
        except Exception as exc:
            raise PropagationError(
                f"refiner failed at frame {t} of {sequence.name!r}: {exc}"
            ) from exc
        estimate = threshold(scores, config.tau)
        provenance = label
        if estimate.is_empty():
            if config.empty_mask_policy is EmptyMaskPolicy.FALLBACK_TO_DILATED_PREVIOUS:
                estimate = guidance
                provenance = PROVENANCE_FALLBACK
            # PROPAGATE_EMPTY keeps the empty estimate and the chain label.
        out.append((t, estimate, provenance, scores))
        previous = estimate
    return out


def propagate(
    sequence: VideoSequence,
    annotations: list[Annotation],
    refiner: Refiner,
    config: PropagationConfig = PropagationConfig(),
) -> PropagationResult:
    """Single-direction propagation; every annotated frame restarts the chain.

    In the forward direction the sequence must carry an annotation at or
    before frame 0 (symmetrically for backward): every frame needs a chain
    to come from, and single-direction runs have no way to reach frames on
    the wrong side of the first seed.
    """
    by_frame = _checked_annotations(sequence, annotations)
    n = len(sequence.frames)
    forward = config.direction is Direction.FORWARD
    seeds = sorted(by_frame)
    boundary = min(seeds) if forward else max(seeds)
    if forward and boundary != 0:
        raise PropagationError(
            f"forward propagation needs an annotation on frame 0, first is {boundary}"
        )
    if not forward and boundary != n - 1:
        raise PropagationError(
            f"backward propagation needs an annotation on frame {n - 1}, last is {boundary}"
        )

    masks: list[BinaryMask | None] = [None] * n
    provenance: list[str | None] = [None] * n
    scores: list[ScoreMap | None] = [None] * n
    for idx, mask in by_frame.items():
        masks[idx] = mask
        provenance[idx] = PROVENANCE_ANNOTATED
        scores[idx] = _mask_scores(mask)

    order = seeds if forward else list(reversed(seeds))
    for i, seed in enumerate(order):
        if forward:
            stop = order[i + 1] if i + 1 < len(order) else n
            walk = list(range(seed + 1, stop))
        else:
            stop = order[i + 1] if i + 1 < len(order) else -1
            walk = list(range(seed - 1, stop, -1))
        for t, mask, prov, score in _run_chain(
            sequence, by_frame[seed], walk, refiner, config, forward
        ):
            masks[t] = mask
            provenance[t] = prov
            scores[t] = score
    return PropagationResult(
        masks=tuple(masks),
        provenance=tuple(provenance),
        scores=tuple(scores) if config.keep_scores else None,
    )


def propagate_multi(
    sequence: VideoSequence,
    annotations: list[Annotation],
    refiner: Refiner,
    config: PropagationConfig = PropagationConfig(),
) -> PropagationResult:
    """Bidirectional propagation: nearest annotation wins, ties go forward.

    Equivalent to one full forward and one full backward pass with the
    per-frame nearest-annotation selection, but each inter-annotation
    interval is walked only up to the frame where the other chain takes
    over. The equivalence holds because chains restart at annotated frames,
    so a chain value never depends on frames beyond its own interval.
    """
    kinds = {annotation.is_box for annotation in annotations}
    if len(kinds) > 1:
        raise PropagationError("annotations must be all segments or all boxes")
    by_frame = _checked_annotations(sequence, annotations)
    n = len(sequence.frames)
    seeds = sorted(by_frame)

    masks: list[BinaryMask | None] = [None] * n
    provenance: list[str | None] = [None] * n
    scores: list[ScoreMap | None] = [None] * n
    for idx, mask in by_frame.items():
        masks[idx] = mask
        provenance[idx] = PROVENANCE_ANNOTATED
        scores[idx] = _mask_scores(mask)

    chains: list[tuple[int, list[int], bool]] = []
    first, last = seeds[0], seeds[-1]
    if first > 0:
        chains.append((first, list(range(first - 1, -1, -1)), False))
    if last < n - 1:
        chains.append((last, list(range(last + 1, n)), True))
    for a, b in zip(seeds, seeds[1:]):
        split = (a + b) // 2  # frames <= split are nearer to a (tie included)
        if split > a:
            chains.append((a, list(range(a + 1, split + 1)), True))
        if split + 1 < b:
            chains.append((b, list(range(b - 1, split, -1)), False))

    for seed, walk, forward in chains:
        for t, mask, prov, score in _run_chain(
            sequence, by_frame[seed], walk, refiner, config, forward
        ):
            masks[t] = mask
            provenance[t] = prov
            scores[t] = score
    return PropagationResult(
        masks=tuple(masks),
        provenance=tuple(provenance),
        scores=tuple(scores) if config.keep_scores else None,
    )


def copy_baseline(
    sequence: VideoSequence, annotations: list[Annotation]
) -> PropagationResult:
    """Assign each frame the mask of its nearest annotation, earlier on ties."""
    by_frame = _checked_annotations(sequence, annotations)
    seeds = sorted(by_frame)
    n = len(sequence.frames)
    masks = []
    provenance = []
    for t in range(n):
        nearest = min(seeds, key=lambda s: (abs(s - t), s))
        masks.append(by_frame[nearest])
        if nearest == t:
            provenance.append(PROVENANCE_ANNOTATED)
        elif nearest < t:
            provenance.append(PROVENANCE_FORWARD)
        else:
            provenance.append(PROVENANCE_BACKWARD)
    return PropagationResult(masks=tuple(masks), provenance=tuple(provenance))


# ---------------------------------------------------------------------------
# On-disk result layout: <out>/<sequence>/<frame:05>.png + provenance.json
# ---------------------------------------------------------------------------


def save_result(result: PropagationResult, out_dir: Path | str, sequence_name: str) -> Path:
    """Write per-frame mask PNGs and the provenance sidecar; returns the dir."""
    target = Path(out_dir) / sequence_name
    target.mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(result.masks):
        save_mask(mask, target / f"{i:05d}.png")
    sidecar = {"sequence": sequence_name, "provenance": list(result.provenance)}
    (target / PROVENANCE_FILE).write_text(json.dumps(sidecar, indent=2) + "\n")
    return target


def load_result(out_dir: Path | str, sequence_name: str) -> PropagationResult:
    """Read back a saved result; raises with the missing file named."""
    source = Path(out_dir) / sequence_name
    if not source.is_dir():
        raise FileNotFoundError(f"no result directory {source}")
    frame_files = sorted(source.glob("[0-9]" * 5 + ".png"))
    if not frame_files:
        raise FileNotFoundError(f"no frame masks under {source}")
    masks = tuple(load_mask(path) for path in frame_files)
    sidecar_path = source / PROVENANCE_FILE
    if sidecar_path.exists():
        provenance = tuple(json.loads(sidecar_path.read_text())["provenance"])
        if len(provenance) != len(masks):
            raise ValueError(
                f"{sidecar_path} lists {len(provenance)} frames, found {len(masks)} masks"
            )
    else:
        provenance = tuple(PROVENANCE_FORWARD for _ in masks)
    return PropagationResult(masks=masks, provenance=provenance)
