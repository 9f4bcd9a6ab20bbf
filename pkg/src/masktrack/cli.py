"""Command-line front end.

Subcommands cover the full workflow: generate the bundled synthetic
dataset, preview deformed training masks, export an offline training
corpus, propagate masks through a sequence set, score results, and run the
annotation-density experiment. Every command archives its resolved
configuration as JSON in the output directory and is deterministic given
that configuration.

Environment overrides: MASKTRACK_OUT replaces the output directory and
MASKTRACK_ENDPOINT replaces the endpoint of an `external:` refiner spec.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import crf as crf_mod
from . import evaluation, flow, propagation, refiners, synthesis, synthetic, wire
from .core import (
    Annotation,
    BinaryMask,
    EvalProtocol,
    VideoSequence,
    load_manifest,
    mask_from_box,
    protocol_by_name,
    save_image,
    save_mask,
    tight_box,
)
from .core import Image as CoreImage

REFINER_KINDS = ("identity", "oracle", "colormodel")
DEFAULT_STRIDES = (1, 2, 3, 5, 10, 20)
CONFIG_FILE = "config.json"


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on; serialized verbatim into the output."""

    manifest: str
    out: str
    refiner: str = "colormodel"
    seed: int = 0
    jobs: int = 1
    boxes: bool = False
    use_flow: bool = False
    protocol: str | None = None
    masks_per_image: int = 2
    strides: tuple[int, ...] = DEFAULT_STRIDES
    deformation: synthesis.DeformationParams = field(
        default_factory=synthesis.DeformationParams
    )
    augmentation: synthesis.AugmentationParams = field(
        default_factory=synthesis.AugmentationParams
    )
    propagation: propagation.PropagationConfig = field(
        default_factory=propagation.PropagationConfig
    )
    crf: crf_mod.CrfParams | None = None

    def __post_init__(self) -> None:
        base = self.refiner.split(":", 1)[0]
        if base not in REFINER_KINDS and base != "external":
            raise ValueError(
                f"unknown refiner {self.refiner!r}; expected one of "
                f"{', '.join(REFINER_KINDS)} or external:<host:port>"
            )
        if base == "external" and ":" not in self.refiner.partition(":")[2]:
            raise ValueError("external refiner needs an endpoint: external:<host:port>")
        if self.jobs < 1:
            raise ValueError("--jobs must be >= 1")


def config_to_json(config: RunConfig) -> str:
    doc = asdict(config)
    doc["propagation"]["empty_mask_policy"] = config.propagation.empty_mask_policy.value
    doc["propagation"]["direction"] = config.propagation.direction.value
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    if "deformation" in doc:
        doc["deformation"] = synthesis.DeformationParams(**doc["deformation"])
    if "augmentation" in doc:
        aug = dict(doc["augmentation"])
        if "deformation" in aug:
            aug["deformation"] = synthesis.DeformationParams(**aug["deformation"])
        if "rotations" in aug:
            aug["rotations"] = tuple(aug["rotations"])
        doc["augmentation"] = synthesis.AugmentationParams(**aug)
    if "propagation" in doc:
        prop = dict(doc["propagation"])
        prop["empty_mask_policy"] = propagation.EmptyMaskPolicy(prop["empty_mask_policy"])
        prop["direction"] = propagation.Direction(prop["direction"])
        doc["propagation"] = propagation.PropagationConfig(**prop)
    if doc.get("crf") is not None:
        doc["crf"] = crf_mod.CrfParams(**doc["crf"])
    if "strides" in doc:
        doc["strides"] = tuple(doc["strides"])
    return RunConfig(**doc)


def _archive_config(config: RunConfig) -> None:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(config_to_json(config))


def _parse_strides(text: str) -> tuple[int, ...]:
    try:
        strides = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"strides must be integers: {text!r}") from None
    if not strides or any(s < 1 for s in strides):
        raise argparse.ArgumentTypeError("strides must be positive integers")
    return strides


def build_config(args: argparse.Namespace) -> RunConfig:
    """Merge config file < command-line flags < environment variables."""
    doc: dict = {}
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text())
    overrides = {
        "manifest": getattr(args, "manifest", None),
        "out": getattr(args, "out", None),
        "refiner": getattr(args, "refiner", None),
        "seed": getattr(args, "seed", None),
        "jobs": getattr(args, "jobs", None),
        "protocol": getattr(args, "protocol", None),
        "masks_per_image": getattr(args, "masks_per_image", None),
        "strides": getattr(args, "strides", None),
    }
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    if getattr(args, "boxes", False):
        doc["boxes"] = True
    if getattr(args, "flow", False):
        doc["use_flow"] = True
    if getattr(args, "crf", False) and doc.get("crf") is None:
        doc["crf"] = {}
    if os.environ.get("MASKTRACK_OUT"):
        doc["out"] = os.environ["MASKTRACK_OUT"]
    endpoint = os.environ.get("MASKTRACK_ENDPOINT")
    if endpoint and str(doc.get("refiner", "")).startswith("external"):
        doc["refiner"] = f"external:{endpoint}"
    if "manifest" not in doc or "out" not in doc:
        raise ValueError("--manifest and --out are required (flag, config file, or env)")
    return config_from_dict(doc)


# ---------------------------------------------------------------------------
# Refiner construction
# ---------------------------------------------------------------------------


def _fit_colormodel(
    sequence: VideoSequence, annotations: list[Annotation], config: RunConfig
) -> refiners.OnlineColorModelRefiner:
    first = min(annotations, key=lambda a: a.frame_index)
    target = first.target
    if not isinstance(target, BinaryMask):
        target = mask_from_box(target, sequence.width, sequence.height)
    params = replace(
        config.augmentation,
        deformation=replace(config.augmentation.deformation, rng_seed=config.seed),
    )
    samples = synthesis.build_online_set(
        sequence.frames[first.frame_index], target, params
    )
    return refiners.OnlineColorModelRefiner(state=refiners.fit_online(samples))


def make_refiner(
    config: RunConfig, sequence: VideoSequence, annotations: list[Annotation]
) -> refiners.Refiner:
    kind, _, endpoint = config.refiner.partition(":")
    if kind == "identity":
        backend: refiners.Refiner = refiners.IdentityRefiner()
    elif kind == "oracle":
        if sequence.ground_truth is None:
            raise ValueError(f"oracle refiner needs ground truth ({sequence.name!r} has none)")
        backend = refiners.OracleRefiner(ground_truth=sequence.ground_truth)
    elif kind == "colormodel":
        backend = _fit_colormodel(sequence, annotations, config)
    elif kind == "external":
        backend = refiners.ExternalRefiner(client=wire.connect(endpoint))
    else:
        raise ValueError(f"unknown refiner kind {kind!r}")
    if config.use_flow:
        # Same backend on both branches; see the flow module for the wiring.
        return flow.FusedScoreRefiner(
            rgb_backend=backend,
            flow_backend=backend,
            magnitudes=flow.branch_magnitudes(sequence),
        )
    return backend


def _first_frame_annotations(sequence: VideoSequence, boxes: bool) -> list[Annotation]:
    if sequence.ground_truth is None:
        raise ValueError(f"sequence {sequence.name!r} has no ground truth to annotate from")
    gt = sequence.ground_truth[0]
    if boxes and not gt.is_empty():
        return [Annotation(0, tight_box(gt))]
    return [Annotation(0, gt)]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_make_synthetic(args: argparse.Namespace) -> int:
    out = Path(os.environ.get("MASKTRACK_OUT") or args.out)
    manifest = synthetic.generate_dataset(
        out, n_frames=args.frames, noise=args.noise, seed=args.seed
    )
    (out / CONFIG_FILE).write_text(
        json.dumps(
            {
                "command": "make-synthetic",
                "frames": args.frames,
                "noise": args.noise,
                "seed": args.seed,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    print(manifest)
    return 0


def _mask_grid(masks: list[BinaryMask], pad: int = 2) -> CoreImage:
    """Masks side by side, gray separators; input first, variants after."""
    h = masks[0].height
    columns: list[np.ndarray] = []
    for i, mask in enumerate(masks):
        if i:
            columns.append(np.full((h, pad), 128, dtype=np.uint8))
        columns.append(np.where(mask.data, 255, 0).astype(np.uint8))
    return CoreImage(np.hstack(columns))


def cmd_synth(args: argparse.Namespace) -> int:
    config = build_config(args)
    _archive_config(config)
    manifest = load_manifest(config.manifest)
    out = Path(config.out) / "grids"
    out.mkdir(parents=True, exist_ok=True)
    deformation = replace(config.deformation, rng_seed=config.seed)
    count = 0
    item_index = 0
    for sequence in manifest:
        if sequence.ground_truth is None:
            continue
        for frame_idx, gt in enumerate(sequence.ground_truth):
            if gt.is_empty():
                continue
            variants = []
            for _ in range(config.masks_per_image):
                rng = np.random.default_rng((config.seed ^ item_index) & 0xFFFFFFFFFFFFFFFF)
                variants.append(synthesis.synthesize_input_mask(gt, deformation, rng))
                item_index += 1
            grid = _mask_grid([gt, *variants])
            save_image(grid, out / f"{sequence.name}_{frame_idx:05d}.png")
            count += 1
    print(f"wrote {count} grids to {out}")
    return 0


def cmd_export_train(args: argparse.Namespace) -> int:
    config = build_config(args)
    _archive_config(config)
    manifest = load_manifest(config.manifest)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    deformation = replace(config.deformation, rng_seed=config.seed)
    entries = []
    samples = synthesis.build_offline_corpus(
        synthesis.manifest_image_pairs(manifest), deformation, config.masks_per_image
    )
    for i, sample in enumerate(samples):
        stem = f"{i:06d}"
        save_image(sample.image, out / f"{stem}_img.png")
        save_mask(sample.input_mask, out / f"{stem}_in.png")
        save_mask(sample.target_mask, out / f"{stem}_gt.png")
        entries.append(
            {
                "id": stem,
                "image": f"{stem}_img.png",
                "input": f"{stem}_in.png",
                "target": f"{stem}_gt.png",
                "width": sample.image.width,
                "height": sample.image.height,
            }
        )
    index = {
        "samples": entries,
        "masks_per_image": config.masks_per_image,
        "seed": config.seed,
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    print(f"exported {len(entries)} samples to {out}")
    return 0


def _run_sequence(config: RunConfig, sequence: VideoSequence) -> str:
    annotations = _first_frame_annotations(sequence, config.boxes)
    backend = make_refiner(config, sequence, annotations)
    prop_config = replace(config.propagation, keep_scores=config.crf is not None)
    result = propagation.propagate(sequence, annotations, backend, prop_config)
    if config.crf is not None:
        masks = crf_mod.postprocess_sequence(
            sequence, list(result.scores), config.crf
        )
        result = propagation.PropagationResult(
            masks=tuple(masks), provenance=result.provenance
        )
    propagation.save_result(result, Path(config.out), sequence.name)
    return sequence.name


def cmd_run(args: argparse.Namespace) -> int:
    config = build_config(args)
    _archive_config(config)
    manifest = load_manifest(config.manifest)
    jobs = config.jobs
    if jobs > 1 and config.refiner.startswith("external"):
        print("external backends serve one request at a time; forcing --jobs 1", file=sys.stderr)
        jobs = 1
    if jobs == 1:
        for sequence in manifest:
            print(f"propagated {_run_sequence(config, sequence)}")
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for name in pool.map(lambda s: _run_sequence(config, s), manifest):
                print(f"propagated {name}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    results_dir = Path(args.results)
    out = Path(os.environ.get("MASKTRACK_OUT") or args.out or results_dir)
    out.mkdir(parents=True, exist_ok=True)
    protocol: EvalProtocol | None = (
        protocol_by_name(args.protocol) if args.protocol else None
    )
    scores = []
    for sequence in manifest:
        result = propagation.load_result(results_dir, sequence.name)
        scores.append(evaluation.score_sequence(result, sequence, protocol))
    report = evaluation.dataset_report(scores, manifest)
    evaluation.emit_report(report, "csv", out / "report.csv")
    evaluation.emit_report(report, "json", out / "report.json")
    print(f"mIoU {report.dataset_mean}")
    return 0


def cmd_density(args: argparse.Namespace) -> int:
    config = build_config(args)
    _archive_config(config)
    manifest = load_manifest(config.manifest)
    sequences = list(manifest)
    out = Path(config.out)

    def factory(sequence: VideoSequence, annotations: list[Annotation]) -> refiners.Refiner:
        return make_refiner(config, sequence, annotations)

    protocol = protocol_by_name(config.protocol) if config.protocol else None
    method = evaluation.density_experiment(
        sequences, config.strides, factory, config.propagation,
        use_boxes=config.boxes, protocol=protocol,
    )
    baseline = evaluation.density_experiment(
        sequences, config.strides, None, config.propagation,
        use_boxes=config.boxes, protocol=protocol,
    )
    evaluation.emit_density(method, "csv", out / "density_method.csv")
    evaluation.emit_density(method, "json", out / "density_method.json")
    evaluation.emit_density(baseline, "csv", out / "density_baseline.csv")
    evaluation.emit_density(baseline, "json", out / "density_baseline.json")
    for point in method:
        print(
            f"stride {point.annotation_stride}: method {point.mean_iou:.4f} "
            f"({point.percent_annotated:.1f}% annotated)"
        )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser, *, refiner: bool = False) -> None:
    parser.add_argument("--manifest", help="dataset manifest JSON")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    parser.add_argument("--config", help="RunConfig JSON file; flags override it")
    if refiner:
        parser.add_argument(
            "--refiner",
            default=None,
            help="identity|oracle|colormodel|external:<host:port> (default colormodel)",
        )
        parser.add_argument("--jobs", type=int, default=None, help="sequence-level workers")
        parser.add_argument("--boxes", action="store_true", help="annotate with bounding boxes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="masktrack",
        description="Guided per-frame video object segmentation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate the bundled synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--noise", type=int, default=10)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("synth", help="preview deformed training masks as grids")
    _add_common(p)
    p.add_argument("--masks-per-image", type=int, default=None, dest="masks_per_image")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-train", help="materialize the offline training corpus")
    _add_common(p)
    p.add_argument("--masks-per-image", type=int, default=None, dest="masks_per_image")
    p.set_defaults(func=cmd_export_train)

    p = sub.add_parser("run", help="propagate annotations through every sequence")
    _add_common(p, refiner=True)
    p.add_argument("--flow", action="store_true", help="fuse flow-magnitude branch scores")
    p.add_argument("--crf", action="store_true", help="post-process with the dense CRF")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a results directory against ground truth")
    p.add_argument("--results", required=True, help="directory produced by `run`")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="report directory (default: results dir)")
    p.add_argument("--protocol", choices=("davis", "first-only"), default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("density", help="quality vs annotation density, plus copy baseline")
    _add_common(p, refiner=True)
    p.add_argument("--strides", type=_parse_strides, default=None, help="e.g. 1,2,5,10")
    p.add_argument("--protocol", choices=("davis", "first-only"), default=None)
    p.set_defaults(func=cmd_density)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surfaced as exit status per the CLI contract
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
