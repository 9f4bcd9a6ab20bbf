#!/usr/bin/env python3
"""Regenerate the committed test fixtures from the masktrack toolkit.

The backend under test only ever sees the toolkit through its external
surfaces: the binary wire protocol and the export-train corpus layout.
This script records both as golden bytes so `npm test` needs no Python.

Run from the netbackend directory with masktrack installed:

    python3 scripts/make_fixtures.py
"""

from __future__ import annotations

import json
import shutil
import struct
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from masktrack import synthesis, wire
from masktrack.core import BinaryMask, Image, load_image, load_mask, save_mask
from masktrack.synthesis import AugmentationParams, DeformationParams

FIXTURES = Path(__file__).resolve().parent.parent / "test" / "fixtures"

TUNE_SAMPLES = 48
HOLDOUT_GUIDES = 4


def run_cli(*args: str) -> None:
    subprocess.run(["masktrack", *args], check=True, stdout=subprocess.DEVNULL)


def make_corpora(dataset: Path) -> None:
    """Export-train corpora: a 12-sample spread and a single-sample one."""
    corpus = FIXTURES / "corpus"
    shutil.rmtree(corpus, ignore_errors=True)
    run_cli(
        "export-train",
        "--manifest", str(dataset / "manifest.json"),
        "--out", str(corpus),
        "--masks-per-image", "1",
        "--seed", "11",
    )

    solo_manifest = json.loads((dataset / "manifest.json").read_text())
    solo_manifest["sequences"] = [
        s for s in solo_manifest["sequences"] if s["name"] == "disc-slide"
    ]
    solo_path = dataset / "solo.json"
    solo_path.write_text(json.dumps(solo_manifest))

    solo = FIXTURES / "corpus-solo"
    shutil.rmtree(solo, ignore_errors=True)
    run_cli(
        "export-train",
        "--manifest", str(solo_path),
        "--out", str(solo),
        "--masks-per-image", "1",
        "--seed", "12",
    )
    # Trim to exactly one sample; the layout stays valid, the index rules.
    index = json.loads((solo / "index.json").read_text())
    for entry in index["samples"][1:]:
        for key in ("image", "input", "target"):
            (solo / entry[key]).unlink()
    index["samples"] = index["samples"][:1]
    (solo / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def make_tune(dataset: Path) -> None:
    """Fine-tune pool for one frame plus held-out guidance masks."""
    tune = FIXTURES / "tune"
    shutil.rmtree(tune, ignore_errors=True)
    (tune / "guides").mkdir(parents=True)

    frame = load_image(dataset / "disc-slide" / "frames" / "00000.png")
    gt = load_mask(dataset / "disc-slide" / "gt" / "00000.png")
    shutil.copy(dataset / "disc-slide" / "frames" / "00000.png", tune / "frame.png")
    shutil.copy(dataset / "disc-slide" / "gt" / "00000.png", tune / "gt.png")

    params = AugmentationParams(
        samples_target=TUNE_SAMPLES,
        deformation=DeformationParams(rng_seed=101),
    )
    samples = list(synthesis.build_online_set(frame, gt, params))
    (tune / "finetune.bin").write_bytes(wire.encode_fine_tune(samples))

    rng = np.random.default_rng(202)
    deformation = DeformationParams(rng_seed=202)
    for i in range(HOLDOUT_GUIDES):
        guide = synthesis.synthesize_input_mask(gt, deformation, rng)
        save_mask(guide, tune / "guides" / f"{i}.png")


def gray(w: int, h: int, value: int) -> Image:
    return Image(np.full((h, w, 1), value, dtype=np.uint8))


def rgb(w: int, h: int, seed: int) -> Image:
    rng = np.random.default_rng(seed)
    return Image(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


def blob(w: int, h: int, seed: int) -> BinaryMask:
    rng = np.random.default_rng(seed)
    return BinaryMask(rng.random((h, w)) < 0.4)


def make_replay() -> None:
    """One recorded client conversation and the response schedule it expects."""
    replay = FIXTURES / "replay"
    shutil.rmtree(replay, ignore_errors=True)
    replay.mkdir(parents=True)

    # A frame the toolkit's encoder refuses to produce: two channels. The
    # geometry keeps the byte count well defined, so a server can answer
    # with an error frame and keep the stream.
    bad_header = json.dumps(
        {"w": 2, "h": 2, "channels": 2, "has_mask": False}, separators=(",", ":")
    ).encode()
    malformed = (
        wire.MAGIC_REQUEST
        + struct.pack("<I", len(bad_header))
        + bad_header
        + bytes(8)
    )

    tune_samples = [
        synthesis.TrainingSample(
            image=rgb(6, 4, seed), input_mask=blob(6, 4, seed + 1), target_mask=blob(6, 4, seed + 2)
        )
        for seed in (30, 40)
    ]

    conversation = b"".join(
        [
            wire.encode_request(rgb(2, 2, 1), None),
            wire.encode_request(rgb(2, 2, 2), blob(2, 2, 3)),
            wire.encode_request(gray(4, 3, 200), blob(4, 3, 4)),
            malformed,
            wire.encode_request(rgb(9, 5, 5), None),
            wire.encode_fine_tune(tune_samples),
            wire.encode_request(rgb(6, 4, 6), blob(6, 4, 7)),
            wire.encode_shutdown(),
        ]
    )
    (replay / "conversation.bin").write_bytes(conversation)

    expected = [
        {"type": "scores", "w": 2, "h": 2},
        {"type": "scores", "w": 2, "h": 2},
        {"type": "scores", "w": 4, "h": 3},
        {"type": "error", "contains": "2x2x2"},
        {"type": "scores", "w": 9, "h": 5},
        {"type": "ack", "n": 2},
        {"type": "scores", "w": 6, "h": 4},
    ]
    (replay / "expected.json").write_text(json.dumps(expected, indent=2) + "\n")


def main() -> int:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        dataset = Path(tmp) / "dataset"
        run_cli("make-synthetic", "--out", str(dataset), "--frames", "2", "--seed", "0")
        make_corpora(dataset)
        make_tune(dataset)
    make_replay()
    print(f"fixtures written to {FIXTURES}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
