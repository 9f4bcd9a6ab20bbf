"""Bundled synthetic dataset: moving shapes with known ground truth and flow.

Six little sequences cover the behaviors the toolkit must handle: fast and
slow motion, an occlusion event, a textured background, and one scene whose
object color also appears in the background. Colors sit at the centers of
the appearance model's quantization bins and pixel noise stays small, so
color-separable scenes really are separable. Flow fields are analytic: the
object's true frame-to-frame displacement stamped over its visible pixels.

Everything is a pure function of (spec, seed); regenerating a dataset
yields byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import BinaryMask, Image
from .flow import FlowField, write_flo

Color = tuple[int, int, int]

FAST_MOTION_ATTR = "motion-fast"
SLOW_MOTION_ATTR = "motion-slow"
SEPARABLE_ATTR = "color-separable"
OCCLUSION_ATTR = "occlusion"

_FAST_PX_PER_FRAME = 5


@dataclass(frozen=True)
class Background:
    """Flat, checkered, or vertically striped background fill."""

    kind: str  # solid | checker | stripes
    color_a: Color
    color_b: Color | None = None
    tile: int = 8

    def render(self, height: int, width: int) -> np.ndarray:
        canvas = np.empty((height, width, 3), dtype=np.uint8)
        canvas[:] = self.color_a
        if self.kind == "solid":
            return canvas
        ys, xs = np.mgrid[0:height, 0:width]
        if self.kind == "checker":
            alt = ((ys // self.tile) + (xs // self.tile)) % 2 == 1
        elif self.kind == "stripes":
            alt = (xs // self.tile) % 2 == 1
        else:
            raise ValueError(f"unknown background kind {self.kind!r}")
        canvas[alt] = self.color_b
        return canvas


@dataclass(frozen=True)
class SceneSpec:
    """One scripted sequence: a single shape on a trajectory."""

    name: str
    shape: str  # disc | square
    size: int  # disc radius or square half-side
    fg_color: Color
    background: Background
    centers: tuple[tuple[int, int], ...]
    occluder: tuple[int, int, int, int] | None = None  # x0, y0, x1, y1 inclusive
    occluder_color: Color = (136, 136, 136)
    extra_attributes: tuple[str, ...] = ()

    def min_step(self) -> float:
        steps = [
            float(np.hypot(bx - ax, by - ay))
            for (ax, ay), (bx, by) in zip(self.centers, self.centers[1:])
        ]
        return min(steps)

    def attributes(self) -> frozenset[str]:
        motion = FAST_MOTION_ATTR if self.min_step() >= _FAST_PX_PER_FRAME else SLOW_MOTION_ATTR
        return frozenset((motion, f"class:{self.shape}", *self.extra_attributes))


def bounce_path(start: int, velocity: int, lo: int, hi: int, n: int) -> tuple[int, ...]:
    """Integer positions reflecting between lo and hi, one step per frame."""
    if not lo <= start <= hi:
        raise ValueError(f"start {start} outside [{lo}, {hi}]")
    pos, vel = start, velocity
    out = [pos]
    for _ in range(n - 1):
        nxt = pos + vel
        if nxt > hi or nxt < lo:
            vel = -vel
            nxt = pos + vel
        pos = nxt
        out.append(pos)
    return tuple(out)


def _shape_mask(spec: SceneSpec, center: tuple[int, int], height: int, width: int) -> np.ndarray:
    cx, cy = center
    ys, xs = np.mgrid[0:height, 0:width]
    if spec.shape == "disc":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= spec.size**2
    if spec.shape == "square":
        return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= spec.size
    raise ValueError(f"unknown shape {spec.shape!r}")


def render_scene(
    spec: SceneSpec, height: int, width: int, noise: int, rng: np.random.Generator
) -> tuple[list[Image], list[BinaryMask], list[FlowField]]:
    """Frames, ground truth, and analytic flow for one scripted scene."""
    frames: list[Image] = []
    gts: list[BinaryMask] = []
    object_masks: list[np.ndarray] = []
    for center in spec.centers:
        body = _shape_mask(spec, center, height, width)
        canvas = spec.background.render(height, width).copy()
        canvas[body] = spec.fg_color
        visible = body
        if spec.occluder is not None:
            x0, y0, x1, y1 = spec.occluder
            canvas[y0 : y1 + 1, x0 : x1 + 1] = spec.occluder_color
            occ = np.zeros((height, width), dtype=bool)
            occ[y0 : y1 + 1, x0 : x1 + 1] = True
            visible = body & ~occ
        if noise > 0:
            jitter = rng.integers(-noise, noise + 1, size=canvas.shape)
            canvas = np.clip(canvas.astype(np.int32) + jitter, 0, 255).astype(np.uint8)
        frames.append(Image(canvas))
        gts.append(BinaryMask(visible))
        object_masks.append(visible)
        if visible.sum() == 0:
            raise ValueError(f"scene {spec.name!r}: object fully hidden in a frame")

    flows: list[FlowField] = []
    for i in range(len(spec.centers) - 1):
        (ax, ay), (bx, by) = spec.centers[i], spec.centers[i + 1]
        u = np.zeros((height, width), dtype=np.float32)
        v = np.zeros((height, width), dtype=np.float32)
        # Displacement stamped where the object sits in the later frame.
        u[object_masks[i + 1]] = float(bx - ax)
        v[object_masks[i + 1]] = float(by - ay)
        flows.append(FlowField(u=u, v=v))
    return frames, gts, flows


def default_scenes(n_frames: int = 20) -> list[SceneSpec]:
    """The bundled six scenes (held at 64x64)."""
    x_fast = bounce_path(10, 5, 10, 50, n_frames)
    return [
        SceneSpec(
            name="disc-slide",
            shape="disc",
            size=8,
            fg_color=(200, 40, 40),
            background=Background("solid", (40, 168, 40)),
            centers=tuple((x, 32) for x in x_fast),
            extra_attributes=(SEPARABLE_ATTR,),
        ),
        SceneSpec(
            name="square-diag",
            shape="square",
            size=7,
            fg_color=(40, 40, 216),
            background=Background("solid", (232, 232, 40)),
            centers=tuple(
                zip(bounce_path(10, 4, 10, 50, n_frames), bounce_path(12, 3, 12, 48, n_frames))
            ),
            extra_attributes=(SEPARABLE_ATTR,),
        ),
        SceneSpec(
            name="disc-occlude",
            shape="disc",
            size=8,
            fg_color=(200, 40, 40),
            background=Background("solid", (40, 168, 40)),
            centers=tuple((x, 32) for x in x_fast),
            occluder=(30, 0, 35, 63),
            extra_attributes=(SEPARABLE_ATTR, OCCLUSION_ATTR),
        ),
        SceneSpec(
            name="disc-checker",
            shape="disc",
            size=8,
            fg_color=(216, 40, 216),
            background=Background("checker", (40, 168, 40), (72, 136, 72)),
            centers=tuple((32, y) for y in bounce_path(10, 5, 10, 50, n_frames)),
            extra_attributes=(SEPARABLE_ATTR,),
        ),
        SceneSpec(
            name="square-slow",
            shape="square",
            size=7,
            fg_color=(40, 216, 216),
            background=Background("solid", (136, 40, 40)),
            centers=tuple((x, 40) for x in bounce_path(14, 2, 10, 52, n_frames)),
            extra_attributes=(SEPARABLE_ATTR,),
        ),
        # Slow on purpose: a histogram appearance model cannot separate an
        # object from same-colored background stripes once it leaves the
        # position cells its fit has seen, so this scene exercises the
        # empty-estimate fallback rather than the quality bar.
        SceneSpec(
            name="disc-ambiguous",
            shape="disc",
            size=8,
            fg_color=(216, 136, 40),
            background=Background("stripes", (216, 136, 40), (40, 40, 136)),
            centers=tuple((x, 20) for x in bounce_path(10, 2, 10, 50, n_frames)),
        ),
    ]


def generate_dataset(
    out_dir: Path | str,
    n_frames: int = 20,
    height: int = 64,
    width: int = 64,
    noise: int = 10,
    seed: int = 0,
    scenes: list[SceneSpec] | None = None,
) -> Path:
    """Materialize the synthetic dataset on disk; returns the manifest path."""
    from .core import save_image, save_mask

    if n_frames < 2:
        raise ValueError("a sequence needs at least 2 frames")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, spec in enumerate(scenes if scenes is not None else default_scenes(n_frames)):
        rng = np.random.default_rng((seed ^ index) & 0xFFFFFFFFFFFFFFFF)
        frames, gts, flows = render_scene(spec, height, width, noise, rng)
        seq_dir = out / spec.name
        for sub in ("frames", "gt", "flow"):
            (seq_dir / sub).mkdir(parents=True, exist_ok=True)
        frame_paths, gt_paths, flow_paths = [], [], []
        for i, (frame, gt) in enumerate(zip(frames, gts)):
            frame_rel = f"{spec.name}/frames/{i:05d}.png"
            gt_rel = f"{spec.name}/gt/{i:05d}.png"
            save_image(frame, out / frame_rel)
            save_mask(gt, out / gt_rel)
            frame_paths.append(frame_rel)
            gt_paths.append(gt_rel)
        for i, field in enumerate(flows):
            flow_rel = f"{spec.name}/flow/{i:05d}.flo"
            write_flo(field, out / flow_rel)
            flow_paths.append(flow_rel)
        entries.append(
            {
                "name": spec.name,
                "frames": frame_paths,
                "gt_masks": gt_paths,
                "flow": flow_paths,
                "attributes": sorted(spec.attributes()),
                "protocol": "davis",
            }
        )
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps({"sequences": entries}, indent=2) + "\n")
    return manifest_path
