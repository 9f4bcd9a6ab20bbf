"""Precomputed optical flow: .flo interchange, magnitude images, score fusion.

Flow estimation itself is out of scope; fields arrive as Middlebury .flo
files and are consumed as-is.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Image, ScoreMap, VideoSequence
from .refiners import Refiner, RefinerRequest

FLO_MAGIC = 202021.25


class FlowFormatError(ValueError):
    """Raised for malformed .flo files."""


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement (u rightward, v downward), pixels per frame."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        u = np.asarray(self.u, dtype=np.float32)
        v = np.asarray(self.v, dtype=np.float32)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError(f"u/v must be matching 2-D arrays, got {u.shape} and {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("flow field contains non-finite values")
        u = np.ascontiguousarray(u)
        v = np.ascontiguousarray(v)
        u.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


def read_flo(path: str | Path) -> FlowField:
    """Parse a Middlebury .flo file (little-endian, interleaved u,v float32)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, width, height = struct.unpack("<fii", raw[:12])
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
    if width <= 0 or height <= 0:
        raise FlowFormatError(f"{path}: non-positive dimensions {width}x{height}")
    expected = 12 + width * height * 2 * 4
    if len(raw) != expected:
        raise FlowFormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(height, width, 2)
    if not np.all(np.isfinite(data)):
        raise FlowFormatError(f"{path}: non-finite flow values")
    return FlowField(u=data[:, :, 0].copy(), v=data[:, :, 1].copy())


def write_flo(field: FlowField, path: str | Path) -> None:
    """Write a bit-exact Middlebury .flo file."""
    header = struct.pack("<fii", FLO_MAGIC, field.width, field.height)
    interleaved = np.empty((field.height, field.width, 2), dtype="<f4")
    interleaved[:, :, 0] = field.u
    interleaved[:, :, 1] = field.v
    Path(path).write_bytes(header + interleaved.tobytes())


def magnitude_image(field: FlowField) -> Image:
    """Render per-pixel flow magnitude as a 3-channel 8-bit image.

    The per-frame maximum maps to 255 (an all-zero field stays all-zero);
    intermediate values are rounded half-up after linear rescaling.
    """
    mag = np.hypot(field.u.astype(np.float64), field.v.astype(np.float64))
    peak = mag.max()
    if peak > 0:
        scaled = np.floor(mag * (255.0 / peak) + 0.5)
    else:
        scaled = mag
    gray = np.clip(scaled, 0, 255).astype(np.uint8)
    return Image(np.repeat(gray[:, :, np.newaxis], 3, axis=2))


def fuse_scores(rgb: ScoreMap, flow: ScoreMap) -> ScoreMap:
    """Average the two branch score maps pixelwise."""
    if (rgb.width, rgb.height) != (flow.width, flow.height):
        raise ValueError(
            f"score maps disagree: {rgb.width}x{rgb.height} vs {flow.width}x{flow.height}"
        )
    return ScoreMap((rgb.data + flow.data) / 2.0)


def branch_magnitudes(sequence: VideoSequence) -> tuple[Image | None, ...]:
    """Per-frame magnitude images for the flow branch.

    Entry t renders the field describing motion into frame t; frame 0 has
    no incoming field and stays None (the RGB branch runs alone there).
    """
    if sequence.flow is None:
        raise ValueError(f"sequence {sequence.name!r} carries no flow fields")
    return (None,) + tuple(magnitude_image(field) for field in sequence.flow)


@dataclass(frozen=True)
class FusedScoreRefiner:
    """Runs a backend on the RGB frame and on the flow-magnitude image,
    then averages the two score maps. Frames without a magnitude image
    (the first frame, or sequences without flow) pass through unfused.
    """

    rgb_backend: Refiner
    flow_backend: Refiner
    magnitudes: tuple[Image | None, ...]

    def refine(self, request: RefinerRequest) -> ScoreMap:
        rgb = self.rgb_backend.refine(request)
        idx = request.frame_index
        if idx is None or not 0 <= idx < len(self.magnitudes):
            return rgb
        magnitude = self.magnitudes[idx]
        if magnitude is None:
            return rgb
        flow_scores = self.flow_backend.refine(
            RefinerRequest(
                image=magnitude,
                guidance_mask=request.guidance_mask,
                frame_index=request.frame_index,
            )
        )
        return fuse_scores(rgb, flow_scores)
