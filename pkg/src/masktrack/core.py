"""Shared data model: images, masks, sequences, manifests, protocols.

Conventions used across the toolkit:

* pixel coordinates are (x, y) with origin at the top-left corner, x growing
  rightward and y downward; bounding-box bounds are inclusive;
* arrays are numpy, row-major, indexed ``[y, x]`` (``[y, x, c]`` for images);
* masks are exchanged on disk as 8-bit single-channel PNGs with
  0 = background and 255 = foreground; any nonzero sample decodes to
  foreground.

All value types are immutable after construction (their array payloads are
marked read-only), so they are safe to share across worker threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterator

import numpy as np
from PIL import Image as PilImage

if TYPE_CHECKING:  # circular at runtime: flow builds Images
    from .flow import FlowField


class ManifestError(ValueError):
    """Raised when a dataset manifest is missing files or inconsistent."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Image:
    """8-bit image, 1 (grayscale) or 3 (RGB) channels, shape (h, w, c)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image must be (h, w, 1|3), got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if arr.dtype != np.uint8:
            raise ValueError(f"image samples must be uint8, got {arr.dtype}")
        object.__setattr__(self, "data", _freeze(np.ascontiguousarray(arr)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel object/background labeling, shape (h, w), bool."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("mask must be at least 1x1")
        object.__setattr__(self, "data", _freeze(np.ascontiguousarray(arr != 0)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def is_empty(self) -> bool:
        return not bool(self.data.any())

    def matches(self, other: "BinaryMask") -> bool:
        return bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class ScoreMap:
    """Per-pixel foreground probability in [0, 1], shape (h, w)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"score map must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("score map contains non-finite values")
        if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
            raise ValueError("score map values must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(np.ascontiguousarray(arr)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with inclusive pixel bounds."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"box has negative coordinates: {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1


@dataclass(frozen=True)
class Annotation:
    """Sparse supervision on one frame: a segment mask or a bounding box."""

    frame_index: int
    target: BinaryMask | BoundingBox

    @property
    def is_box(self) -> bool:
        return isinstance(self.target, BoundingBox)


@dataclass(frozen=True)
class EvalProtocol:
    """Which frames a benchmark excludes from scoring."""

    exclude_first: bool
    exclude_last: bool


# DAVIS scoring drops both endpoint frames; the other benchmarks drop only
# the first (annotated) frame.
DAVIS_PROTOCOL = EvalProtocol(exclude_first=True, exclude_last=True)
FIRST_ONLY_PROTOCOL = EvalProtocol(exclude_first=True, exclude_last=False)

_PROTOCOL_NAMES = {"davis": DAVIS_PROTOCOL, "first-only": FIRST_ONLY_PROTOCOL}


def protocol_by_name(name: str) -> EvalProtocol:
    try:
        return _PROTOCOL_NAMES[name]
    except KeyError:
        raise ValueError(f"unknown protocol {name!r}; expected one of {sorted(_PROTOCOL_NAMES)}") from None


def protocol_name(protocol: EvalProtocol) -> str:
    for name, preset in _PROTOCOL_NAMES.items():
        if preset == protocol:
            return name
    raise ValueError(f"protocol {protocol} has no manifest name")


@dataclass(frozen=True)
class VideoSequence:
    """Ordered frames with optional dense ground truth and flow.

    ``flow`` (when present) has one field per consecutive frame pair; entry
    ``i`` describes motion from frame ``i`` to frame ``i+1``, sampled at
    frame ``i+1`` so that its magnitude silhouettes the object where it sits
    in frame ``i+1``.
    """

    name: str
    frames: tuple[Image, ...]
    ground_truth: tuple[BinaryMask, ...] | None = None
    attributes: frozenset[str] = frozenset()
    flow: tuple["FlowField", ...] | None = None
    protocol: EvalProtocol = DAVIS_PROTOCOL

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError(f"sequence {self.name!r} has no frames")
        w, h = self.frames[0].width, self.frames[0].height
        for i, frame in enumerate(self.frames):
            if (frame.width, frame.height) != (w, h):
                raise ValueError(
                    f"sequence {self.name!r}: frame {i} is {frame.width}x{frame.height}, expected {w}x{h}"
                )
        if self.ground_truth is not None:
            if len(self.ground_truth) != len(self.frames):
                raise ValueError(
                    f"sequence {self.name!r}: {len(self.ground_truth)} GT masks for {len(self.frames)} frames"
                )
            for i, mask in enumerate(self.ground_truth):
                if (mask.width, mask.height) != (w, h):
                    raise ValueError(
                        f"sequence {self.name!r}: GT mask {i} is {mask.width}x{mask.height}, expected {w}x{h}"
                    )
        if self.flow is not None and len(self.flow) != len(self.frames) - 1:
            raise ValueError(
                f"sequence {self.name!r}: {len(self.flow)} flow fields for {len(self.frames)} frames "
                f"(expected {len(self.frames) - 1})"
            )

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height


@dataclass(frozen=True)
class DatasetManifest:
    """A resolved set of sequences, loaded and validated."""

    sequences: tuple[VideoSequence, ...]
    source_path: Path | None = None

    def __post_init__(self) -> None:
        names = [s.name for s in self.sequences]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ManifestError(f"duplicate sequence names: {dupes}")

    def __iter__(self) -> Iterator[VideoSequence]:
        return iter(self.sequences)

    def __len__(self) -> int:
        return len(self.sequences)

    def get(self, name: str) -> VideoSequence:
        for seq in self.sequences:
            if seq.name == name:
                return seq
        raise KeyError(name)


# ---------------------------------------------------------------------------
# PNG / image file round-trips
# ---------------------------------------------------------------------------


def load_image(path: str | Path) -> Image:
    """Load an 8-bit PNG or JPEG as an Image (grayscale kept single-channel)."""
    with PilImage.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if img.mode not in ("1", "I;16", "L") else "L")
        arr = np.asarray(img, dtype=np.uint8)
    return Image(arr)


def save_image(image: Image, path: str | Path) -> None:
    arr = image.data[:, :, 0] if image.channels == 1 else image.data
    PilImage.fromarray(arr).save(path)


def load_mask(path: str | Path) -> BinaryMask:
    """Decode a grayscale PNG mask; any nonzero sample is foreground."""
    with PilImage.open(path) as img:
        if img.mode != "L":
            img = img.convert("L")
        arr = np.asarray(img)
    return BinaryMask(arr != 0)


def save_mask(mask: BinaryMask, path: str | Path) -> None:
    """Encode a mask as 0/255 grayscale PNG."""
    arr = np.where(mask.data, np.uint8(255), np.uint8(0))
    PilImage.fromarray(arr, mode="L").save(path)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def mask_from_box(box: BoundingBox, width: int, height: int) -> BinaryMask:
    """Fill a bounding box into a mask of the given canvas size."""
    if box.x_max >= width or box.y_max >= height:
        raise ValueError(f"box {box} exceeds {width}x{height} canvas")
    data = np.zeros((height, width), dtype=bool)
    data[box.y_min : box.y_max + 1, box.x_min : box.x_max + 1] = True
    return BinaryMask(data)


def tight_box(mask: BinaryMask) -> BoundingBox:
    """Smallest box containing all foreground pixels. Mask must be nonempty."""
    ys, xs = np.nonzero(mask.data)
    if ys.size == 0:
        raise ValueError("cannot take the bounding box of an empty mask")
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and fully resolve a dataset manifest.

    The manifest is a JSON document::

        { "sequences": [ { "name": str,
                           "frames": [paths],
                           "gt_masks": [paths] | null,
                           "attributes": [str],
                           "flow": [paths] | null,
                           "protocol": "davis" | "first-only" } ] }

    Relative paths are resolved against the manifest's directory. Every
    referenced file is loaded; frame counts and image/mask dimensions are
    validated. Errors name the offending sequence and frame.
    """
    from . import flow as flow_mod  # local import to avoid a cycle

    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("sequences"), list):
        raise ManifestError(f"manifest {path} must be an object with a 'sequences' list")

    base = path.parent
    sequences: list[VideoSequence] = []
    for entry in doc["sequences"]:
        name = entry.get("name")
        if not isinstance(name, str) or not name:
            raise ManifestError(f"manifest {path}: sequence entry without a name: {entry!r}")
        frame_paths = entry.get("frames")
        if not isinstance(frame_paths, list) or not frame_paths:
            raise ManifestError(f"sequence {name!r}: 'frames' must be a non-empty list")

        frames = []
        for i, rel in enumerate(frame_paths):
            fp = base / rel
            if not fp.is_file():
                raise ManifestError(f"sequence {name!r}: frame {i} file missing: {fp}")
            frames.append(load_image(fp))

        gt = None
        gt_paths = entry.get("gt_masks")
        if gt_paths is not None:
            if not isinstance(gt_paths, list) or len(gt_paths) != len(frame_paths):
                raise ManifestError(
                    f"sequence {name!r}: gt_masks must list one mask per frame "
                    f"({len(frame_paths)} frames)"
                )
            gt = []
            for i, rel in enumerate(gt_paths):
                mp = base / rel
                if not mp.is_file():
                    raise ManifestError(f"sequence {name!r}: GT mask {i} file missing: {mp}")
                mask = load_mask(mp)
                if (mask.width, mask.height) != (frames[i].width, frames[i].height):
                    raise ManifestError(
                        f"sequence {name!r}: frame {i} is {frames[i].width}x{frames[i].height} "
                        f"but its mask is {mask.width}x{mask.height}"
                    )
                gt.append(mask)

        flow_fields = None
        flow_paths = entry.get("flow")
        if flow_paths is not None:
            if not isinstance(flow_paths, list) or len(flow_paths) != len(frame_paths) - 1:
                raise ManifestError(
                    f"sequence {name!r}: flow must list one field per consecutive frame pair "
                    f"({len(frame_paths) - 1} expected)"
                )
            flow_fields = []
            for i, rel in enumerate(flow_paths):
                fp = base / rel
                if not fp.is_file():
                    raise ManifestError(f"sequence {name!r}: flow file {i} missing: {fp}")
                fld = flow_mod.read_flo(fp)
                if (fld.width, fld.height) != (frames[0].width, frames[0].height):
                    raise ManifestError(
                        f"sequence {name!r}: flow field {i} is {fld.width}x{fld.height}, "
                        f"expected {frames[0].width}x{frames[0].height}"
                    )
                flow_fields.append(fld)

        attributes = frozenset(entry.get("attributes") or ())
        protocol = protocol_by_name(entry.get("protocol", "davis"))
        try:
            sequences.append(
                VideoSequence(
                    name=name,
                    frames=tuple(frames),
                    ground_truth=tuple(gt) if gt is not None else None,
                    attributes=attributes,
                    flow=tuple(flow_fields) if flow_fields is not None else None,
                    protocol=protocol,
                )
            )
        except ValueError as exc:
            raise ManifestError(str(exc)) from exc

    return DatasetManifest(sequences=tuple(sequences), source_path=path)
