"""Deformed/coarsened input-mask synthesis and training-set generation.

The guided refiner is trained to recover a clean mask from a rough one, so
training inputs are manufactured by perturbing clean annotations: an affine
jitter (isotropic scale about the centroid plus a translation proportional
to object size), a thin-plate-spline warp of control points sampled in the
foreground bounding box, and a disc dilation that blurs away contour detail.
Every operation is a pure function of (inputs, seed).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np
from scipy import ndimage

from .core import BinaryMask, Image

logger = logging.getLogger(__name__)

_MAX_TPS_RETRIES = 20
_MAX_EMPTY_RETRIES = 10
_TPS_RIDGE = 1e-9
_TPS_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class DeformationParams:
    """Knobs of the mask deformation recipe.

    Jitters are fractions of the foreground bounding box: scale is sampled
    once per mask in [1-s, 1+s] and applied isotropically unless
    ``anisotropic_scale`` is set; translation offsets are sampled per axis
    within +/- ``translate_jitter`` of the box width/height; TPS control
    points shift within +/- ``tps_point_jitter`` of the box width (x) and
    height (y).
    """

    scale_jitter: float = 0.05
    translate_jitter: float = 0.10
    tps_control_points: int = 5
    tps_point_jitter: float = 0.10
    dilation_radius: float = 5
    enable_affine: bool = True
    enable_nonrigid: bool = True
    enable_dilation: bool = True
    anisotropic_scale: bool = False
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.scale_jitter < 0 or self.translate_jitter < 0 or self.tps_point_jitter < 0:
            raise ValueError("jitter fractions must be >= 0")
        if self.enable_nonrigid and self.tps_control_points < 3:
            raise ValueError("thin-plate-spline warp needs at least 3 control points")
        if self.dilation_radius < 0:
            raise ValueError("dilation radius must be >= 0")


@dataclass(frozen=True)
class AugmentationParams:
    """First-frame augmentation: flips x rotations x deformation draws."""

    flips: bool = True
    rotations: tuple[float, ...] = (0.0, -10.0, 10.0, -20.0, 20.0)
    samples_target: int = 1000
    deformation: DeformationParams = field(default_factory=DeformationParams)

    def __post_init__(self) -> None:
        if self.samples_target < 1:
            raise ValueError("samples_target must be >= 1")
        if not self.rotations:
            raise ValueError("rotations must contain at least one angle (use 0.0 for none)")


@dataclass(frozen=True)
class TrainingSample:
    """One refiner training triplet: image, rough input mask, clean target."""

    image: Image
    input_mask: BinaryMask
    target_mask: BinaryMask

    def __post_init__(self) -> None:
        shape = (self.image.height, self.image.width)
        for mask in (self.input_mask, self.target_mask):
            if (mask.height, mask.width) != shape:
                raise ValueError(
                    f"sample masks must match the {shape[1]}x{shape[0]} image, "
                    f"got {mask.width}x{mask.height}"
                )


def _foreground_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """(x0, y0, x1, y1) inclusive bounds of the nonzero pixels."""
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def _centroid(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask)
    return float(xs.mean()), float(ys.mean())


def _sample_nearest(mask: np.ndarray, src_x: np.ndarray, src_y: np.ndarray) -> np.ndarray:
    """Backward warp with half-up nearest-neighbor sampling; outside = background."""
    ix = np.floor(src_x + 0.5).astype(np.int64)
    iy = np.floor(src_y + 0.5).astype(np.int64)
    h, w = mask.shape
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.zeros(mask.shape, dtype=bool)
    out[inside] = mask[iy[inside], ix[inside]]
    return out


# ---------------------------------------------------------------------------
# Affine jitter
# ---------------------------------------------------------------------------


def sample_affine(
    params: DeformationParams, box_w: int, box_h: int, rng: np.random.Generator
) -> tuple[float, float, float, float]:
    """Draw (scale_x, scale_y, shift_x, shift_y); draw order is part of the API."""
    s = rng.uniform(1.0 - params.scale_jitter, 1.0 + params.scale_jitter)
    if params.anisotropic_scale:
        sy = rng.uniform(1.0 - params.scale_jitter, 1.0 + params.scale_jitter)
    else:
        sy = s
    tx = rng.uniform(-params.translate_jitter * box_w, params.translate_jitter * box_w)
    ty = rng.uniform(-params.translate_jitter * box_h, params.translate_jitter * box_h)
    return s, sy, tx, ty


def apply_affine(
    mask: BinaryMask, scale_x: float, scale_y: float, shift_x: float, shift_y: float
) -> BinaryMask:
    """Scale about the foreground centroid, then translate; clip at the canvas."""
    if mask.is_empty():
        raise ValueError("cannot deform an empty mask")
    cx, cy = _centroid(mask.data)
    h, w = mask.data.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    src_x = cx + (xs - cx - shift_x) / scale_x
    src_y = cy + (ys - cy - shift_y) / scale_y
    return BinaryMask(_sample_nearest(mask.data, src_x, src_y))


def affine_deform(
    mask: BinaryMask, params: DeformationParams, rng: np.random.Generator
) -> BinaryMask:
    """Random isotropic scale and proportional translation of the foreground."""
    if mask.is_empty():
        raise ValueError("cannot deform an empty mask")
    x0, y0, x1, y1 = _foreground_bbox(mask.data)
    sx, sy, tx, ty = sample_affine(params, x1 - x0 + 1, y1 - y0 + 1, rng)
    return apply_affine(mask, sx, sy, tx, ty)


# ---------------------------------------------------------------------------
# Thin-plate-spline warp
# ---------------------------------------------------------------------------


def _tps_kernel(sq_dists: np.ndarray) -> np.ndarray:
    """Radial kernel U(r) = r^2 log r^2 with the r=0 limit of 0."""
    out = np.zeros_like(sq_dists)
    nz = sq_dists > 0
    out[nz] = sq_dists[nz] * np.log(sq_dists[nz])
    return out


def tps_fit(points: np.ndarray, values: np.ndarray, ridge: float = _TPS_RIDGE) -> tuple[np.ndarray, np.ndarray]:
    """Solve the TPS interpolation system for the given control points.

    Returns (kernel_weights (n, m), affine_coeffs (3, m)) such that the
    spline f(q) = sum_i w_i U(|q - p_i|) + a0 + a1 qx + a2 qy interpolates
    values at points. A small ridge on the kernel block keeps nearly
    coincident points solvable; callers verify the interpolation residual.
    """
    points = np.asarray(points, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = points.shape[0]
    diff = points[:, np.newaxis, :] - points[np.newaxis, :, :]
    k = _tps_kernel(np.sum(diff * diff, axis=2)) + ridge * np.eye(n)
    p = np.hstack([np.ones((n, 1)), points])
    a = np.zeros((n + 3, n + 3))
    a[:n, :n] = k
    a[:n, n:] = p
    a[n:, :n] = p.T
    rhs = np.zeros((n + 3, values.shape[1]))
    rhs[:n] = values
    sol = np.linalg.solve(a, rhs)
    return sol[:n], sol[n:]


def tps_eval(
    points: np.ndarray, weights: np.ndarray, affine: np.ndarray, queries: np.ndarray
) -> np.ndarray:
    """Evaluate a fitted spline at query points (N, 2) -> (N, m)."""
    queries = np.asarray(queries, dtype=np.float64)
    diff = queries[:, np.newaxis, :] - points[np.newaxis, :, :]
    u = _tps_kernel(np.sum(diff * diff, axis=2))
    return u @ weights + np.hstack([np.ones((queries.shape[0], 1)), queries]) @ affine


def warp_mask_tps(mask: BinaryMask, control_src: np.ndarray, control_dst: np.ndarray) -> BinaryMask:
    """Warp so control_src lands on control_dst (backward warp, NN sampling)."""
    control_src = np.asarray(control_src, dtype=np.float64)
    control_dst = np.asarray(control_dst, dtype=np.float64)
    # Backward map: interpolate source coordinates at destination points.
    weights, affine = tps_fit(control_dst, control_src)
    residual = np.abs(tps_eval(control_dst, weights, affine, control_dst) - control_src)
    if not np.all(np.isfinite(residual)) or residual.max() > _TPS_RESIDUAL_TOL:
        raise np.linalg.LinAlgError("degenerate thin-plate-spline control configuration")
    h, w = mask.data.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = tps_eval(control_dst, weights, affine, grid)
    return BinaryMask(
        _sample_nearest(mask.data, src[:, 0].reshape(h, w), src[:, 1].reshape(h, w))
    )


def tps_deform(
    mask: BinaryMask, params: DeformationParams, rng: np.random.Generator
) -> BinaryMask:
    """Non-rigid warp from jittered control points in the foreground box.

    Control points are sampled uniformly inside the foreground bounding box
    and displaced within +/- tps_point_jitter of the box width/height.
    Degenerate (collinear or coincident) configurations are resampled up to
    a bound. Boxes thinner than 2 px force collinearity and their jitter is
    sub-pixel, so the warp degenerates to the identity and is skipped.
    """
    if mask.is_empty():
        raise ValueError("cannot deform an empty mask")
    if params.tps_control_points < 3:
        raise ValueError("thin-plate-spline warp needs at least 3 control points")
    x0, y0, x1, y1 = _foreground_bbox(mask.data)
    box_w, box_h = x1 - x0 + 1, y1 - y0 + 1
    if box_w < 2 or box_h < 2:
        return mask
    n = params.tps_control_points
    last_err: Exception | None = None
    for _ in range(_MAX_TPS_RETRIES):
        src = np.stack(
            [rng.uniform(x0, x1, size=n), rng.uniform(y0, y1, size=n)], axis=1
        )
        shift = np.stack(
            [
                rng.uniform(-params.tps_point_jitter * box_w, params.tps_point_jitter * box_w, size=n),
                rng.uniform(-params.tps_point_jitter * box_h, params.tps_point_jitter * box_h, size=n),
            ],
            axis=1,
        )
        try:
            return warp_mask_tps(mask, src, src + shift)
        except np.linalg.LinAlgError as exc:
            last_err = exc
    raise RuntimeError(
        f"no valid thin-plate-spline configuration after {_MAX_TPS_RETRIES} draws"
    ) from last_err


# ---------------------------------------------------------------------------
# Coarsening
# ---------------------------------------------------------------------------


def dilate(mask: BinaryMask, radius: float) -> BinaryMask:
    """Morphological dilation with a Euclidean disc of the given radius.

    A pixel is foreground iff some input foreground pixel lies within
    Euclidean distance <= radius. Distances are compared exactly (integer
    squared offsets against radius^2).
    """
    if radius < 0:
        raise ValueError("dilation radius must be >= 0")
    if radius == 0 or mask.is_empty():
        return mask
    _, (near_y, near_x) = ndimage.distance_transform_edt(
        ~mask.data, return_distances=True, return_indices=True
    )
    h, w = mask.data.shape
    ys, xs = np.mgrid[0:h, 0:w]
    dy = ys - near_y
    dx = xs - near_x
    return BinaryMask(dy * dy + dx * dx <= radius * radius)


# ---------------------------------------------------------------------------
# Full pipeline and set builders
# ---------------------------------------------------------------------------


def _retry_nonempty(stage, mask: BinaryMask, rng: np.random.Generator) -> BinaryMask:
    """Re-draw a deformation that wiped out the foreground; identity as last resort."""
    out = stage(mask, rng)
    for _ in range(_MAX_EMPTY_RETRIES):
        if not out.is_empty():
            return out
        out = stage(mask, rng)
    return mask if out.is_empty() else out


def synthesize_input_mask(
    annotation: BinaryMask, params: DeformationParams, rng: np.random.Generator
) -> BinaryMask:
    """Affine jitter, then TPS warp, then disc dilation, per the enable flags."""
    if annotation.is_empty():
        raise ValueError("cannot synthesize from an empty annotation")
    mask = annotation
    if params.enable_affine:
        mask = _retry_nonempty(lambda m, r: affine_deform(m, params, r), mask, rng)
    if params.enable_nonrigid:
        mask = _retry_nonempty(lambda m, r: tps_deform(m, params, r), mask, rng)
    if params.enable_dilation:
        mask = dilate(mask, params.dilation_radius)
    return mask


def _derive_rng(seed: int, item_index: int) -> np.random.Generator:
    # seed XOR item-index keeps parallel and serial corpus builds bit-identical.
    return np.random.default_rng((seed ^ item_index) & 0xFFFFFFFFFFFFFFFF)


def build_offline_corpus(
    source: Iterable[tuple[Image, BinaryMask | None]],
    params: DeformationParams,
    masks_per_image: int = 2,
) -> Iterator[TrainingSample]:
    """Yield deformed-input training samples, masks_per_image per source image.

    ``source`` yields (image, instance mask) pairs; see
    :func:`manifest_image_pairs` for building one from a dataset manifest.
    Images with a missing or empty mask are skipped with a warning.
    """
    if masks_per_image < 1:
        raise ValueError("masks_per_image must be >= 1")
    item_index = 0
    skipped = 0
    for source_index, (image, mask) in enumerate(source):
        if mask is None or mask.is_empty():
            skipped += 1
            logger.warning("skipping source image %d: no usable instance mask", source_index)
            continue
        for _ in range(masks_per_image):
            rng = _derive_rng(params.rng_seed, item_index)
            yield TrainingSample(
                image=image,
                input_mask=synthesize_input_mask(mask, params, rng),
                target_mask=mask,
            )
            item_index += 1
    if skipped:
        logger.warning("offline corpus: skipped %d mask-less source images", skipped)


def manifest_image_pairs(manifest) -> Iterator[tuple[Image, BinaryMask | None]]:
    """Flatten a manifest into (frame, GT mask) pairs for corpus building."""
    for sequence in manifest:
        gt = sequence.ground_truth
        for i, frame in enumerate(sequence.frames):
            yield frame, (gt[i] if gt is not None else None)


def _rotate_flip_image(image: Image, flip: bool, angle: float) -> Image:
    arr = image.data
    if flip:
        arr = arr[:, ::-1]
    if angle != 0.0:
        arr = ndimage.rotate(
            arr.astype(np.float64), angle, axes=(1, 0), reshape=False, order=1, mode="constant"
        )
        arr = np.clip(np.floor(arr + 0.5), 0, 255)
    return Image(np.ascontiguousarray(arr).astype(np.uint8))


def _rotate_flip_mask(mask: BinaryMask, flip: bool, angle: float) -> BinaryMask:
    arr = mask.data
    if flip:
        arr = arr[:, ::-1]
    if angle != 0.0:
        arr = ndimage.rotate(arr, angle, axes=(1, 0), reshape=False, order=0, mode="constant")
    return BinaryMask(np.ascontiguousarray(arr))


def build_online_set(
    first_frame: Image, annotation: BinaryMask, params: AugmentationParams
) -> Iterator[TrainingSample]:
    """Expand one annotated frame into ``samples_target`` training samples.

    Samples cycle through the (flip x rotation) grid; image and target are
    transformed together and the rough input mask is synthesized from the
    transformed target with a fresh deformation draw per sample.
    """
    if annotation.is_empty():
        raise ValueError("cannot augment an empty annotation")
    if (annotation.height, annotation.width) != (first_frame.height, first_frame.width):
        raise ValueError("annotation does not match the frame resolution")
    grid = [(flip, angle) for flip in ((False, True) if params.flips else (False,)) for angle in params.rotations]
    for i in range(params.samples_target):
        flip, angle = grid[i % len(grid)]
        target = _rotate_flip_mask(annotation, flip, angle)
        if target.is_empty():
            # Rotation clipped the object out entirely; keep the clean frame.
            flip, angle = False, 0.0
            target = annotation
        image = _rotate_flip_image(first_frame, flip, angle)
        rng = _derive_rng(params.deformation.rng_seed, i)
        input_mask = (
            synthesize_input_mask(target, params.deformation, rng)
            if (params.deformation.enable_affine or params.deformation.enable_nonrigid or params.deformation.enable_dilation)
            else target
        )
        yield TrainingSample(image=image, input_mask=input_mask, target_mask=target)
