"""Mask-refinement backends.

A refiner maps (image, guidance mask) to a per-pixel foreground score map.
The propagation engine only sees this contract, so backends range from the
trivial (echo the guidance) to a learned network reached over the wire
protocol. The color-model backend is a closed-form stand-in for a trained
network: strong enough on color-separable scenes to exercise the full
pipeline, deterministic, and cheap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage

from .core import BinaryMask, Image, ScoreMap, _freeze
from .synthesis import TrainingSample

_COLOR_BINS = 16
_POS_BINS = 4
_N_FEATURES = _COLOR_BINS**3 * _POS_BINS**2


class RefinerError(RuntimeError):
    """A backend could not produce a valid score map."""


@dataclass(frozen=True)
class RefinerRequest:
    """One refinement query.

    ``guidance_mask`` None asks for an unguided segmentation (backends that
    need guidance reject it). ``frame_index`` identifies the frame within
    its sequence for backends keyed by frame, and is otherwise ignored.
    """

    image: Image
    guidance_mask: BinaryMask | None = None
    frame_index: int | None = None

    def __post_init__(self) -> None:
        if self.guidance_mask is not None and (
            self.guidance_mask.height,
            self.guidance_mask.width,
        ) != (self.image.height, self.image.width):
            raise ValueError(
                f"guidance mask {self.guidance_mask.width}x{self.guidance_mask.height} "
                f"does not match image {self.image.width}x{self.image.height}"
            )


@runtime_checkable
class Refiner(Protocol):
    """Anything that maps a request to per-pixel foreground scores."""

    def refine(self, request: RefinerRequest) -> ScoreMap: ...


def refine(refiner: Refiner, request: RefinerRequest) -> ScoreMap:
    """Dispatch a request to a backend (thin convenience wrapper)."""
    return refiner.refine(request)


def threshold(scores: ScoreMap, tau: float = 0.5) -> BinaryMask:
    """Binarize scores: foreground strictly above tau."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    return BinaryMask(scores.data > tau)


def _mask_scores(mask: BinaryMask) -> ScoreMap:
    return ScoreMap(mask.data.astype(np.float64))


@dataclass(frozen=True)
class IdentityRefiner:
    """Echoes the guidance mask as hard 0/1 scores.

    threshold(refine(request), 0.5) returns the guidance exactly, making
    propagation a pure copy (radius 0) or an iterated dilation (radius > 0).
    """

    def refine(self, request: RefinerRequest) -> ScoreMap:
        if request.guidance_mask is None:
            raise RefinerError("identity backend requires a guidance mask")
        return _mask_scores(request.guidance_mask)


@dataclass(frozen=True)
class OracleRefiner:
    """Answers with ground truth; test-harness backend for upper bounds."""

    ground_truth: tuple[BinaryMask, ...]

    def __post_init__(self) -> None:
        if not self.ground_truth:
            raise ValueError("oracle backend needs at least one ground-truth mask")

    def refine(self, request: RefinerRequest) -> ScoreMap:
        if request.frame_index is None:
            raise RefinerError("oracle backend requires a frame index")
        if not 0 <= request.frame_index < len(self.ground_truth):
            raise RefinerError(
                f"no ground truth for frame {request.frame_index} "
                f"(have {len(self.ground_truth)})"
            )
        gt = self.ground_truth[request.frame_index]
        if (gt.height, gt.width) != (request.image.height, request.image.width):
            raise RefinerError("ground-truth resolution does not match the image")
        return _mask_scores(gt)


def _feature_indices(image: Image) -> np.ndarray:
    """Per-pixel histogram bin: quantized RGB x normalized-position cell."""
    data = image.data
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    h, w = data.shape[:2]
    step = 256 // _COLOR_BINS
    r, g, b = (data[:, :, i].astype(np.int64) // step for i in range(3))
    ys, xs = np.mgrid[0:h, 0:w]
    py = ys * _POS_BINS // h
    px = xs * _POS_BINS // w
    return ((r * _COLOR_BINS + g) * _COLOR_BINS + b) * (_POS_BINS**2) + py * _POS_BINS + px


@dataclass(frozen=True)
class OnlineColorModelState:
    """Fitted per-class feature distributions and the class prior.

    ``fg_log_ratio`` style tricks are avoided on purpose: the fields are the
    plain normalized histograms so tests can inspect them directly.
    """

    fg_hist: np.ndarray
    bg_hist: np.ndarray
    fg_prior: float
    mix_weight: float

    def __post_init__(self) -> None:
        for hist in (self.fg_hist, self.bg_hist):
            if hist.shape != (_N_FEATURES,):
                raise ValueError("histogram has the wrong number of bins")
            if not np.isclose(hist.sum(), 1.0, atol=1e-9):
                raise ValueError("histograms must be normalized")
        if not 0.0 <= self.fg_prior <= 1.0:
            raise ValueError("foreground prior must be a probability")
        if not 0.0 <= self.mix_weight <= 1.0:
            raise ValueError("mixing weight must be in [0, 1]")
        _freeze(self.fg_hist)
        _freeze(self.bg_hist)


def fit_online(
    samples: Iterable[TrainingSample], mix_weight: float = 0.5
) -> OnlineColorModelState:
    """Accumulate foreground/background feature histograms over samples.

    The clean target mask splits each image into the two classes; the rough
    input masks are not consumed here (they matter only to backends that
    take guidance as an input channel). Unseen bins back off to a uniform
    pseudocount of 1 so no posterior is ever exactly zero.
    """
    fg_counts = np.zeros(_N_FEATURES, dtype=np.float64)
    bg_counts = np.zeros(_N_FEATURES, dtype=np.float64)
    n_samples = 0
    for sample in samples:
        idx = _feature_indices(sample.image)
        fg = sample.target_mask.data
        fg_counts += np.bincount(idx[fg], minlength=_N_FEATURES)
        bg_counts += np.bincount(idx[~fg], minlength=_N_FEATURES)
        n_samples += 1
    if n_samples == 0:
        raise ValueError("cannot fit on an empty sample stream")
    fg_total = fg_counts.sum()
    bg_total = bg_counts.sum()
    if fg_total == 0:
        raise ValueError("cannot fit: every target mask is empty")
    fg_smoothed = np.maximum(fg_counts, 1.0)
    bg_smoothed = np.maximum(bg_counts, 1.0)
    return OnlineColorModelState(
        fg_hist=fg_smoothed / fg_smoothed.sum(),
        bg_hist=bg_smoothed / bg_smoothed.sum(),
        fg_prior=float(fg_total / (fg_total + bg_total)),
        mix_weight=float(mix_weight),
    )


@dataclass(frozen=True)
class OnlineColorModelRefiner:
    """Histogram posterior blended with a guidance-distance spatial prior.

    score = posterior^lambda * prior^(1-lambda), where the prior decays as
    exp(-d / sigma) with d the Euclidean distance to the guidance mask and
    sigma = 0.1 * max(width, height). Without guidance lambda is forced to
    1 (pure appearance).
    """

    state: OnlineColorModelState

    def refine(self, request: RefinerRequest) -> ScoreMap:
        idx = _feature_indices(request.image)
        p_fg = self.state.fg_hist[idx] * self.state.fg_prior
        p_bg = self.state.bg_hist[idx] * (1.0 - self.state.fg_prior)
        posterior = np.where(p_fg + p_bg > 0, p_fg / np.maximum(p_fg + p_bg, 1e-300), 0.0)
        guidance = request.guidance_mask
        if guidance is None:
            return ScoreMap(posterior)
        lam = self.state.mix_weight
        prior = _spatial_prior(guidance)
        return ScoreMap(posterior**lam * prior ** (1.0 - lam))


def _spatial_prior(guidance: BinaryMask) -> np.ndarray:
    """exp(-d/sigma) of the distance outside the guidance; 0 if it is empty."""
    if guidance.is_empty():
        return np.zeros(guidance.data.shape, dtype=np.float64)
    dist = ndimage.distance_transform_edt(~guidance.data)
    sigma = 0.1 * max(guidance.width, guidance.height)
    return np.exp(-dist / sigma)


class RefineClient(Protocol):
    """Transport used by ExternalRefiner; the wire module provides one."""

    def refine(self, image: Image, guidance: BinaryMask | None) -> np.ndarray: ...

    def fine_tune(self, samples: Sequence[TrainingSample]) -> int: ...


@dataclass(frozen=True)
class ExternalRefiner:
    """Backend at the far end of the wire protocol; see the wire module."""

    client: RefineClient

    def refine(self, request: RefinerRequest) -> ScoreMap:
        scores = self.client.refine(request.image, request.guidance_mask)
        data = np.asarray(scores, dtype=np.float64)
        if data.shape != (request.image.height, request.image.width):
            raise RefinerError(
                f"backend returned a {data.shape} score map for a "
                f"{request.image.height}x{request.image.width} image"
            )
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise RefinerError("backend scores must be finite probabilities in [0, 1]")
        return ScoreMap(data)

    def fine_tune(self, samples: Sequence[TrainingSample]) -> int:
        return self.client.fine_tune(samples)
