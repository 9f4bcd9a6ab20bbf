"""Spatio-temporal fully-connected CRF post-processing.

Two-label dense CRF over all pixels of a short temporal window: unary
energies are negative log probabilities of the per-frame score maps,
pairwise Potts potentials combine an appearance kernel over (color,
position, frame) and a within-frame smoothness kernel. Inference is
mean field with double-buffered parallel sweeps; a sequential
coordinate-ascent mode and an exhaustive MAP oracle exist for
verification on small instances.

Positions use raw pixel units for x and y and the window slot index for
t. Pairs farther apart than 3 sigma in position are dropped, which
bounds the exact O(N^2) message passing while perturbing each message
by less than e^-4.5 per dropped pair.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import BinaryMask, Image, ScoreMap, VideoSequence
from .refiners import threshold

_CLAMP = 1e-5
_DENSE_LIMIT = 2048
_EXACT_LIMIT = 20


@dataclass(frozen=True)
class CrfParams:
    """Published post-processing defaults; sigmas in pixel/frame units."""

    iterations: int = 10
    appearance_weight: float = 5.0
    appearance_rgb_sigma: float = 10.0
    appearance_xyt_sigma: float = 5.0
    smoothness_weight: float = 1.0
    smoothness_xy_sigma: float = 1.0
    temporal_window: int = 3

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.appearance_rgb_sigma <= 0 or self.appearance_xyt_sigma <= 0 or self.smoothness_xy_sigma <= 0:
            raise ValueError("kernel sigmas must be > 0")
        if self.appearance_weight < 0 or self.smoothness_weight < 0:
            raise ValueError("kernel weights must be >= 0")
        if self.temporal_window < 1 or self.temporal_window % 2 == 0:
            raise ValueError("temporal window must be odd and >= 1")


def _check_window(frames: list[Image], unaries: list[ScoreMap], params: CrfParams) -> tuple[np.ndarray, np.ndarray]:
    if len(frames) != len(unaries):
        raise ValueError(f"{len(frames)} frames but {len(unaries)} score maps")
    if len(frames) != params.temporal_window:
        raise ValueError(
            f"window carries {len(frames)} frames, params expect {params.temporal_window}"
        )
    shape = (frames[0].height, frames[0].width)
    for frame, unary in zip(frames, unaries):
        if (frame.height, frame.width) != shape or unary.data.shape != shape:
            raise ValueError("all frames and score maps must share one resolution")
    images = np.stack([f.data.astype(np.float64) for f in frames])
    probs = np.stack([u.data for u in unaries])
    return images, probs


def _dense_kernel(images: np.ndarray, params: CrfParams) -> np.ndarray:
    """Full pairwise kernel matrix, diagonal zero, 3-sigma position cutoff."""
    t_n, h, w = images.shape[:3]
    n = t_n * h * w
    if n > _DENSE_LIMIT:
        raise ValueError(f"instance has {n} pixels, dense kernel capped at {_DENSE_LIMIT}")
    tt, yy, xx = np.meshgrid(np.arange(t_n), np.arange(h), np.arange(w), indexing="ij")
    pos = np.stack([xx.ravel(), yy.ravel(), tt.ravel()], axis=1).astype(np.float64)
    color = images.reshape(n, -1)
    d_xy = np.sum((pos[:, None, :2] - pos[None, :, :2]) ** 2, axis=2)
    d_t = (pos[:, None, 2] - pos[None, :, 2]) ** 2
    d_pos = d_xy + d_t
    d_rgb = np.sum((color[:, None, :] - color[None, :, :]) ** 2, axis=2)
    app = params.appearance_weight * np.exp(
        -d_rgb / (2 * params.appearance_rgb_sigma**2)
        - d_pos / (2 * params.appearance_xyt_sigma**2)
    )
    app[d_pos > (3 * params.appearance_xyt_sigma) ** 2] = 0.0
    smooth = params.smoothness_weight * np.exp(-d_xy / (2 * params.smoothness_xy_sigma**2))
    smooth[(d_t > 0) | (d_xy > (3 * params.smoothness_xy_sigma) ** 2)] = 0.0
    kernel = app + smooth
    np.fill_diagonal(kernel, 0.0)
    return kernel


class _OffsetKernel:
    """Message passing by explicit offset enumeration; exact within the cutoff.

    For every (dt, dy, dx) inside the 3-sigma balls the contribution of all
    pixel pairs at that offset is a shifted elementwise product, so messages
    cost O(N * offsets) instead of O(N^2).
    """

    def __init__(self, images: np.ndarray, params: CrfParams) -> None:
        self.images = images
        self.params = params
        self.shape = images.shape[:3]
        cut_app = 3 * params.appearance_xyt_sigma
        cut_sm = 3 * params.smoothness_xy_sigma
        reach = int(np.floor(max(cut_app, cut_sm)))
        t_n, h, w = self.shape
        # Shifts at or beyond the frame extent pair no pixels at all.
        reach_y = min(reach, h - 1)
        reach_x = min(reach, w - 1)
        self.offsets: list[tuple[int, int, int, float, float]] = []
        for dt in range(-(t_n - 1), t_n):
            for dy in range(-reach_y, reach_y + 1):
                for dx in range(-reach_x, reach_x + 1):
                    if dt == 0 and dy == 0 and dx == 0:
                        continue
                    d_xy = dy * dy + dx * dx
                    d_pos = d_xy + dt * dt
                    app = 0.0
                    if d_pos <= cut_app**2:
                        app = params.appearance_weight * np.exp(
                            -d_pos / (2 * params.appearance_xyt_sigma**2)
                        )
                    sm = 0.0
                    if dt == 0 and d_xy <= cut_sm**2:
                        sm = params.smoothness_weight * np.exp(
                            -d_xy / (2 * params.smoothness_xy_sigma**2)
                        )
                    if app > 0.0 or sm > 0.0:
                        self.offsets.append((dt, dy, dx, app, sm))

    @staticmethod
    def _slices(extent: int, delta: int) -> tuple[slice, slice]:
        # Destination and source slices for a shift by delta along one axis.
        if delta >= 0:
            return slice(delta, extent), slice(0, extent - delta)
        return slice(0, extent + delta), slice(-delta, extent)

    def apply(self, field: np.ndarray) -> np.ndarray:
        """Sum of kernel-weighted neighbor values of `field` (T, H, W)."""
        t_n, h, w = self.shape
        out = np.zeros(self.shape, dtype=np.float64)
        sigma_rgb = self.params.appearance_rgb_sigma
        for dt, dy, dx, app, sm in self.offsets:
            st, ss = self._slices(t_n, dt)
            yt, ys = self._slices(h, dy)
            xt, xs = self._slices(w, dx)
            shifted = field[ss, ys, xs]
            if app > 0.0:
                diff = self.images[st, yt, xt] - self.images[ss, ys, xs]
                gain = app * np.exp(
                    -np.sum(diff * diff, axis=-1) / (2 * sigma_rgb**2)
                )
                if sm > 0.0:
                    gain = gain + sm
            else:
                gain = sm
            out[st, yt, xt] += gain * shifted
        return out


def _clamped(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fg = np.clip(probs, _CLAMP, 1.0 - _CLAMP)
    bg = np.clip(1.0 - probs, _CLAMP, 1.0 - _CLAMP)
    total = fg + bg
    return fg / total, bg / total


def _free_energy(kernel: np.ndarray, log_fg: np.ndarray, log_bg: np.ndarray, q_fg: np.ndarray, q_bg: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = np.where(q_fg > 0, q_fg * np.log(q_fg), 0.0) + np.where(
            q_bg > 0, q_bg * np.log(q_bg), 0.0
        )
    unary = -(q_fg * log_fg + q_bg * log_bg)
    pairwise = float(q_fg @ kernel @ q_bg)
    return float(np.sum(unary + entropy)) + pairwise


def mean_field(
    frames: list[Image],
    unaries: list[ScoreMap],
    params: CrfParams,
    update_mode: str = "parallel",
    track_free_energy: bool = False,
) -> tuple[list[ScoreMap], list[float]]:
    """Run mean-field sweeps; returns per-frame marginals and an energy trace.

    The trace holds the variational free energy after initialization and
    after each sweep (dense instances only; empty otherwise). Parallel mode
    updates every pixel from the previous sweep's marginals; sequential
    mode is true coordinate ascent in raster order and needs the dense
    kernel, so it is limited to small instances.
    """
    if update_mode not in ("parallel", "sequential"):
        raise ValueError(f"unknown update mode {update_mode!r}")
    images, probs = _check_window(frames, unaries, params)
    t_n, h, w = probs.shape
    n = t_n * h * w
    fg0, bg0 = _clamped(probs)
    log_fg = np.log(fg0).ravel()
    log_bg = np.log(bg0).ravel()

    dense = n <= _DENSE_LIMIT
    if not dense and update_mode == "sequential":
        raise ValueError(
            f"sequential updates need the dense kernel (<= {_DENSE_LIMIT} pixels), got {n}"
        )
    kernel = _dense_kernel(images, params) if dense else None
    offset_kernel = None if dense else _OffsetKernel(images, params)

    q_fg = fg0.ravel().copy()
    q_bg = bg0.ravel().copy()
    trace: list[float] = []
    if track_free_energy:
        if kernel is None:
            raise ValueError("free-energy tracking needs the dense kernel")
        trace.append(_free_energy(kernel, log_fg, log_bg, q_fg, q_bg))

    for _ in range(params.iterations):
        if update_mode == "parallel":
            if kernel is not None:
                msg_fg = kernel @ q_bg
                msg_bg = kernel @ q_fg
            else:
                msg_fg = offset_kernel.apply(q_bg.reshape(t_n, h, w)).ravel()
                msg_bg = offset_kernel.apply(q_fg.reshape(t_n, h, w)).ravel()
            new_fg = np.exp(log_fg - msg_fg)
            new_bg = np.exp(log_bg - msg_bg)
            total = new_fg + new_bg
            q_fg = new_fg / total
            q_bg = new_bg / total
        else:
            for i in range(n):
                row = kernel[i]
                new_fg = np.exp(log_fg[i] - row @ q_bg)
                new_bg = np.exp(log_bg[i] - row @ q_fg)
                total = new_fg + new_bg
                q_fg[i] = new_fg / total
                q_bg[i] = new_bg / total
        if track_free_energy:
            trace.append(_free_energy(kernel, log_fg, log_bg, q_fg, q_bg))

    marginals = q_fg.reshape(t_n, h, w)
    return [ScoreMap(marginals[t]) for t in range(t_n)], trace


def crf_refine(
    frames: list[Image],
    unaries: list[ScoreMap],
    params: CrfParams,
    update_mode: str = "parallel",
) -> list[ScoreMap]:
    """Refined per-frame foreground marginals for one temporal window."""
    marginals, _ = mean_field(frames, unaries, params, update_mode=update_mode)
    return marginals


def crf_exact_map(
    frames: list[Image], unaries: list[ScoreMap], params: CrfParams
) -> list[BinaryMask]:
    """Exhaustive minimum-energy labeling; verification oracle for <= 20 pixels."""
    images, probs = _check_window(frames, unaries, params)
    t_n, h, w = probs.shape
    n = t_n * h * w
    if n > _EXACT_LIMIT:
        raise ValueError(f"exact MAP enumerates 2^n labelings; {n} pixels exceed {_EXACT_LIMIT}")
    fg0, bg0 = _clamped(probs)
    cost_fg = -np.log(fg0).ravel()
    cost_bg = -np.log(bg0).ravel()
    kernel = _dense_kernel(images, params)

    labelings = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.float64)
    unary = labelings @ cost_fg + (1.0 - labelings) @ cost_bg
    # Potts disagreement count per pair: x_i (1 - x_j) summed over ordered pairs.
    pairwise = np.einsum("li,ij,lj->l", labelings, kernel, 1.0 - labelings)
    best = labelings[int(np.argmin(unary + pairwise))].astype(bool).reshape(t_n, h, w)
    return [BinaryMask(best[t]) for t in range(t_n)]


def postprocess_sequence(
    sequence: VideoSequence,
    scores: list[ScoreMap],
    params: CrfParams,
    update_mode: str = "parallel",
) -> list[BinaryMask]:
    """Slide the temporal window over the sequence and threshold the centers.

    Windows are replicate-padded at both ends, so every frame is once the
    center of a full window.
    """
    n = len(sequence.frames)
    if len(scores) != n:
        raise ValueError(f"{n} frames but {len(scores)} score maps")
    half = params.temporal_window // 2
    out = []
    for center in range(n):
        picks = [min(max(center + d, 0), n - 1) for d in range(-half, half + 1)]
        frames = [sequence.frames[i] for i in picks]
        unaries = [scores[i] for i in picks]
        marginals = crf_refine(frames, unaries, params, update_mode=update_mode)
        out.append(threshold(marginals[half], 0.5))
    return out
