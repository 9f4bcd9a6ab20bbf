"""Shared test helpers, including independent oracle implementations.

The oracles here deliberately avoid the library's own code paths: dilation
is a literal offset scan, not a distance transform, so agreement between
the two is meaningful evidence.
"""

from __future__ import annotations

import numpy as np

from masktrack import BinaryMask


def brute_dilate(mask: np.ndarray, radius: float) -> np.ndarray:
    """Set a pixel iff any foreground pixel lies within Euclidean radius."""
    h, w = mask.shape
    r = int(np.floor(radius))
    offsets = [
        (dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if dy * dy + dx * dx <= radius * radius
    ]
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in offsets:
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w:
                    out[yy, xx] = True
    return out


def art_mask(rows: list[str]) -> BinaryMask:
    """Build a mask from strings of '.' and '#'; rows must be equal length."""
    return BinaryMask(np.array([[c == "#" for c in row] for row in rows]))


def random_mask(rng: np.random.Generator, height: int, width: int, p: float = 0.3) -> BinaryMask:
    return BinaryMask(rng.random((height, width)) < p)


def random_nonempty_mask(
    rng: np.random.Generator, height: int, width: int, p: float = 0.3
) -> BinaryMask:
    while True:
        mask = random_mask(rng, height, width, p)
        if not mask.is_empty():
            return mask


def tree_bytes(root) -> dict[str, bytes]:
    """Relative path -> file bytes for every file under root."""
    from pathlib import Path

    root = Path(root)
    return {
        str(path.relative_to(root)): path.read_bytes()
        for path in sorted(root.rglob("*"))
        if path.is_file()
    }
