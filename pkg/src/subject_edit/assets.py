"""Procedural toy assets: a translating textured square and still reference images.

Every image is built from 2x2-pixel blocks and objects sit on even pixel
offsets, so frames lie exactly in the span of a patch-2 toy encoder.
"""

from __future__ import annotations

import numpy as np

from .types import ForegroundMask, FrameVideo


def _blocks(rng: np.random.Generator, h: int, w: int, lo, hi, block: int) -> np.ndarray:
    cells = rng.uniform(lo, hi, size=(h // block, w // block, 3))
    return cells.repeat(block, axis=0).repeat(block, axis=1)


def moving_square(n_frames: int = 16, size: int = 64, square: int = 16, speed: int = 2,
                  start: tuple[int, int] = (24, 8), block: int = 2,
                  seed: int = 0) -> tuple[FrameVideo, ForegroundMask]:
    """Textured square translating ``speed`` px/frame to the right over static block noise."""
    rng = np.random.default_rng(seed)
    background = _blocks(rng, size, size, (0.25, 0.25, 0.25), (0.45, 0.45, 0.45), block)
    texture = _blocks(rng, square, square, (0.8, 0.5, 0.1), (1.0, 0.7, 0.3), block)
    y0, x0 = start
    if x0 + speed * (n_frames - 1) + square > size or y0 + square > size:
        raise ValueError("square leaves the frame")
    frames = np.repeat(background[None], n_frames, axis=0)
    mask = np.zeros((n_frames, size, size), np.uint8)
    for i in range(n_frames):
        x = x0 + speed * i
        frames[i, y0:y0 + square, x:x + square] = texture
        mask[i, y0:y0 + square, x:x + square] = 1
    return FrameVideo(frames), ForegroundMask(mask)


def reference_images(count: int = 3, size: int = 64, block: int = 2,
                     seed: int = 1) -> tuple[FrameVideo, ForegroundMask]:
    """Stills of one textured diamond-shaped subject at varying positions and scales."""
    rng = np.random.default_rng(seed)
    texture = _blocks(rng, size, size, (0.1, 0.45, 0.75), (0.3, 0.65, 0.95), block)
    cy, cx = np.mgrid[0:size:block, 0:size:block] + block / 2 - 0.5
    frames, masks = [], []
    for i in range(count):
        bg = _blocks(rng, size, size, (0.25, 0.25, 0.25), (0.45, 0.45, 0.45), block)
        radius = 12 + 2 * i
        centre_y, centre_x = 28 + 2 * i, 24 + 6 * i
        cell = ((np.abs(cy - centre_y) + np.abs(cx - centre_x)) <= radius)
        m = cell.repeat(block, axis=0).repeat(block, axis=1)
        frames.append(np.where(m[..., None], texture, bg))
        masks.append(m.astype(np.uint8))
    return FrameVideo(np.stack(frames)), ForegroundMask(np.stack(masks))
