"""Shared containers passed between pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# Latent videos are channel-last tensors of shape (N, H, W, d).
LatentVideo = torch.Tensor


@dataclass
class FrameVideo:
    """RGB frames, shape (N, H, W, 3), values in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self) -> None:
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ValueError(f"frames must have shape (N, H, W, 3), got {f.shape}")
        if f.shape[0] < 1:
            raise ValueError("a video needs at least one frame")
        if f.min() < 0.0 or f.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")
        self.frames = f

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class SemanticFeatureMap:
    """Per-frame token features, shape (N, h, w, c)."""

    features: np.ndarray
    source_resolution: tuple[int, int]

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]

    @property
    def channels(self) -> int:
        return self.features.shape[3]


@dataclass
class ForegroundMask:
    """Binary per-frame mask, shape (N, h, w) with entries in {0, 1}."""

    mask: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.mask)
        if m.ndim != 3:
            raise ValueError(f"mask must have shape (N, h, w), got {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        self.mask = m.astype(np.uint8)


@dataclass
class GuidanceStack:
    """Projected guidance features, one channel-last tensor per encoder level."""

    levels: list[torch.Tensor]
    weight: float = 1.0

    def __post_init__(self) -> None:
        if len(self.levels) != 4:
            raise ValueError(f"guidance needs exactly 4 levels, got {len(self.levels)}")
        if self.weight < 0:
            raise ValueError(f"guidance weight must be >= 0, got {self.weight}")
        shapes = self.shapes()
        for upper, lower in zip(shapes[:-1], shapes[1:]):
            if len(upper) != 4 or len(lower) != 4 or lower[0] != upper[0] \
                    or lower[1:3] != (upper[1] // 2, upper[2] // 2):
                raise ValueError(f"guidance levels {shapes} do not form a halving ladder")

    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(f.shape) for f in self.levels]
