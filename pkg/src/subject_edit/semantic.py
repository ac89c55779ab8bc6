"""Semantic token features, PCA foreground masks and PCA colour renderings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .types import ForegroundMask, FrameVideo, SemanticFeatureMap


class SemanticBackend(Protocol):
    patch: int

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        """Map (N, H, W, 3) frames to (N, H/patch, W/patch, c) token features."""


class ToySemanticBackend:
    """Frozen random patch embedding followed by one spatial self-attention mixing layer.

    Stands in for a self-supervised ViT: any callable with the same contract can
    replace it without touching the masking or projection code.
    """

    def __init__(self, patch: int = 28, dim: int = 64, mix: float = 0.5, seed: int = 0):
        self.patch = patch
        self.dim = dim
        self.mix = mix
        rng = np.random.default_rng(seed)
        patch_dim = 3 * patch * patch
        self.embed = rng.standard_normal((patch_dim, dim)) / np.sqrt(patch_dim)
        self.wq = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        self.wk = rng.standard_normal((dim, dim)) / np.sqrt(dim)

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        n, h, w, _ = frames.shape
        p = self.patch
        gh, gw = h // p, w // p
        patches = (
            frames.reshape(n, gh, p, gw, p, 3)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, gh * gw, 3 * p * p)
        )
        x = patches @ self.embed
        logits = (x @ self.wq) @ (x @ self.wk).transpose(0, 2, 1) / np.sqrt(self.dim)
        logits -= logits.max(axis=-1, keepdims=True)
        attn = np.exp(logits)
        attn /= attn.sum(axis=-1, keepdims=True)
        x = x + self.mix * (attn @ x)
        return x.reshape(n, gh, gw, self.dim)


def fit_to_backend(v: FrameVideo, backend: SemanticBackend, size: tuple[int, int] | None = None,
                   mode: str = "nearest") -> FrameVideo:
    """Resize frames to ``size`` (default: nearest patch multiple) before extraction."""
    p = backend.patch
    h, w = v.size
    if size is None:
        size = (max(1, round(h / p)) * p, max(1, round(w / p)) * p)
    if (h, w) == tuple(size):
        return v
    x = torch.from_numpy(v.frames).permute(0, 3, 1, 2)
    if mode == "nearest":
        y = F.interpolate(x, size=size, mode="nearest")
    else:
        y = F.interpolate(x, size=size, mode=mode, align_corners=False)
    return FrameVideo(y.permute(0, 2, 3, 1).clamp(0.0, 1.0).numpy())


def extract_semantic_features(v: FrameVideo, backend: SemanticBackend) -> SemanticFeatureMap:
    h, w = v.size
    if h % backend.patch or w % backend.patch:
        raise ValueError(f"frame size {h}x{w} is not divisible by backend patch size {backend.patch}")
    return SemanticFeatureMap(backend(v.frames), (h, w))


@dataclass
class PCABasis:
    mean: np.ndarray  # (c,)
    components: np.ndarray  # (k, c), orthonormal rows
    explained_variance: np.ndarray  # (k,), non-increasing

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def project(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) @ self.components.T


def fit_pca(f: SemanticFeatureMap, k: int = 1) -> PCABasis:
    """Joint PCA over the tokens of every frame."""
    x = f.features.reshape(-1, f.channels).astype(np.float64)
    if not 1 <= k <= min(x.shape):
        raise ValueError(f"k must lie in [1, {min(x.shape)}], got {k}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, sv, vt = np.linalg.svd(xc, full_matrices=False)
    var = sv**2 / max(x.shape[0] - 1, 1)
    if var[0] <= 0.0:
        raise ValueError("features have zero variance; PCA is undefined")
    comps = vt[:k].copy()
    # Deterministic sign: largest-magnitude entry of each component is positive.
    signs = np.sign(comps[np.arange(k), np.abs(comps).argmax(axis=1)])
    comps *= signs[:, None]
    return PCABasis(mean, comps, var[:k].copy())


@dataclass(frozen=True)
class ThresholdPolicy:
    method: Literal["otsu", "quantile"] = "otsu"
    quantile: float = 0.5
    # "auto" labels the class with the larger mean feature norm as foreground.
    orientation: Literal["auto", "high", "low"] = "auto"


def otsu_threshold(scores: np.ndarray) -> float:
    """Exact Otsu split of 1-D scores: maximises between-class variance over all cuts."""
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    n = s.size
    cuts = np.nonzero(np.diff(s) > 0)[0] + 1  # class 0 = s[:k]
    if cuts.size == 0:
        raise ValueError("all scores are identical; no threshold separates them")
    csum = np.cumsum(s)
    k = cuts.astype(np.float64)
    mu0 = csum[cuts - 1] / k
    mu1 = (csum[-1] - csum[cuts - 1]) / (n - k)
    between = (k / n) * (1 - k / n) * (mu0 - mu1) ** 2
    best = cuts[int(np.argmax(between))]
    return 0.5 * (s[best - 1] + s[best])


def foreground_mask(f: SemanticFeatureMap, basis: PCABasis,
                    policy: ThresholdPolicy = ThresholdPolicy()) -> ForegroundMask:
    """Threshold first-component scores, pooled over frames, into a binary mask."""
    if basis.k < 1:
        raise ValueError("basis needs at least one component")
    scores = f.features.astype(np.float64) @ basis.components[0] - basis.mean @ basis.components[0]
    if policy.method == "otsu":
        thr = otsu_threshold(scores)
    elif policy.method == "quantile":
        thr = float(np.quantile(scores, policy.quantile))
    else:
        raise ValueError(f"unknown threshold method {policy.method!r}")
    high = scores > thr
    if policy.orientation == "auto":
        norms = np.linalg.norm(f.features, axis=-1)
        if high.all() or not high.any():
            raise ValueError("degenerate mask: every token falls on one side of the threshold")
        fg = high if norms[high].mean() >= norms[~high].mean() else ~high
    elif policy.orientation == "high":
        fg = high
    else:
        fg = ~high
    if fg.all() or not fg.any():
        raise ValueError("degenerate mask: all-foreground or all-background")
    empty = np.nonzero(~fg.reshape(fg.shape[0], -1).any(axis=1))[0]
    if empty.size:
        raise ValueError(f"degenerate mask: frames {empty.tolist()} have no foreground tokens")
    return ForegroundMask(fg.astype(np.uint8))


def masked_foreground(f: SemanticFeatureMap, m: ForegroundMask) -> SemanticFeatureMap:
    if f.features.shape[:3] != m.mask.shape:
        raise ValueError(f"mask {m.mask.shape} does not match feature grid {f.features.shape[:3]}")
    return SemanticFeatureMap(f.features * m.mask[..., None], f.source_resolution)


def resize_mask(m: ForegroundMask | np.ndarray, size: tuple[int, int]) -> ForegroundMask:
    """Move a mask to another grid: area-average when shrinking, nearest when growing,
    then keep cells that are at least half foreground."""
    arr = m.mask if isinstance(m, ForegroundMask) else np.asarray(m)
    if arr.shape[1:] == tuple(size):
        return ForegroundMask(arr)
    x = torch.from_numpy(arr.astype(np.float64))[:, None]
    if size[0] <= arr.shape[1] and size[1] <= arr.shape[2]:
        y = F.interpolate(x, size=size, mode="area")
    else:
        y = F.interpolate(x, size=size, mode="nearest")
    return ForegroundMask((y[:, 0] >= 0.5).numpy().astype(np.uint8))


def pca_rgb_visualization(f: SemanticFeatureMap, basis3: PCABasis,
                          mask: ForegroundMask | None = None) -> FrameVideo:
    """Top-3 PCA scores as RGB, min-max normalised jointly over frames; background black."""
    if basis3.k < 3:
        raise ValueError(f"visualisation needs a rank-3 basis, got k={basis3.k}")
    proj = basis3.project(f.features.astype(np.float64))[..., :3]
    keep = np.ones(proj.shape[:3], bool) if mask is None else mask.mask.astype(bool)
    out = np.zeros_like(proj)
    if keep.any():
        vals = proj[keep]
        lo, hi = vals.min(axis=0), vals.max(axis=0)
        span = hi - lo
        norm = np.full_like(vals, 0.5)
        live = span > 0
        norm[:, live] = (vals[:, live] - lo[live]) / span[live]
        out[keep] = norm
    return FrameVideo(out)
