"""Projection MLPs that carry semantic features into the denoiser's feature ladder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .types import GuidanceStack, SemanticFeatureMap


@dataclass(frozen=True)
class AdapterConfig:
    hidden_width: int = 256
    depth: int = 2
    resize_mode: Literal["bilinear", "nearest"] = "bilinear"


class ProjectionMLP(nn.Module):
    """Token-wise c -> d_l map. Bias-free so that zeroed background tokens stay zero."""

    def __init__(self, in_dim: int, out_dim: int, hidden_width: int = 256, depth: int = 2):
        super().__init__()
        dims = [in_dim] + [hidden_width] * depth
        self.hidden = nn.ModuleList(nn.Linear(a, b, bias=False) for a, b in zip(dims[:-1], dims[1:]))
        self.final = nn.Linear(dims[-1], out_dim, bias=False)
        nn.init.zeros_(self.final.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.hidden:
            x = F.gelu(layer(x))
        return self.final(x)


class AdapterSet(nn.Module):
    """Four per-level projection MLPs (one per encoder feature tap)."""

    def __init__(self, in_dim: int, level_dims: Sequence[int], hidden_width: int = 256,
                 depth: int = 2, seed: int = 0, resize_mode: Literal["bilinear", "nearest"] = "bilinear"):
        super().__init__()
        if len(level_dims) != 4:
            raise ValueError(f"an adapter set needs 4 level widths, got {len(level_dims)}")
        self.in_dim = in_dim
        self.level_dims = tuple(level_dims)
        self.hidden_width = hidden_width
        self.depth = depth
        self.resize_mode = resize_mode
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.mlps = nn.ModuleList(
                ProjectionMLP(in_dim, d, hidden_width, depth) for d in self.level_dims
            )

    @classmethod
    def from_config(cls, in_dim: int, level_dims: Sequence[int], cfg: AdapterConfig,
                    seed: int = 0) -> "AdapterSet":
        return cls(in_dim, level_dims, cfg.hidden_width, cfg.depth, seed, cfg.resize_mode)

    def describe(self) -> dict:
        return {"in_dim": self.in_dim, "level_dims": list(self.level_dims),
                "hidden_width": self.hidden_width, "depth": self.depth,
                "resize_mode": self.resize_mode}


def resize_tokens(x: torch.Tensor, size: tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    """Resize a channel-last (N, h, w, c) tensor spatially; same-size input passes through."""
    if tuple(x.shape[1:3]) == tuple(size):
        return x
    y = x.permute(0, 3, 1, 2)
    if mode == "bilinear":
        y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
    elif mode == "nearest":
        y = F.interpolate(y, size=size, mode="nearest")
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    return y.permute(0, 2, 3, 1)


def project_guidance(f_d: SemanticFeatureMap | torch.Tensor, adapters: AdapterSet,
                     target_sizes: Sequence[tuple[int, int]], weight: float = 1.0) -> GuidanceStack:
    """Apply each level's MLP token-wise, then resize to that level's spatial size."""
    feats = f_d.features if isinstance(f_d, SemanticFeatureMap) else f_d
    if isinstance(feats, np.ndarray):
        feats = torch.from_numpy(feats)
    param = next(adapters.parameters())
    feats = feats.to(param.dtype)
    if feats.shape[-1] != adapters.in_dim:
        raise ValueError(f"features have {feats.shape[-1]} channels, adapters expect {adapters.in_dim}")
    sizes = [tuple(s) for s in target_sizes]
    if len(sizes) != 4 or any(sizes[i + 1] != (sizes[i][0] // 2, sizes[i][1] // 2) for i in range(3)):
        raise ValueError(f"target sizes {sizes} are not a 4-level halving ladder")
    levels = [
        resize_tokens(mlp(feats), size, adapters.resize_mode)
        for mlp, size in zip(adapters.mlps, sizes)
    ]
    return GuidanceStack(levels, weight)


def inject_guidance(f_t: torch.Tensor, f_s: torch.Tensor, lam: float) -> torch.Tensor:
    if f_t.shape != f_s.shape:
        raise ValueError(f"cannot inject guidance of shape {tuple(f_s.shape)} into {tuple(f_t.shape)}")
    return f_t + lam * f_s
