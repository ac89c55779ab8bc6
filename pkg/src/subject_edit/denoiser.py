"""Toy inflated noise-prediction network.

Four encoder stages (conv block, windowed spatial self-attention, optional
temporal self-attention) with a feature tap after each stage and a mirrored
decoder with skip connections.

The network is preconditioned around the posterior mean of a Gaussian prior
``N(0, data_std^2)`` on clean latents:

    x0_hat = c_skip(t) * z_t + c_out(t) * net(c_in(t) * z_t)

and the returned noise prediction is ``(z_t - sqrt(abar_t) * x0_hat) / sqrt(1 - abar_t)``.
With ``data_std = 1`` the skip path alone has an (almost) identity probability
flow, which keeps deterministic inversion of the frozen network accurate.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adapters import inject_guidance
from .lora import LoraDelta, LoraSet, apply_lora, init_lora
from .schedule import NoiseSchedule
from .types import GuidanceStack, LatentVideo

LORA_TARGETS = ("q", "k", "v", "out")


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    channel_widths: tuple[int, ...] = (32, 48, 64, 64)
    text_dim: int = 32
    time_dim: int = 32
    attention_window: int = 8
    motion_layers_enabled: bool = True
    motion_layers_trainable: bool = False
    temporal_window: int = 16
    data_std: float = 1.0
    output_gain: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.channel_widths) != 4:
            raise ValueError(f"channel_widths needs 4 entries, got {self.channel_widths}")
        if self.temporal_window < 1:
            raise ValueError(f"temporal_window must be >= 1, got {self.temporal_window}")


@dataclass
class TextEmbedding:
    tokens: list[str]
    token_ids: list[int]
    embedding: np.ndarray  # (len(tokens), text_dim)

    def __post_init__(self) -> None:
        if len(self.tokens) != self.embedding.shape[0]:
            raise ValueError("embedding length must equal token count")

    def pooled(self) -> np.ndarray:
        return self.embedding.mean(axis=0)


@dataclass
class DenoiserOutput:
    eps_pred: torch.Tensor  # (N, H, W, d)
    encoder_features: list[torch.Tensor] = field(default_factory=list)  # 4 x (N, h_l, w_l, d_l)


def _token_id(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def embed_prompt(prompt: str, dim: int = 32) -> TextEmbedding:
    """Whitespace tokenisation with a hashed, fixed per-token embedding table."""
    tokens = prompt.lower().split()
    if not tokens:
        raise ValueError("prompt must contain at least one token")
    ids = [_token_id(tok) for tok in tokens]
    rows = [np.random.default_rng(i).standard_normal(dim) / math.sqrt(dim) for i in ids]
    return TextEmbedding(tokens, ids, np.stack(rows))


def null_text(dim: int = 32) -> TextEmbedding:
    """Unconditional embedding used by the optional classifier-free guidance hook."""
    return TextEmbedding([""], [0], np.zeros((1, dim)))


def sinusoidal_embedding(values: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = values.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class LoraLinear(nn.Module):
    """Linear projection accepting an optional low-rank delta at call time."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.base = nn.Linear(dim_in, dim_out)

    def forward(self, x: torch.Tensor, delta: LoraDelta | None = None) -> torch.Tensor:
        return apply_lora(x, self.base.weight, delta) + self.base.bias


def _fit_window(size: int, window: int) -> int:
    """Largest window length not above ``window`` that tiles ``size`` exactly."""
    return max(d for d in range(1, min(size, window) + 1) if size % d == 0)


class WindowAttention(nn.Module):
    """Single-head self-attention inside non-overlapping spatial windows."""

    def __init__(self, dim: int, window: int, name: str):
        super().__init__()
        self.window = window
        self.name = name
        self.q = LoraLinear(dim, dim)
        self.k = LoraLinear(dim, dim)
        self.v = LoraLinear(dim, dim)
        self.out = LoraLinear(dim, dim)

    def forward(self, x: torch.Tensor, lora: LoraSet | None = None) -> torch.Tensor:
        n, c, h, w = x.shape
        wh, ww = _fit_window(h, self.window), _fit_window(w, self.window)
        tok = (
            x.reshape(n, c, h // wh, wh, w // ww, ww)
            .permute(0, 2, 4, 3, 5, 1)
            .reshape(-1, wh * ww, c)
        )
        get = (lambda p: lora.get(f"{self.name}.{p}")) if lora else (lambda p: None)
        q, k, v = self.q(tok, get("q")), self.k(tok, get("k")), self.v(tok, get("v"))
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        y = self.out(attn @ v, get("out"))
        y = (
            y.reshape(n, h // wh, w // ww, wh, ww, c)
            .permute(0, 5, 1, 3, 2, 4)
            .reshape(n, c, h, w)
        )
        return x + y


class TemporalAttention(nn.Module):
    """Self-attention across the frame axis at every spatial position."""

    def __init__(self, dim: int, window: int):
        super().__init__()
        self.window = window
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        if n != self.window:
            raise ValueError(f"motion layers span {self.window} frames, got a clip of {n}")
        pos = sinusoidal_embedding(torch.arange(n), c).to(x.dtype)
        tok = x.permute(2, 3, 0, 1).reshape(h * w, n, c) + pos
        q, k, v = self.q(tok), self.k(tok), self.v(tok)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        y = self.out(attn @ v).reshape(h, w, n, c).permute(2, 3, 0, 1)
        return x + y


class Stage(nn.Module):
    def __init__(self, index: int, dim_in: int, dim: int, cfg: DenoiserConfig):
        super().__init__()
        stride = 1 if index == 0 else 2
        self.down = nn.Conv2d(dim_in, dim, 3, stride=stride, padding=1)
        self.time_proj = nn.Linear(cfg.time_dim, dim)
        self.text_proj = nn.Linear(cfg.text_dim, dim)
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)
        self.spatial_attn = WindowAttention(dim, cfg.attention_window, f"stages.{index}.spatial_attn")


class ToyDenoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig, schedule: NoiseSchedule):
        super().__init__()
        self.cfg = cfg
        self.schedule = schedule
        widths = cfg.channel_widths
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.conv_in = nn.Conv2d(cfg.latent_channels, widths[0], 3, padding=1)
            self.stages = nn.ModuleList(
                Stage(i, widths[max(i - 1, 0)], widths[i], cfg) for i in range(4)
            )
            self.ups = nn.ModuleList(nn.Conv2d(widths[i], widths[i - 1], 3, padding=1) for i in range(3, 0, -1))
            self.conv_out = nn.Conv2d(widths[0], cfg.latent_channels, 3, padding=1)
            with torch.no_grad():
                self.conv_out.weight.mul_(cfg.output_gain)
                self.conv_out.bias.zero_()
        self.temporal: nn.ModuleList | None = None

    # -- structure -------------------------------------------------------

    @property
    def has_motion_layers(self) -> bool:
        return self.temporal is not None

    def level_sizes(self, height: int, width: int) -> list[tuple[int, int]]:
        if height % 8 or width % 8:
            raise ValueError(f"latent size {height}x{width} must be divisible by 8")
        return [(height >> l, width >> l) for l in range(4)]

    def lora_targets(self) -> dict[str, nn.Linear]:
        """Attachment points for low-rank deltas: spatial-attention q/k/v/out."""
        out = {}
        for stage in self.stages:
            attn = stage.spatial_attn
            for p in LORA_TARGETS:
                out[f"{attn.name}.{p}"] = getattr(attn, p).base
        return out

    def base_parameters(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.named_parameters() if not k.startswith("temporal.")}

    def motion_parameters(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.named_parameters() if k.startswith("temporal.")}

    # -- forward ---------------------------------------------------------

    def forward(self, z_t: LatentVideo, t: int, text: TextEmbedding,
                guidance: GuidanceStack | None = None, lora: LoraSet | None = None,
                use_motion: bool | None = None) -> DenoiserOutput:
        if z_t.ndim != 4 or z_t.shape[-1] != self.cfg.latent_channels:
            raise ValueError(
                f"latent must have shape (N, H, W, {self.cfg.latent_channels}), got {tuple(z_t.shape)}"
            )
        n, h, w, _ = z_t.shape
        sizes = self.level_sizes(h, w)
        if guidance is not None:
            expected = [(n, *s, d) for s, d in zip(sizes, self.cfg.channel_widths)]
            if guidance.shapes() != expected:
                raise ValueError(f"guidance shapes {guidance.shapes()} do not match taps {expected}")
        motion = self.cfg.motion_layers_enabled if use_motion is None else use_motion
        motion = motion and self.temporal is not None

        dtype = self.conv_in.weight.dtype
        abar = self.schedule.alpha_bar(t)
        s2 = self.cfg.data_std**2
        denom = abar * s2 + 1.0 - abar
        c_in = 1.0 / math.sqrt(denom)
        x = self.conv_in(z_t.permute(0, 3, 1, 2).to(dtype) * c_in)
        temb = sinusoidal_embedding(torch.tensor([float(t)]), self.cfg.time_dim).to(dtype)
        pooled = torch.as_tensor(text.pooled(), dtype=dtype)[None]

        taps, skips = [], []
        for i, stage in enumerate(self.stages):
            x = stage.down(x)
            cond = stage.time_proj(temb) + stage.text_proj(pooled)
            x = x + stage.conv(F.gelu(x + cond[:, :, None, None]))
            x = stage.spatial_attn(x, lora)
            if motion:
                x = self.temporal[i](x)
            taps.append(x.permute(0, 2, 3, 1))
            if guidance is not None:
                x = inject_guidance(x, guidance.levels[i].to(dtype).permute(0, 3, 1, 2), guidance.weight)
            skips.append(x)

        y = skips[3]
        for j, up in enumerate(self.ups):
            y = F.interpolate(y, scale_factor=2, mode="nearest")
            y = F.gelu(up(y) + skips[2 - j])
        residual = self.conv_out(y).permute(0, 2, 3, 1)
        # eps = (z - sqrt(abar) * (c_skip z + c_out residual)) / sqrt(1 - abar), simplified
        # so that no division by sqrt(1 - abar) remains.
        eps = (math.sqrt(1.0 - abar) / denom) * z_t.to(dtype) \
            - (math.sqrt(abar * s2 / denom)) * residual
        return DenoiserOutput(eps, taps)


def predict_noise(denoiser: ToyDenoiser, z_t: LatentVideo, t: int, text: TextEmbedding,
                  guidance: GuidanceStack | None = None, lora: LoraSet | None = None,
                  use_motion: bool | None = None) -> DenoiserOutput:
    return denoiser(z_t, t, text, guidance=guidance, lora=lora, use_motion=use_motion)


def inflate_with_motion_layers(denoiser: ToyDenoiser, config: DenoiserConfig | None = None) -> ToyDenoiser:
    """Return a copy of ``denoiser`` with temporal self-attention after every stage."""
    cfg = config or denoiser.cfg
    inflated = copy.deepcopy(denoiser)
    inflated.cfg = replace(denoiser.cfg, motion_layers_enabled=cfg.motion_layers_enabled,
                           motion_layers_trainable=cfg.motion_layers_trainable,
                           temporal_window=cfg.temporal_window)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed + 1)
        inflated.temporal = nn.ModuleList(
            TemporalAttention(d, cfg.temporal_window) for d in denoiser.cfg.channel_widths
        ).to(denoiser.conv_in.weight.dtype)
    return inflated


def build_denoiser(cfg: DenoiserConfig, schedule: NoiseSchedule) -> ToyDenoiser:
    """Frozen base network, inflated with motion layers."""
    net = inflate_with_motion_layers(ToyDenoiser(cfg, schedule), cfg)
    net.requires_grad_(False)
    return net


def init_lora_set(denoiser: ToyDenoiser, rank: int = 4, scale: float = 1.0, seed: int = 0) -> LoraSet:
    dtype = denoiser.conv_in.weight.dtype
    return {
        name: init_lora(lin.in_features, lin.out_features, rank, scale, seed + i, dtype)
        for i, (name, lin) in enumerate(denoiser.lora_targets().items())
    }
