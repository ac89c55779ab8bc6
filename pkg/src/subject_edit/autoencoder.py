"""Toy frame autoencoder: patch flattening followed by a fixed orthonormal map.

The encoder matrix ``E`` has shape ``(d, 3 p^2)`` with ``E @ E.T = I``. Its
first three rows average each colour channel over a patch (scaled to unit
norm); any further rows are a seeded orthonormal completion. Decoding applies
``E.T`` and clamps, so ``decode(encode(x)) == x`` for every frame lying in the
span of the rows, which includes all frames that are constant on each patch.
An optional ``latent_scale`` multiplies latents after the orthonormal map, the
same role the scaling factor plays for a learned latent-diffusion VAE.
"""

from __future__ import annotations

import numpy as np
import torch

from .types import FrameVideo, LatentVideo


class ToyAutoencoder:
    def __init__(self, patch: int = 8, latent_channels: int = 4, latent_scale: float = 1.0,
                 seed: int = 0, dtype: torch.dtype = torch.float32):
        patch_dim = 3 * patch * patch
        if patch < 1:
            raise ValueError(f"patch factor must be >= 1, got {patch}")
        if not 1 <= latent_channels <= patch_dim:
            raise ValueError(f"latent_channels must lie in [1, {patch_dim}], got {latent_channels}")
        self.patch = patch
        self.latent_channels = latent_channels
        if latent_scale <= 0:
            raise ValueError(f"latent_scale must be positive, got {latent_scale}")
        self.latent_scale = latent_scale
        self.dtype = dtype
        self.matrix = _orthonormal_patch_map(patch, latent_channels, seed)

    def encode(self, v: FrameVideo) -> LatentVideo:
        return encode_video(v, self)

    def decode(self, z: LatentVideo) -> FrameVideo:
        return decode_video(z, self)


def _orthonormal_patch_map(patch: int, d: int, seed: int) -> np.ndarray:
    patch_dim = 3 * patch * patch
    rows = np.zeros((min(d, 3), patch_dim))
    channel_of = np.arange(patch_dim) % 3  # flattened order is (py, px, channel)
    for c in range(rows.shape[0]):
        rows[c, channel_of == c] = 1.0 / patch
    if d <= 3:
        return rows
    rng = np.random.default_rng(seed)
    extra = rng.standard_normal((d - 3, patch_dim))
    extra -= extra @ rows.T @ rows
    q, _ = np.linalg.qr(extra.T)
    return np.vstack([rows, q.T[: d - 3]])


def encode_video(v: FrameVideo, ae: ToyAutoencoder) -> LatentVideo:
    n, h, w, _ = v.frames.shape
    p = ae.patch
    if h % p or w % p:
        raise ValueError(f"frame size {h}x{w} is not divisible by patch factor {p}")
    patches = (
        v.frames.reshape(n, h // p, p, w // p, p, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, h // p, w // p, 3 * p * p)
    )
    return torch.from_numpy(ae.latent_scale * (patches @ ae.matrix.T)).to(ae.dtype)


def decode_video(z: LatentVideo, ae: ToyAutoencoder) -> FrameVideo:
    if z.ndim != 4 or z.shape[-1] != ae.latent_channels:
        raise ValueError(
            f"latent must have shape (N, H, W, {ae.latent_channels}), got {tuple(z.shape)}"
        )
    n, hl, wl, _ = z.shape
    p = ae.patch
    patches = (z.detach().cpu().double().numpy() / ae.latent_scale) @ ae.matrix
    frames = (
        patches.reshape(n, hl, wl, p, p, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, hl * p, wl * p, 3)
    )
    return FrameVideo(np.clip(frames, 0.0, 1.0))
