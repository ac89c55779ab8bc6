"""Stage 1: fit the motion-guidance adapters with the denoiser frozen."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .adapters import AdapterConfig, AdapterSet, project_guidance
from .autoencoder import ToyAutoencoder, encode_video
from .denoiser import ToyDenoiser, embed_prompt
from .schedule import add_noise, stage_sampler
from .semantic import resize_mask
from .types import ForegroundMask, FrameVideo, SemanticFeatureMap


@dataclass
class MotionTrainConfig:
    learning_rate: float = 5e-4
    iterations: int = 100
    lam: float = 1.0
    t_min: int | None = None  # None -> T // 2
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    probe_size: int = 4
    # Ablation switches: drop the semantic branch and/or train the motion layers.
    use_guidance: bool = True
    motion_layers_trainable: bool = False

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.lam != 1.0:
            raise ValueError(f"the motion stage trains with lambda fixed to 1.0, got {self.lam}")


@dataclass
class TrainLogRow:
    iteration: int
    t: int
    loss: float


@dataclass
class MotionTrainResult:
    adapters: AdapterSet | None
    denoiser: ToyDenoiser
    log: list[TrainLogRow]
    probe_initial: float
    probe_final: float
    latent_mask: ForegroundMask
    timesteps: list[int] = field(default_factory=list)


def masked_noise_loss(eps: torch.Tensor, eps_pred: torch.Tensor, m: ForegroundMask | torch.Tensor) -> torch.Tensor:
    """Mean squared residual over masked positions (all channels of each masked cell)."""
    mask = torch.as_tensor(m.mask if isinstance(m, ForegroundMask) else m)
    if eps.shape != eps_pred.shape or tuple(mask.shape) != tuple(eps.shape[:3]):
        raise ValueError(
            f"shape mismatch: eps {tuple(eps.shape)}, eps_pred {tuple(eps_pred.shape)}, mask {tuple(mask.shape)}"
        )
    count = int(mask.sum()) * eps.shape[-1]
    if count == 0:
        raise ValueError("mask selects no positions")
    w = mask.to(eps_pred.dtype)[..., None]
    return ((eps - eps_pred) ** 2 * w).sum() / count


def probe_batch(z0: torch.Tensor, t_min: int, t_max: int, size: int, seed: int):
    """Fixed (t, eps) pairs for before/after comparisons, drawn independently of training."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    ts = rng.integers(t_min, t_max, size=size, endpoint=True)
    return [(int(t), torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(z0.dtype)) for t in ts]


def train_motion_adapters(video: FrameVideo, prompt: str, denoiser: ToyDenoiser, ae: ToyAutoencoder,
                          features: SemanticFeatureMap, mask: ForegroundMask,
                          cfg: MotionTrainConfig = MotionTrainConfig(),
                          adapter_cfg: AdapterConfig = AdapterConfig()) -> MotionTrainResult:
    """Minimise the masked noise-prediction loss over t ~ U(t_min, T).

    ``features`` are the background-masked semantic features; ``mask`` may be at
    any resolution and is moved to the latent grid once.
    """
    sched = denoiser.schedule
    t_min = sched.total_steps // 2 if cfg.t_min is None else cfg.t_min
    z0 = encode_video(video, ae).to(denoiser.conv_in.weight.dtype)
    n, h, w, _ = z0.shape
    m_lat = resize_mask(mask, (h, w))
    sizes = denoiser.level_sizes(h, w)
    text = embed_prompt(prompt, denoiser.cfg.text_dim)

    net = denoiser
    params: list[torch.Tensor] = []
    adapters = None
    if cfg.use_guidance:
        adapters = AdapterSet.from_config(features.channels, denoiser.cfg.channel_widths,
                                          adapter_cfg, seed=cfg.seed).to(z0.dtype)
        params += list(adapters.parameters())
    if cfg.motion_layers_trainable:
        if not denoiser.has_motion_layers:
            raise ValueError("denoiser has no motion layers to train")
        net = copy.deepcopy(denoiser)
        for p in net.motion_parameters().values():
            p.requires_grad_(True)
            params.append(p)
    if not params:
        raise ValueError("nothing to optimise: enable guidance or trainable motion layers")
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps)

    def loss_at(t: int, eps: torch.Tensor) -> torch.Tensor:
        guidance = project_guidance(features, adapters, sizes, cfg.lam) if adapters is not None else None
        out = net(add_noise(z0, eps, t, sched), t, text, guidance=guidance)
        return masked_noise_loss(eps, out.eps_pred, m_lat)

    probes = probe_batch(z0, t_min, sched.total_steps, cfg.probe_size, cfg.seed + 7919)

    def probe() -> float:
        with torch.no_grad():
            return float(sum(loss_at(t, e) for t, e in probes) / len(probes))

    probe_initial = probe()
    sampler = stage_sampler(sched, t_min, cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    log, ts = [], []
    for it in range(cfg.iterations):
        t = int(sampler.draw(1)[0])
        eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(z0.dtype)
        opt.zero_grad(set_to_none=True)
        loss = loss_at(t, eps)
        loss.backward()
        opt.step()
        ts.append(t)
        log.append(TrainLogRow(it, t, loss.item()))
    if cfg.motion_layers_trainable:
        net.requires_grad_(False)
    if adapters is not None:
        adapters.requires_grad_(False)
    return MotionTrainResult(adapters, net, log, probe_initial, probe(), m_lat, ts)
