"""Stage 2: register a subject identity into low-rank deltas plus identity adapters."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .adapters import AdapterConfig, AdapterSet, project_guidance
from .autoencoder import ToyAutoencoder, encode_video
from .denoiser import ToyDenoiser, embed_prompt, init_lora_set
from .lora import LoraSet
from .motion import TrainLogRow, masked_noise_loss, probe_batch
from .schedule import add_noise, stage_sampler
from .semantic import resize_mask
from .types import ForegroundMask, FrameVideo, SemanticFeatureMap


@dataclass
class IdentityTrainConfig:
    learning_rate: float = 1e-4
    iterations: int = 1000
    reference_count: int = 3
    rank: int = 4
    lora_scale: float = 1.0
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    probe_size: int = 4
    use_semantic_guidance: bool = True

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.reference_count < 1:
            raise ValueError(f"reference_count must be >= 1, got {self.reference_count}")


@dataclass
class IdentityTrainResult:
    lora: LoraSet
    adapters: AdapterSet | None
    log: list[TrainLogRow]
    probe_initial: float
    probe_final: float
    latent_mask: ForegroundMask
    timesteps: list[int] = field(default_factory=list)


def build_identity_prompt(class_word: str, identifier: str = "") -> str:
    class_word, identifier = class_word.strip(), identifier.strip()
    if not class_word:
        raise ValueError("class word must be non-empty")
    return f"a photo of {identifier} {class_word}" if identifier else f"a photo of {class_word}"


def register_identity(refs: FrameVideo, prompt: str, denoiser: ToyDenoiser, ae: ToyAutoencoder,
                      features: SemanticFeatureMap, masks: ForegroundMask,
                      cfg: IdentityTrainConfig = IdentityTrainConfig(),
                      adapter_cfg: AdapterConfig = AdapterConfig()) -> IdentityTrainResult:
    """Minimise the masked noise loss over t ~ U(1, T) on independent reference stills.

    Motion layers are bypassed; ``features`` are the background-masked semantic
    features of the references, injected through the identity adapters.
    """
    sched = denoiser.schedule
    z0 = encode_video(refs, ae).to(denoiser.conv_in.weight.dtype)
    n, h, w, _ = z0.shape
    m_lat = resize_mask(masks, (h, w))
    sizes = denoiser.level_sizes(h, w)
    text = embed_prompt(prompt, denoiser.cfg.text_dim)

    lora = init_lora_set(denoiser, cfg.rank, cfg.lora_scale, cfg.seed)
    for delta in lora.values():
        delta.requires_grad_(True)
    params = [p for d in lora.values() for p in d.parameters()]
    adapters = None
    if cfg.use_semantic_guidance:
        adapters = AdapterSet.from_config(features.channels, denoiser.cfg.channel_widths,
                                          adapter_cfg, seed=cfg.seed + 1).to(z0.dtype)
        params += list(adapters.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps)

    def loss_at(t: int, eps: torch.Tensor) -> torch.Tensor:
        guidance = project_guidance(features, adapters, sizes) if adapters is not None else None
        out = denoiser(add_noise(z0, eps, t, sched), t, text, guidance=guidance, lora=lora,
                       use_motion=False)
        return masked_noise_loss(eps, out.eps_pred, m_lat)

    probes = probe_batch(z0, 1, sched.total_steps, cfg.probe_size, cfg.seed + 7919)

    def probe() -> float:
        with torch.no_grad():
            return float(sum(loss_at(t, e) for t, e in probes) / len(probes))

    probe_initial = probe()
    sampler = stage_sampler(sched, None, cfg.seed)
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
    lora = {k: d.detach() for k, d in lora.items()}
    if adapters is not None:
        adapters.requires_grad_(False)
    return IdentityTrainResult(lora, adapters, log, probe_initial, probe(), m_lat, ts)
