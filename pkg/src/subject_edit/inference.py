"""Stage 3: invert the source, swap the subject word, denoise with guidance and blending."""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field

import torch

from .adapters import AdapterSet, project_guidance
from .autoencoder import ToyAutoencoder, decode_video, encode_video
from .denoiser import TextEmbedding, ToyDenoiser, embed_prompt, null_text
from .lora import LoraSet
from .schedule import ddim_denoise_step, ddim_invert_step
from .semantic import resize_mask
from .types import ForegroundMask, FrameVideo, LatentVideo, SemanticFeatureMap


@dataclass
class EditConfig:
    lam: float = 1.0
    num_steps: int = 50
    injection_stop: int | None = None  # None -> T // 2
    source_word: str = ""
    target_word: str = ""
    blend_enabled: bool = True
    guidance_scale: float | None = None  # classifier-free guidance hook; off by default
    trajectory_stride: int = 1  # >1 keeps every k-th inverted latent and recomputes the rest
    use_motion_guidance: bool = True  # False only for the no-semantic-branch ablation

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.trajectory_stride < 1:
            raise ValueError(f"trajectory_stride must be >= 1, got {self.trajectory_stride}")


@dataclass
class StepRecord:
    index: int
    t: int
    t_prev: int
    guidance: bool
    seconds: float


@dataclass
class EditResult:
    frames: FrameVideo
    latents: list[LatentVideo]  # denoised latents after each step, index aligned with timesteps
    trajectory: "InversionTrajectory"
    steps: list[StepRecord] = field(default_factory=list)
    prompt: str = ""
    latent_mask: ForegroundMask | None = None


def swap_subject_word(prompt: str, source_word: str, target_word: str) -> str:
    """Replace every whole-token occurrence of ``source_word``."""
    if not source_word.strip() or not target_word.strip():
        raise ValueError("source and target words must be non-empty")
    pattern = rf"(?<!\S){re.escape(source_word)}(?!\S)"
    out, count = re.subn(pattern, target_word, prompt)
    if count == 0:
        raise ValueError(f"{source_word!r} does not occur as a whole token in {prompt!r}")
    return out


def blend_latents(z_edit: LatentVideo, z_src_traj: LatentVideo, m_latent: ForegroundMask | torch.Tensor) -> LatentVideo:
    """Keep edited latents on the mask and the source trajectory elsewhere."""
    mask = torch.as_tensor(m_latent.mask if isinstance(m_latent, ForegroundMask) else m_latent)
    if z_edit.shape != z_src_traj.shape or tuple(mask.shape) != tuple(z_edit.shape[:3]):
        raise ValueError(
            f"shape mismatch: edit {tuple(z_edit.shape)}, source {tuple(z_src_traj.shape)}, mask {tuple(mask.shape)}"
        )
    return torch.where(mask.bool()[..., None], z_edit, z_src_traj)


def _eps(denoiser: ToyDenoiser, z, t, text, guidance=None, lora=None, guidance_scale=None):
    eps = denoiser(z, t, text, guidance=guidance, lora=lora).eps_pred
    if guidance_scale is not None and guidance_scale != 1.0:
        eps_u = denoiser(z, t, null_text(denoiser.cfg.text_dim), guidance=guidance, lora=lora).eps_pred
        eps = eps_u + guidance_scale * (eps - eps_u)
    return eps


class InversionTrajectory:
    """DDIM inversion states ``z_{t_0=0}, z_{t_1}, ..., z_{t_K}``.

    With ``stride > 1`` only every stride-th state is kept and the others are
    recomputed on access; recomputation is bitwise identical to storing them.
    """

    def __init__(self, denoiser: ToyDenoiser, z0: LatentVideo, text: TextEmbedding,
                 num_steps: int, stride: int = 1):
        self.denoiser = denoiser
        self.text = text
        self.timesteps = [0] + denoiser.schedule.inference_timesteps(num_steps)
        self.stride = stride
        self._kept: dict[int, LatentVideo] = {0: z0}
        z = z0
        for i in range(1, len(self.timesteps)):
            z = self._step(z, i)
            if i % stride == 0 or i == len(self.timesteps) - 1:
                self._kept[i] = z

    @classmethod
    def from_states(cls, denoiser: ToyDenoiser, states: list[LatentVideo], prompt: str | TextEmbedding,
                    num_steps: int) -> "InversionTrajectory":
        """Wrap previously stored states (one per timestep, clean latent first)."""
        if len(states) != num_steps + 1:
            raise ValueError(f"expected {num_steps + 1} states, got {len(states)}")
        traj = cls.__new__(cls)
        traj.denoiser = denoiser
        traj.text = prompt if isinstance(prompt, TextEmbedding) else embed_prompt(prompt, denoiser.cfg.text_dim)
        traj.timesteps = [0] + denoiser.schedule.inference_timesteps(num_steps)
        traj.stride = 1
        traj._kept = dict(enumerate(states))
        return traj

    def _step(self, z: LatentVideo, i: int) -> LatentVideo:
        t_prev, t = self.timesteps[i - 1], self.timesteps[i]
        # eps is evaluated at the current latent with the next (higher) timestep label
        eps = _eps(self.denoiser, z, t, self.text)
        return ddim_invert_step(z, eps, t_prev, t, self.denoiser.schedule)

    def __len__(self) -> int:
        return len(self.timesteps)

    def __getitem__(self, i: int) -> LatentVideo:
        if i < 0:
            i += len(self)
        if i in self._kept:
            return self._kept[i]
        base = (i // self.stride) * self.stride
        z = self._kept[base]
        for j in range(base + 1, i + 1):
            z = self._step(z, j)
        return z


@torch.no_grad()
def invert_video(denoiser: ToyDenoiser, z0: LatentVideo, prompt: str | TextEmbedding,
                 num_steps: int = 50, stride: int = 1) -> InversionTrajectory:
    """Deterministic inversion under the source prompt, without guidance or deltas."""
    text = prompt if isinstance(prompt, TextEmbedding) else embed_prompt(prompt, denoiser.cfg.text_dim)
    return InversionTrajectory(denoiser, z0, text, num_steps, stride)


@torch.no_grad()
def denoise_from(denoiser: ToyDenoiser, trajectory: InversionTrajectory, prompt: str | TextEmbedding,
                 guidance=None, injection_stop: int | None = None, lora: LoraSet | None = None,
                 m_latent: ForegroundMask | None = None, guidance_scale: float | None = None
                 ) -> tuple[list[LatentVideo], list[StepRecord]]:
    """Run the DDIM sampler from the top of ``trajectory`` down to t = 0.

    Guidance takes part only while ``t > injection_stop``; with ``m_latent`` the
    result of every step is blended against the trajectory at the same timestep.
    """
    text = prompt if isinstance(prompt, TextEmbedding) else embed_prompt(prompt, denoiser.cfg.text_dim)
    sched = denoiser.schedule
    stop = sched.total_steps // 2 if injection_stop is None else injection_stop
    if not 0 <= stop <= sched.total_steps:
        raise ValueError(f"injection_stop must lie in [0, {sched.total_steps}], got {stop}")
    ts = trajectory.timesteps
    z = trajectory[len(ts) - 1]
    latents, records = [], []
    for k, i in enumerate(range(len(ts) - 1, 0, -1)):
        t, t_prev = ts[i], ts[i - 1]
        start = time.perf_counter()
        active = guidance is not None and t > stop
        eps = _eps(denoiser, z, t, text, guidance if active else None, lora, guidance_scale)
        z = ddim_denoise_step(z, eps, t, t_prev, sched)
        if m_latent is not None:
            z = blend_latents(z, trajectory[i - 1], m_latent)
        latents.append(z)
        records.append(StepRecord(k, t, t_prev, active, time.perf_counter() - start))
    return latents, records


def edit_video(denoiser: ToyDenoiser, ae: ToyAutoencoder, source: FrameVideo, source_prompt: str,
               adapters: AdapterSet | None, f_d: SemanticFeatureMap, mask: ForegroundMask | None,
               lora: LoraSet | None = None, cfg: EditConfig = EditConfig(),
               trajectory: InversionTrajectory | None = None) -> EditResult:
    """Encode, invert, swap the prompt, denoise with motion guidance and identity deltas, decode."""
    if adapters is None and cfg.use_motion_guidance:
        raise ValueError("motion adapters are required; run the motion stage first")
    z0 = encode_video(source, ae).to(denoiser.conv_in.weight.dtype)
    n, h, w, _ = z0.shape
    if trajectory is None:
        trajectory = invert_video(denoiser, z0, source_prompt, cfg.num_steps, cfg.trajectory_stride)
    elif len(trajectory) != cfg.num_steps + 1 or trajectory[0].shape != z0.shape:
        raise ValueError(
            f"trajectory has {len(trajectory)} states for {cfg.num_steps} steps; expected {cfg.num_steps + 1}"
        )
    prompt = source_prompt
    if cfg.source_word or cfg.target_word:
        prompt = swap_subject_word(source_prompt, cfg.source_word, cfg.target_word)
    guidance = None
    if cfg.use_motion_guidance:
        with torch.no_grad():
            guidance = project_guidance(f_d, adapters, denoiser.level_sizes(h, w), cfg.lam)
    m_lat = None
    if cfg.blend_enabled:
        if mask is None:
            raise ValueError("blending needs a foreground mask")
        m_lat = resize_mask(mask, (h, w))
    latents, records = denoise_from(denoiser, trajectory, prompt, guidance, cfg.injection_stop,
                                    lora, m_lat, cfg.guidance_scale)
    return EditResult(decode_video(latents[-1], ae), latents, trajectory, records, prompt, m_lat)
