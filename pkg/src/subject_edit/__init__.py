"""Subject replacement in short videos with semantic motion guidance and low-rank identity deltas."""

from .adapters import AdapterConfig, AdapterSet, inject_guidance, project_guidance
from .autoencoder import ToyAutoencoder, decode_video, encode_video
from .config import RunConfig, dump_config, load_config
from .denoiser import DenoiserConfig, ToyDenoiser, build_denoiser, embed_prompt, predict_noise
from .identity import IdentityTrainConfig, build_identity_prompt, register_identity
from .inference import EditConfig, blend_latents, denoise_from, edit_video, invert_video
from .lora import LoraDelta, apply_lora, init_lora, merge_lora
from .metrics import image_alignment, temporal_consistency, text_alignment
from .motion import MotionTrainConfig, masked_noise_loss, train_motion_adapters
from .schedule import build_schedule, ddim_denoise_step, ddim_invert_step
from .semantic import extract_semantic_features, fit_pca, foreground_mask
from .types import ForegroundMask, FrameVideo, GuidanceStack, SemanticFeatureMap

__all__ = [
    "AdapterConfig", "AdapterSet", "DenoiserConfig", "EditConfig", "ForegroundMask", "FrameVideo",
    "GuidanceStack", "IdentityTrainConfig", "LoraDelta", "MotionTrainConfig", "RunConfig",
    "SemanticFeatureMap", "ToyAutoencoder", "ToyDenoiser", "apply_lora", "blend_latents",
    "build_denoiser", "build_identity_prompt", "build_schedule", "ddim_denoise_step",
    "ddim_invert_step", "decode_video", "denoise_from", "dump_config", "edit_video", "embed_prompt",
    "encode_video", "extract_semantic_features", "fit_pca", "foreground_mask", "image_alignment",
    "init_lora", "inject_guidance", "invert_video", "load_config", "masked_noise_loss", "merge_lora",
    "predict_noise", "project_guidance", "register_identity", "temporal_consistency",
    "text_alignment", "train_motion_adapters",
]
