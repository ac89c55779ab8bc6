"""Ablation variants: guidance weight sweep, trainable motion layers, identity guidance on/off."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .adapters import AdapterSet
from .config import RunConfig
from .identity import register_identity
from .inference import EditResult, InversionTrajectory, edit_video, invert_video
from .lora import LoraSet
from .metrics import MetricRow, evaluation_report
from .motion import train_motion_adapters
from .autoencoder import encode_video
from .pipeline import (Components, Layout, MissingArtifact, SubjectFeatures, identity_prompt,
                       load_subject_features, score)
from .storage import load_adapters, load_frames, load_lora
from .types import FrameVideo

VARIANTS = ("lambda_sweep", "learnable_motion_no_guidance", "identity_with", "identity_without")
MOTION_GROUP = "Motion guidance"
IDENTITY_GROUP = "Identity guidance"


@dataclass(frozen=True)
class AblationSpec:
    variant: str
    lambda_values: tuple[float, ...] = (0.0, 0.3, 1.0)
    base_config: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.variant == "lambda_sweep" and not self.lambda_values:
            raise ValueError("lambda_sweep needs at least one lambda value")
        if any(lam < 0 for lam in self.lambda_values):
            raise ValueError(f"lambda values must be non-negative, got {self.lambda_values}")


@dataclass
class AblationAssets:
    components: Components
    video: FrameVideo
    video_features: SubjectFeatures
    refs: FrameVideo | None = None
    refs_features: SubjectFeatures | None = None
    motion_adapters: AdapterSet | None = None
    lora: LoraSet | None = None  # identity deltas trained with semantic guidance


@dataclass
class AblationRun:
    rows: list[MetricRow]
    edits: list[EditResult]


def load_ablation_assets(cfg: RunConfig, layout: Layout, comps: Components) -> AblationAssets:
    """Collect whatever earlier stages left on disk; variants check what they need."""
    if cfg.paths.video_dir is None:
        raise ValueError("paths.video_dir is not set in the config")
    refs = refs_features = None
    if cfg.paths.refs_dir is not None and layout.features("refs").exists():
        refs = load_frames(cfg.paths.refs_dir)
        refs_features = load_subject_features(layout, "refs")
    return AblationAssets(
        comps,
        load_frames(cfg.paths.video_dir),
        load_subject_features(layout, "video"),
        refs,
        refs_features,
        load_adapters(layout.motion_adapters) if layout.motion_adapters.exists() else None,
        load_lora(layout.identity_lora) if layout.identity_lora.exists() else None,
    )


def _need(value, what: str, producer: str):
    if value is None:
        raise MissingArtifact(f"this variant needs {what}; run `{producer}` first")
    return value


def _edit(assets: AblationAssets, cfg: RunConfig, adapters, lora, edit_cfg,
          trajectory: InversionTrajectory | None = None, denoiser=None) -> EditResult:
    vf = assets.video_features
    return edit_video(denoiser or assets.components.denoiser, assets.components.autoencoder,
                      assets.video, cfg.prompts.source, adapters, vf.masked, vf.mask, lora,
                      edit_cfg, trajectory)


def _row(assets: AblationAssets, result: EditResult, method: str, group: str) -> MetricRow:
    return score(result.frames, result.prompt, assets.refs, assets.components.embedder, method, group)


def run_ablation(spec: AblationSpec, assets: AblationAssets) -> AblationRun:
    cfg = spec.base_config
    comps = assets.components
    rows, edits = [], []

    if spec.variant == "lambda_sweep":
        adapters = _need(assets.motion_adapters, "motion adapters", "train-motion")
        z0 = encode_video(assets.video, comps.autoencoder).to(comps.denoiser.conv_in.weight.dtype)
        traj = invert_video(comps.denoiser, z0, cfg.prompts.source, cfg.edit.num_steps)
        for lam in spec.lambda_values:
            result = _edit(assets, cfg, adapters, assets.lora, replace(cfg.edit, lam=float(lam)), traj)
            edits.append(result)
            rows.append(_row(assets, result, f"lambda={lam:g}, w/ frozen motion module", MOTION_GROUP))

    elif spec.variant == "learnable_motion_no_guidance":
        train_cfg = replace(cfg.motion_config, use_guidance=False, motion_layers_trainable=True)
        vf = assets.video_features
        trained = train_motion_adapters(assets.video, cfg.prompts.source, comps.denoiser,
                                        comps.autoencoder, vf.masked, vf.mask, train_cfg, cfg.adapters)
        result = _edit(assets, cfg, None, assets.lora, replace(cfg.edit, use_motion_guidance=False),
                       denoiser=trained.denoiser)
        edits.append(result)
        rows.append(_row(assets, result, "w/o semantic guidance, w/ learnable motion module",
                         MOTION_GROUP))

    elif spec.variant == "identity_with":
        adapters = _need(assets.motion_adapters, "motion adapters", "train-motion")
        lora = _need(assets.lora, "identity LoRA deltas", "register-identity")
        result = _edit(assets, cfg, adapters, lora, cfg.edit)
        edits.append(result)
        rows.append(_row(assets, result, "w/ semantic identity guidance", IDENTITY_GROUP))

    else:  # identity_without
        adapters = _need(assets.motion_adapters, "motion adapters", "train-motion")
        refs = _need(assets.refs, "reference images", "mask")
        rf = _need(assets.refs_features, "reference features", "mask")
        train_cfg = replace(cfg.identity_config, use_semantic_guidance=False)
        trained = register_identity(refs, identity_prompt(cfg), comps.denoiser, comps.autoencoder,
                                    rf.masked, rf.mask, train_cfg, cfg.adapters)
        result = _edit(assets, cfg, adapters, trained.lora, cfg.edit)
        edits.append(result)
        rows.append(_row(assets, result, "w/o semantic identity guidance", IDENTITY_GROUP))

    return AblationRun(rows, edits)


def write_ablation_report(rows: list[MetricRow], out_dir: str | Path) -> tuple[Path, Path]:
    return evaluation_report(rows, out_dir, stem="ablation", title="Ablation")
