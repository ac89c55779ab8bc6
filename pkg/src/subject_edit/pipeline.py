"""File-backed stage runners shared by the command line and the ablation harness."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .adapters import AdapterSet
from .autoencoder import ToyAutoencoder, encode_video
from .config import RunConfig, config_to_dict
from .denoiser import ToyDenoiser, build_denoiser
from .identity import IdentityTrainResult, build_identity_prompt, register_identity
from .inference import EditConfig, EditResult, InversionTrajectory, edit_video, invert_video
from .lora import LoraSet
from .metrics import MetricRow, ToyJointEmbedder, evaluation_report, image_alignment, \
    temporal_consistency, text_alignment
from .motion import MotionTrainResult, TrainLogRow, train_motion_adapters
from .schedule import NoiseSchedule, build_schedule
from .semantic import (PCABasis, SemanticBackend, ToySemanticBackend, extract_semantic_features,
                       fit_pca, fit_to_backend, foreground_mask, masked_foreground,
                       pca_rgb_visualization)
from .storage import (file_digest, load_adapters, load_frames, load_lora, load_tensors,
                      module_hash, save_adapters, save_frames, save_lora, save_mask_frames,
                      save_tensors)
from .types import ForegroundMask, FrameVideo, SemanticFeatureMap


class MissingArtifact(FileNotFoundError):
    """A stage ran before the stage that produces its input."""


@dataclass
class Components:
    schedule: NoiseSchedule
    autoencoder: ToyAutoencoder
    denoiser: ToyDenoiser
    backend: SemanticBackend
    embedder: ToyJointEmbedder


def build_components(cfg: RunConfig) -> Components:
    sched = build_schedule(cfg.schedule.total_steps, cfg.schedule.beta_start,
                           cfg.schedule.beta_end, cfg.schedule.spacing)
    ae = ToyAutoencoder(cfg.autoencoder.patch, cfg.autoencoder.latent_channels,
                        cfg.autoencoder.latent_scale, seed=cfg.seed_for("autoencoder"))
    sem = cfg.semantic
    backend = ToySemanticBackend(sem.patch, sem.dim, sem.mix, seed=cfg.seed_for("semantic"))
    return Components(sched, ae, build_denoiser(cfg.denoiser_config, sched), backend,
                      ToyJointEmbedder(seed=cfg.seed_for("embedder")))


@dataclass
class SubjectFeatures:
    full: SemanticFeatureMap
    mask: ForegroundMask
    masked: SemanticFeatureMap


def subject_features(frames: FrameVideo, backend: SemanticBackend, cfg: RunConfig) -> SubjectFeatures:
    """Semantic tokens, their first-component foreground mask, and the masked tokens."""
    sem = cfg.semantic
    fitted = fit_to_backend(frames, backend, sem.input_size, sem.resize_mode)
    full = extract_semantic_features(fitted, backend)
    mask = foreground_mask(full, fit_pca(full, 1), sem.policy())
    return SubjectFeatures(full, mask, masked_foreground(full, mask))


@dataclass(frozen=True)
class Layout:
    """Where each stage reads and writes inside the configured directories."""

    checkpoints: Path
    outputs: Path

    @classmethod
    def from_config(cls, cfg: RunConfig, out: str | Path | None = None) -> "Layout":
        return cls(Path(cfg.paths.checkpoints), Path(out) if out else Path(cfg.paths.outputs))

    def features(self, which: str) -> Path:
        return self.outputs / "features" / f"{which}.safetensors"

    def masks(self, which: str) -> Path:
        return self.outputs / "masks" / which

    @property
    def motion_adapters(self) -> Path:
        return self.checkpoints / "motion_adapters.safetensors"

    @property
    def identity_adapters(self) -> Path:
        return self.checkpoints / "identity_adapters.safetensors"

    @property
    def identity_lora(self) -> Path:
        return self.checkpoints / "identity_lora.safetensors"

    @property
    def trajectory(self) -> Path:
        return self.checkpoints / "trajectory.safetensors"

    @property
    def edit_dir(self) -> Path:
        return self.outputs / "edit"


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `{producer}` first")
    return path


def _video_dir(cfg: RunConfig, key: str) -> Path:
    value = getattr(cfg.paths, key)
    if value is None:
        raise ValueError(f"paths.{key} is not set in the config")
    return Path(value)


def write_loss_csv(path: Path, log: list[TrainLogRow]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("iteration", "t", "loss"))
        for row in log:
            writer.writerow((row.iteration, row.t, repr(row.loss)))
    return path


def write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def run_mask(cfg: RunConfig, layout: Layout, comps: Components) -> dict[str, Path]:
    """Features and masks for the source video and, when configured, the references."""
    written = {}
    sources = {"video": cfg.paths.video_dir, "refs": cfg.paths.refs_dir}
    for which, directory in sources.items():
        if directory is None:
            continue
        sf = subject_features(load_frames(directory), comps.backend, cfg)
        save_mask_frames(sf.mask, layout.masks(which))
        written[which] = save_tensors(
            layout.features(which),
            {"full": sf.full.features, "masked": sf.masked.features, "mask": sf.mask.mask},
            kind="subject_features",
            metadata={"source_resolution": list(sf.full.source_resolution)},
        )
    if not written:
        raise ValueError("neither paths.video_dir nor paths.refs_dir is set")
    return written


def load_subject_features(layout: Layout, which: str) -> SubjectFeatures:
    arrays, meta = load_tensors(_require(layout.features(which), "mask"), "subject_features")
    res = tuple(meta["source_resolution"])
    return SubjectFeatures(SemanticFeatureMap(arrays["full"].astype(np.float64), res),
                           ForegroundMask(arrays["mask"].astype(np.uint8)),
                           SemanticFeatureMap(arrays["masked"].astype(np.float64), res))


def run_train_motion(cfg: RunConfig, layout: Layout, comps: Components) -> MotionTrainResult:
    video = load_frames(_video_dir(cfg, "video_dir"))
    sf = load_subject_features(layout, "video")
    before = module_hash(comps.denoiser)
    result = train_motion_adapters(video, cfg.prompts.source, comps.denoiser, comps.autoencoder,
                                   sf.masked, sf.mask, cfg.motion_config, cfg.adapters)
    if result.adapters is None:
        raise ValueError("the motion stage needs motion_training.use_guidance = true")
    save_adapters(layout.motion_adapters, result.adapters, "motion_adapters",
                  {"prompt": cfg.prompts.source})
    write_loss_csv(layout.outputs / "train_motion" / "loss.csv", result.log)
    save_mask_frames(result.latent_mask, layout.outputs / "train_motion" / "latent_masks")
    write_json(layout.outputs / "train_motion" / "summary.json", {
        "probe_initial": result.probe_initial, "probe_final": result.probe_final,
        "denoiser_hash_before": before, "denoiser_hash_after": module_hash(comps.denoiser),
    })
    return result


def identity_prompt(cfg: RunConfig) -> str:
    return build_identity_prompt(cfg.prompts.class_word, cfg.prompts.identifier)


def run_register_identity(cfg: RunConfig, layout: Layout, comps: Components) -> IdentityTrainResult:
    refs = load_frames(_video_dir(cfg, "refs_dir"))
    sf = load_subject_features(layout, "refs")
    prompt = identity_prompt(cfg)
    result = register_identity(refs, prompt, comps.denoiser, comps.autoencoder, sf.masked, sf.mask,
                               cfg.identity_config, cfg.adapters)
    save_lora(layout.identity_lora, result.lora, {"prompt": prompt})
    if result.adapters is not None:
        save_adapters(layout.identity_adapters, result.adapters, "identity_adapters",
                      {"prompt": prompt})
    write_loss_csv(layout.outputs / "register_identity" / "loss.csv", result.log)
    save_mask_frames(result.latent_mask, layout.outputs / "register_identity" / "latent_masks")
    write_json(layout.outputs / "register_identity" / "summary.json", {
        "probe_initial": result.probe_initial, "probe_final": result.probe_final,
    })
    return result


def run_invert(cfg: RunConfig, layout: Layout, comps: Components) -> InversionTrajectory:
    video = load_frames(_video_dir(cfg, "video_dir"))
    z0 = encode_video(video, comps.autoencoder).to(comps.denoiser.conv_in.weight.dtype)
    traj = invert_video(comps.denoiser, z0, cfg.prompts.source, cfg.edit.num_steps)
    save_tensors(layout.trajectory, {"latents": torch.stack([traj[i] for i in range(len(traj))])},
                 kind="trajectory", metadata={"prompt": cfg.prompts.source,
                                              "num_steps": cfg.edit.num_steps})
    return traj


def load_trajectory(cfg: RunConfig, layout: Layout, comps: Components) -> InversionTrajectory | None:
    """The stored trajectory if it matches the current prompt and step count, else None."""
    if not layout.trajectory.exists():
        return None
    arrays, meta = load_tensors(layout.trajectory, "trajectory")
    if meta["prompt"] != cfg.prompts.source or meta["num_steps"] != cfg.edit.num_steps:
        return None
    states = torch.from_numpy(arrays["latents"].copy())
    return InversionTrajectory.from_states(comps.denoiser, list(states), cfg.prompts.source,
                                           cfg.edit.num_steps)


def _strip_seconds(records) -> list[dict]:
    return [{"index": r.index, "t": r.t, "t_prev": r.t_prev, "guidance": r.guidance} for r in records]


def run_edit(cfg: RunConfig, layout: Layout, comps: Components, use_lora: bool = True) -> EditResult:
    started = time.perf_counter()
    video = load_frames(_video_dir(cfg, "video_dir"))
    sf = load_subject_features(layout, "video")
    adapters = load_adapters(_require(layout.motion_adapters, "train-motion"))
    checkpoints = {"motion_adapters": file_digest(layout.motion_adapters)}
    lora = None
    if use_lora and layout.identity_lora.exists():
        lora = load_lora(layout.identity_lora)
        checkpoints["identity_lora"] = file_digest(layout.identity_lora)
    traj = load_trajectory(cfg, layout, comps)
    if traj is not None:
        checkpoints["trajectory"] = file_digest(layout.trajectory)
    result = edit_video(comps.denoiser, comps.autoencoder, video, cfg.prompts.source, adapters,
                        sf.masked, sf.mask, lora, cfg.edit, traj)
    frames_dir = layout.edit_dir / "frames"
    paths = save_frames(result.frames, frames_dir)
    manifest = {
        "command": "edit",
        "config": config_to_dict(cfg),
        "seed": cfg.seed,
        "source_prompt": cfg.prompts.source,
        "edit_prompt": result.prompt,
        "checkpoints": checkpoints,
        "denoiser_hash": module_hash(comps.denoiser),
        "steps": _strip_seconds(result.steps),
        "guided_steps": sum(r.guidance for r in result.steps),
        "frames": {p.name: file_digest(p) for p in paths},
        "timing": {"per_step_seconds": [r.seconds for r in result.steps],
                   "total_seconds": time.perf_counter() - started},
    }
    write_json(layout.edit_dir / "manifest.json", manifest)
    return result


def score(frames: FrameVideo, prompt: str, refs: FrameVideo | None, emb: ToyJointEmbedder,
          method: str, group: str = "") -> MetricRow:
    return MetricRow(
        method,
        text_alignment(frames, prompt, emb),
        None if refs is None else image_alignment(frames, refs, emb),
        temporal_consistency(frames, emb),
        group,
    )


def run_evaluate(cfg: RunConfig, layout: Layout, comps: Components,
                 frames_dir: str | Path | None = None) -> MetricRow:
    frames_dir = Path(frames_dir) if frames_dir else layout.edit_dir / "frames"
    frames = load_frames(_require(frames_dir, "edit"))
    manifest_path = layout.edit_dir / "manifest.json"
    prompt = cfg.prompts.source
    if manifest_path.exists():
        prompt = json.loads(manifest_path.read_text())["edit_prompt"]
    refs = load_frames(cfg.paths.refs_dir) if cfg.paths.refs_dir else None
    row = score(frames, prompt, refs, comps.embedder, "ours")
    evaluation_report([row], layout.outputs / "evaluate")
    return row


def run_visualize(cfg: RunConfig, layout: Layout, comps: Components) -> list[Path]:
    """One RGB image per frame from the top three components of the foreground tokens."""
    video = load_frames(_video_dir(cfg, "video_dir"))
    sf = subject_features(video, comps.backend, cfg)
    fg = sf.full.features[sf.mask.mask.astype(bool)]
    basis = fit_pca(SemanticFeatureMap(fg[None, None], sf.full.source_resolution), 3)
    rgb = pca_rgb_visualization(sf.full, basis, sf.mask)
    return save_frames(rgb, layout.outputs / "feature_vis")

