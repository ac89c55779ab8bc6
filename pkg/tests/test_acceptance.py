"""Acceptance criteria, each checked at its stated tolerance.

Every test records a PASS/FAIL line that is repeated in the pytest terminal
summary. Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import json
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from acceptance_log import verdict
from conftest import SMALL
from oracles import central_difference, pca_eigh
from test_motion import tiny_case
from subject_edit.adapters import AdapterConfig, AdapterSet, project_guidance
from subject_edit.assets import moving_square
from subject_edit.autoencoder import ToyAutoencoder, decode_video, encode_video
from subject_edit.cli import main
from subject_edit.config import PATH_ENV, load_config
from subject_edit.denoiser import build_denoiser, embed_prompt, init_lora_set, predict_noise
from subject_edit.identity import register_identity
from subject_edit.inference import EditConfig, denoise_from, edit_video, invert_video
from subject_edit.lora import LoraDelta, apply_lora, merge_lora
from subject_edit.metrics import (MISSING_CELL, MetricRow, ToyJointEmbedder, image_alignment,
                                  render_table, temporal_consistency, text_alignment)
from subject_edit.motion import masked_noise_loss, train_motion_adapters
from subject_edit.pipeline import build_components, identity_prompt, subject_features
from subject_edit.schedule import add_noise, ddim_denoise_step, ddim_invert_step, stage_sampler
from subject_edit.semantic import fit_pca, pca_rgb_visualization, resize_mask
from subject_edit.storage import file_digest, module_hash
from subject_edit.types import FrameVideo, GuidanceStack, SemanticFeatureMap

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.yaml"
STAGES = ("mask", "train-motion", "register-identity", "edit", "evaluate")


def rel(a, b) -> float:
    return float(torch.linalg.norm(a - b) / torch.linalg.norm(b))


@pytest.fixture(scope="module")
def toy_assets(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_assets")
    assert main(["make-assets", "--out", str(root)]) == 0
    return root


@pytest.fixture
def toy_env(toy_assets, tmp_path, monkeypatch):
    """Point the bundled toy config at fresh assets and a scratch run directory."""
    monkeypatch.setenv(PATH_ENV["video_dir"], str(toy_assets / "video"))
    monkeypatch.setenv(PATH_ENV["refs_dir"], str(toy_assets / "refs"))
    monkeypatch.setenv(PATH_ENV["checkpoints"], str(tmp_path / "ckpt"))
    monkeypatch.setenv(PATH_ENV["outputs"], str(tmp_path / "out"))
    return tmp_path


@pytest.fixture(scope="module")
def toy(toy_assets):
    os.environ[PATH_ENV["video_dir"]] = str(toy_assets / "video")
    os.environ[PATH_ENV["refs_dir"]] = str(toy_assets / "refs")
    try:
        cfg = load_config(TOY_CONFIG)
    finally:
        for key in ("video_dir", "refs_dir"):
            os.environ.pop(PATH_ENV[key])
    comps = build_components(cfg)
    from subject_edit.storage import load_frames
    video, refs = load_frames(cfg.paths.video_dir), load_frames(cfg.paths.refs_dir)
    return cfg, comps, video, subject_features(video, comps.backend, cfg), refs, \
        subject_features(refs, comps.backend, cfg)


@pytest.fixture(scope="module")
def motion_run(toy):
    cfg, comps, video, vf, *_ = toy
    before = module_hash(comps.denoiser)
    start = time.perf_counter()
    result = train_motion_adapters(video, cfg.prompts.source, comps.denoiser, comps.autoencoder,
                                   vf.masked, vf.mask, cfg.motion_config, cfg.adapters)
    return result, time.perf_counter() - start, before, module_hash(comps.denoiser)


def test_c01_ddim_round_trip(toy):
    cfg, comps, *_ = toy
    video, _ = moving_square(size=128, start=(40, 20))
    z0 = encode_video(video, comps.autoencoder)
    assert tuple(z0.shape) == (16, 64, 64, 4)
    start = time.perf_counter()
    traj = invert_video(comps.denoiser, z0, cfg.prompts.source, 50)
    latents, _ = denoise_from(comps.denoiser, traj, cfg.prompts.source)
    seconds = time.perf_counter() - start
    err = rel(latents[-1], z0)
    verdict("C1 DDIM round trip", err <= 1e-2 and seconds < 60,
            f"relative L2 {err:.3e} (<= 1e-2), {seconds:.1f} s (< 60 s)")


def test_c02_matched_eps_inversion(schedule):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        t_prev, t = sorted(rng.choice(np.arange(0, 1001), size=2, replace=False))
        z = torch.from_numpy(rng.standard_normal((2, 4, 4, 4)))
        eps = torch.from_numpy(rng.standard_normal((2, 4, 4, 4)))
        up = ddim_invert_step(z, eps, int(t_prev), int(t), schedule)
        back = ddim_denoise_step(up, eps, int(t), int(t_prev), schedule)
        worst = max(worst, rel(back, z))
    verdict("C2 matched-eps step inversion", worst <= 1e-6, f"worst relative error {worst:.3e} over 1000")


def test_c03_zero_guidance_equivalence(toy):
    cfg, comps, video, vf, *_ = toy
    net, ae = comps.denoiser, comps.autoencoder
    z0 = encode_video(video, ae)
    text = embed_prompt(cfg.prompts.source, net.cfg.text_dim)
    adapters = AdapterSet.from_config(vf.masked.channels, net.cfg.channel_widths, cfg.adapters, seed=0)
    with torch.no_grad():
        for p in adapters.parameters():
            p.normal_()
    zero = project_guidance(vf.masked, adapters, net.level_sizes(*z0.shape[1:3]), 0.0)
    zt = add_noise(z0, torch.randn(z0.shape, generator=torch.Generator().manual_seed(0)), 700, net.schedule)
    with torch.no_grad():
        same_eps = torch.equal(predict_noise(net, zt, 700, text, guidance=zero).eps_pred,
                               predict_noise(net, zt, 700, text).eps_pred)
    edit_cfg = replace(cfg.edit, lam=0.0, blend_enabled=False, source_word="", target_word="")
    edited = edit_video(net, ae, video, cfg.prompts.source, adapters, vf.masked, vf.mask, None, edit_cfg)
    traj = invert_video(net, z0, cfg.prompts.source, edit_cfg.num_steps)
    plain, _ = denoise_from(net, traj, cfg.prompts.source)
    same_traj = all(torch.equal(edited.trajectory[i], traj[i]) for i in range(len(traj)))
    same_steps = len(plain) == 50 and all(torch.equal(a, b) for a, b in zip(edited.latents, plain))
    verdict("C3 zero-guidance equivalence", same_eps and same_traj and same_steps,
            f"predict_noise bitwise={same_eps}, trajectory bitwise={same_traj}, all 50 steps bitwise={same_steps}")


def test_c04_lora_identities(toy):
    cfg, comps, video, *_ = toy
    net = comps.denoiser
    z = encode_video(video, comps.autoencoder)
    text = embed_prompt("a photo of sks corgi", net.cfg.text_dim)
    with torch.no_grad():
        base = predict_noise(net, z, 400, text).eps_pred
        zero = predict_noise(net, z, 400, text, lora=init_lora_set(net, rank=4)).eps_pred
    bitwise = torch.equal(base, zero)
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        d_in, d_out = (int(v) for v in rng.integers(2, 33, size=2))
        r = int(rng.integers(1, min(d_in, d_out) + 1))
        f32 = lambda *s: torch.from_numpy(rng.standard_normal(s).astype(np.float32))
        w, x = f32(d_out, d_in), f32(5, d_in)
        delta = LoraDelta(f32(r, d_in), f32(d_out, r), float(rng.uniform(0.1, 2.0)))
        worst = max(worst, rel(x @ merge_lora(w, delta).T, apply_lora(x, w, delta)))
    verdict("C4 LoRA identities", bitwise and worst <= 1e-6,
            f"zero-init bitwise={bitwise}, merged vs runtime worst {worst:.3e} (<= 1e-6) over 1000")


def test_c05_pca_oracle(toy):
    rng = np.random.default_rng(5)
    worst = 1.0
    for _ in range(50):
        scales = rng.uniform(0.2, 3.0, 8)
        x = rng.standard_normal((500, 8)) * scales @ np.linalg.qr(rng.standard_normal((8, 8)))[0]
        got = fit_pca(SemanticFeatureMap(x.reshape(1, 1, 500, 8), (1, 500)), 1).components[0]
        want = pca_eigh(x, 1)[0][0]
        worst = min(worst, abs(float(got @ want)))
    cfg, comps, video, vf, *_ = toy
    fg = vf.full.features[vf.mask.mask.astype(bool)]
    basis = fit_pca(SemanticFeatureMap(fg[None, None], vf.full.source_resolution), 3)
    rgb = pca_rgb_visualization(vf.full, basis, vf.mask).frames[vf.mask.mask.astype(bool)]
    exact = all(rgb[:, c].min() == 0.0 and rgb[:, c].max() == 1.0 for c in range(3))
    verdict("C5 PCA oracle", worst >= 0.999 and exact,
            f"min |cos| {worst:.6f} (>= 0.999) over 50 sets of 500x8, visualization ranges exactly [0,1]={exact}")


def test_c06_masked_loss(schedule):
    rng = np.random.default_rng(6)
    eps = torch.from_numpy(rng.standard_normal((2, 16, 16, 4)))
    video, feats, mask = tiny_case()
    m_lat = resize_mask(mask, (16, 16))
    pred = eps.clone()
    off = ~torch.from_numpy(m_lat.mask).bool()
    pred[off] = torch.from_numpy(rng.standard_normal((int(off.sum()), 4)) * 10)
    zero = masked_noise_loss(eps, pred, m_lat).item()

    net = build_denoiser(replace(SMALL, channel_widths=(4, 4, 4, 4)), schedule).double()
    z0 = encode_video(video, ToyAutoencoder(patch=2, latent_scale=4.0, dtype=torch.float64))
    psi = AdapterSet(feats.channels, net.cfg.channel_widths, hidden_width=4).double()
    g = torch.Generator().manual_seed(6)
    with torch.no_grad():
        for p in psi.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.5)
    text = embed_prompt("a cat walking", net.cfg.text_dim)
    noise = torch.randn(z0.shape, generator=g, dtype=torch.float64)

    def loss():
        guidance = project_guidance(feats, psi, net.level_sizes(16, 16), 1.0)
        out = net(add_noise(z0, noise, 800, schedule), 800, text, guidance=guidance).eps_pred
        return masked_noise_loss(noise, out, m_lat)

    params = list(psi.parameters())
    analytic = torch.autograd.grad(loss(), params)
    numeric = central_difference(loss, params)
    worst = max(np.linalg.norm(a.numpy() - n) / np.linalg.norm(n) for a, n in zip(analytic, numeric))
    verdict("C6 masked loss", zero == 0.0 and worst <= 1e-3,
            f"off-mask-only residual loss {zero!r}, worst gradient relative error {worst:.3e} (<= 1e-3) "
            f"over {sum(p.numel() for p in params)} parameters")


def test_c07_timestep_windows(schedule):
    draws = stage_sampler(schedule, schedule.total_steps // 2, seed=7).draw(10_000)
    n = draws.size
    sigma = np.sqrt(((1000 - 500 + 1) ** 2 - 1) / 12 / n)
    in_window = bool(draws.min() >= 500 and draws.max() <= 1000)
    mean_ok = abs(draws.mean() - 750.0) <= 3 * sigma
    low = int((stage_sampler(schedule, None, seed=8).draw(10_000) < 500).sum())
    verdict("C7 timestep windows", in_window and mean_ok and low > 0,
            f"stage-1 range [{draws.min()}, {draws.max()}], mean {draws.mean():.2f} vs 750 +- {3 * sigma:.2f}, "
            f"{low} stage-2 draws below 500")


def test_c08_stage1_training(toy, motion_run):
    cfg = toy[0]
    result, seconds, before, after = motion_run
    ratio = result.probe_final / result.probe_initial
    verdict("C8 stage-1 training",
            ratio <= 0.5 and seconds < 120 and before == after
            and cfg.motion_config.iterations == 100 and cfg.motion_config.learning_rate == 5e-4,
            f"probe {result.probe_initial:.4f} -> {result.probe_final:.4f} (ratio {ratio:.3f} <= 0.5), "
            f"{seconds:.1f} s (< 120 s), denoiser hash unchanged={before == after}")


def test_c09_stage2_training(toy):
    cfg, comps, _, _, refs, rf = toy
    net = comps.denoiser
    before = module_hash(net)
    result = register_identity(refs, identity_prompt(cfg), net, comps.autoencoder, rf.masked, rf.mask,
                               cfg.identity_config, cfg.adapters)
    ratio = result.probe_final / result.probe_initial
    fresh = AdapterSet.from_config(rf.masked.channels, net.cfg.channel_widths, cfg.adapters,
                                   seed=cfg.identity_config.seed + 1)
    phi_changed = any(not torch.equal(p, q) for p, q in zip(result.adapters.parameters(), fresh.parameters()))
    lora_changed = any(torch.count_nonzero(d.up) > 0 for d in result.lora.values())
    unchanged = module_hash(net) == before
    verdict("C9 stage-2 training",
            ratio <= 0.5 and unchanged and phi_changed and lora_changed
            and cfg.identity_config.iterations == 800 and cfg.identity_config.learning_rate == 1e-4
            and refs.frame_count == 3,
            f"probe {result.probe_initial:.4f} -> {result.probe_final:.4f} (ratio {ratio:.3f} <= 0.5), "
            f"base weights unchanged={unchanged}, LoRA changed={lora_changed}, phi changed={phi_changed}")


@pytest.fixture(scope="module")
def toy_edit(toy, motion_run):
    cfg, comps, video, vf, *_ = toy
    return edit_video(comps.denoiser, comps.autoencoder, video, cfg.prompts.source, motion_run[0].adapters,
                      vf.masked, vf.mask, None, cfg.edit)


def test_c10_background_preservation(toy, toy_edit):
    cfg, comps, video, *_ = toy
    r = toy_edit
    off = ~torch.from_numpy(r.latent_mask.mask).bool()
    n = len(r.trajectory) - 1
    bitwise = len(r.latents) == 50 and all(
        torch.equal(z[off], r.trajectory[n - 1 - k][off]) for k, z in enumerate(r.latents))
    patch = comps.autoencoder.patch
    pix = r.latent_mask.mask.repeat(patch, axis=1).repeat(patch, axis=2).astype(bool)
    band = pix.copy()
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            band |= np.roll(np.roll(pix, dy, axis=1), dx, axis=2)
    bg = ~band
    err = float(np.abs(r.frames.frames - video.frames)[bg].max())
    verdict("C10 background preservation", bitwise and err <= 1e-2,
            f"off-mask latents bitwise at all 50 steps={bitwise}, background pixel max error {err:.2e} "
            f"(<= 1e-2) over {int(bg.sum())} pixel positions")


def test_c11_injection_window(toy_edit):
    steps = toy_edit.steps
    guided = [s.t for s in steps if s.guidance]
    ok = len(steps) == 50 and len(guided) == 25 and all(t > 500 for t in guided) \
        and all(s.guidance == (s.t > 500) for s in steps)
    verdict("C11 injection window", ok,
            f"{len(guided)} of {len(steps)} steps guided, t from {min(guided)} to {max(guided)}")


def test_c12_metrics_sanity():
    emb = ToyJointEmbedder()
    frame = np.random.default_rng(12).uniform(size=(1, 64, 64, 3))
    constant = temporal_consistency(FrameVideo(np.repeat(frame, 8, axis=0)), emb)

    class Scaled:
        def embed_image(self, f):
            return 37.5 * emb.embed_image(f)

        def embed_text(self, t):
            return 37.5 * emb.embed_text(t)

    rng = np.random.default_rng(13)
    v, refs = FrameVideo(rng.uniform(size=(4, 32, 32, 3))), FrameVideo(rng.uniform(size=(2, 32, 32, 3)))
    pairs = [(text_alignment(v, "a dog", emb), text_alignment(v, "a dog", Scaled())),
             (image_alignment(v, refs, emb), image_alignment(v, refs, Scaled())),
             (temporal_consistency(v, emb), temporal_consistency(v, Scaled()))]
    invariant = all(abs(a - b) <= 1e-9 for a, b in pairs)
    table = render_table([MetricRow("ours", 31.0, 84.0, 92.0), MetricRow("text", 30.0, None, 91.0)])
    text_row = next(l for l in table.splitlines() if l.startswith("text"))
    marked = text_row.split("|")[2].strip() == MISSING_CELL
    verdict("C12 metrics sanity", constant == 100.0 and invariant and marked,
            f"constant video {constant!r}, rescaling invariant={invariant}, text-guided image cell "
            f"renders {MISSING_CELL}={marked}")


def _run_pipeline() -> float:
    start = time.perf_counter()
    for stage in STAGES:
        assert main([stage, "--config", str(TOY_CONFIG)]) == 0, stage
    return time.perf_counter() - start


def _manifest_ok(run_dir: Path) -> bool:
    edit = run_dir / "out" / "edit"
    m = json.loads((edit / "manifest.json").read_text())
    frames = all(file_digest(edit / "frames" / name) == digest for name, digest in m["frames"].items())
    ckpts = {"motion_adapters": run_dir / "ckpt" / "motion_adapters.safetensors",
             "identity_lora": run_dir / "ckpt" / "identity_lora.safetensors"}
    ckpt_ok = all(file_digest(p) == m["checkpoints"][k] for k, p in ckpts.items())
    return frames and ckpt_ok and len(m["frames"]) == 16 and m["guided_steps"] == 25 \
        and (run_dir / "out" / "evaluate" / "metrics.csv").is_file()


def _comparable(run_dir: Path) -> dict:
    m = json.loads((run_dir / "out" / "edit" / "manifest.json").read_text())
    m.pop("timing")
    m["config"].pop("paths")
    return m


def test_c13_end_to_end(toy_env, monkeypatch):
    first = _run_pipeline()
    second_dir = toy_env / "rerun"
    monkeypatch.setenv(PATH_ENV["checkpoints"], str(second_dir / "ckpt"))
    monkeypatch.setenv(PATH_ENV["outputs"], str(second_dir / "out"))
    second = _run_pipeline()
    valid = _manifest_ok(toy_env) and _manifest_ok(second_dir)
    identical = _comparable(toy_env) == _comparable(second_dir)
    verdict("C13 end-to-end", first < 300 and valid and identical,
            f"pipeline {first:.1f} s (< 300 s), manifest valid={valid}, rerun bit-identical={identical} "
            f"({second:.1f} s)")
