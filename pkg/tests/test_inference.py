import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import SMALL
from oracles import swap_tokens
from test_motion import ADAPTERS, tiny_case
from subject_edit.adapters import AdapterSet
from subject_edit.autoencoder import ToyAutoencoder, encode_video
from subject_edit.denoiser import build_denoiser
from subject_edit.inference import (EditConfig, InversionTrajectory, blend_latents, denoise_from,
                                    edit_video, invert_video, swap_subject_word)
from subject_edit.types import ForegroundMask


@pytest.mark.parametrize("prompt,src,tgt,expected", [
    ("a cat walking", "cat", "sks corgi", "a sks corgi walking"),
    ("cat and cat", "cat", "dog", "dog and dog"),
    ("a catfish and a cat", "cat", "dog", "a catfish and a dog"),
])
def test_swap_examples(prompt, src, tgt, expected):
    assert swap_subject_word(prompt, src, tgt) == expected
    assert swap_tokens(prompt, src, tgt) == expected


WORDS = st.sampled_from(["a", "cat", "dog", "walking", "on", "grass", "catnip"])


@settings(max_examples=100, deadline=None)
@given(st.lists(WORDS, min_size=1, max_size=8).filter(lambda ws: "cat" in ws))
def test_swap_matches_token_oracle(words):
    prompt = " ".join(words)
    assert swap_subject_word(prompt, "cat", "sks dog") == swap_tokens(prompt, "cat", "sks dog")


def test_swap_errors():
    with pytest.raises(ValueError):
        swap_subject_word("a dog", "cat", "corgi")
    with pytest.raises(ValueError):
        swap_subject_word("a cat", "", "corgi")


def test_blend_selects_by_mask(rng):
    a = torch.from_numpy(rng.standard_normal((2, 3, 3, 4)))
    b = torch.from_numpy(rng.standard_normal((2, 3, 3, 4)))
    m = (rng.uniform(size=(2, 3, 3)) < 0.5).astype(np.uint8)
    out = blend_latents(a, b, ForegroundMask(m)).numpy()
    for idx in np.ndindex(2, 3, 3):
        assert np.array_equal(out[idx], (a if m[idx] else b).numpy()[idx])
    assert torch.equal(blend_latents(a, b, ForegroundMask(np.ones_like(m))), a)
    assert torch.equal(blend_latents(a, b, ForegroundMask(np.zeros_like(m))), b)
    with pytest.raises(ValueError):
        blend_latents(a, b[:1], ForegroundMask(m))


@pytest.fixture(scope="module")
def scene(schedule):
    net = build_denoiser(SMALL, schedule)
    ae = ToyAutoencoder(patch=2, latent_scale=4.0)
    video, feats, mask = tiny_case()
    adapters = AdapterSet.from_config(6, net.cfg.channel_widths, ADAPTERS, seed=4)
    g = torch.Generator().manual_seed(4)
    with torch.no_grad():
        for p in adapters.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * 0.3)
    return net, ae, video, feats, mask, adapters


def test_injection_window_is_upper_half(scene):
    net, ae, video, feats, mask, adapters = scene
    r = edit_video(net, ae, video, "a cat walking", adapters, feats, mask,
                   cfg=EditConfig(source_word="cat", target_word="dog"))
    guided = [s.t for s in r.steps if s.guidance]
    assert len(r.steps) == 50 and len(guided) == 25
    assert all(t > 500 for t in guided)
    assert 500 in [s.t for s in r.steps if not s.guidance]
    assert r.prompt == "a dog walking"


def test_zero_lambda_equals_plain_reconstruction(scene):
    net, ae, video, feats, mask, adapters = scene
    r = edit_video(net, ae, video, "a cat walking", adapters, feats, mask,
                   cfg=EditConfig(lam=0.0, blend_enabled=False))
    plain, _ = denoise_from(net, r.trajectory, "a cat walking")
    assert len(plain) == len(r.latents) == 50
    for a, b in zip(r.latents, plain):
        assert torch.equal(a, b)


def test_blending_keeps_background_on_trajectory(scene):
    net, ae, video, feats, mask, adapters = scene
    r = edit_video(net, ae, video, "a cat walking", adapters, feats, mask,
                   cfg=EditConfig(num_steps=10, source_word="cat", target_word="dog"))
    off = ~torch.from_numpy(r.latent_mask.mask).bool()
    n = len(r.trajectory.timesteps) - 1
    for k, z in enumerate(r.latents):
        assert torch.equal(z[off], r.trajectory[n - 1 - k][off])


def test_missing_adapters_and_mask(scene):
    net, ae, video, feats, mask, _ = scene
    with pytest.raises(ValueError, match="adapters"):
        edit_video(net, ae, video, "a cat", None, feats, mask)
    r = edit_video(net, ae, video, "a cat", None, feats, mask,
                   cfg=EditConfig(num_steps=4, use_motion_guidance=False))
    assert not any(s.guidance for s in r.steps)
    with pytest.raises(ValueError, match="mask"):
        edit_video(net, ae, video, "a cat", scene[5], feats, None, cfg=EditConfig(num_steps=4))


def test_trajectory_length_checked(scene):
    net, ae, video, feats, mask, adapters = scene
    z0 = encode_video(video, ae)
    traj = invert_video(net, z0, "a cat", num_steps=5)
    with pytest.raises(ValueError, match="trajectory"):
        edit_video(net, ae, video, "a cat", adapters, feats, mask, cfg=EditConfig(num_steps=6),
                   trajectory=traj)


def test_stride_recompute_is_bitwise(scene):
    net, ae, video, *_ = scene
    z0 = encode_video(video, ae)
    full = invert_video(net, z0, "a cat", num_steps=12)
    sparse = invert_video(net, z0, "a cat", num_steps=12, stride=5)
    assert len(sparse._kept) < len(full._kept)
    for i in range(len(full)):
        assert torch.equal(full[i], sparse[i])


def test_from_states_round_trip(scene):
    net, ae, video, *_ = scene
    z0 = encode_video(video, ae)
    traj = invert_video(net, z0, "a cat", num_steps=6)
    again = InversionTrajectory.from_states(net, [traj[i] for i in range(len(traj))], "a cat", 6)
    assert again.timesteps == traj.timesteps
    a, _ = denoise_from(net, traj, "a cat")
    b, _ = denoise_from(net, again, "a cat")
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        InversionTrajectory.from_states(net, [z0], "a cat", 6)


def test_stop_outside_range_rejected(scene):
    net, ae, video, *_ = scene
    traj = invert_video(net, encode_video(video, ae), "a", num_steps=2)
    with pytest.raises(ValueError):
        denoise_from(net, traj, "a", injection_stop=1001)


def test_config_validation():
    with pytest.raises(ValueError):
        EditConfig(num_steps=0)
    with pytest.raises(ValueError):
        EditConfig(lam=-0.1)
    with pytest.raises(ValueError):
        EditConfig(trajectory_stride=0)
