import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from subject_edit.assets import moving_square, reference_images
from subject_edit.autoencoder import ToyAutoencoder, decode_video, encode_video
from subject_edit.types import FrameVideo


def _patch_constant(rng, n, h, w, p):
    cells = rng.uniform(0, 1, size=(n, h // p, w // p, 3))
    return FrameVideo(cells.repeat(p, axis=1).repeat(p, axis=2))


def test_512_frame_patch8_gives_64_grid():
    ae = ToyAutoencoder(patch=8, latent_channels=4)
    z = encode_video(FrameVideo(np.zeros((1, 512, 512, 3))), ae)
    assert tuple(z.shape) == (1, 64, 64, 4)


def test_zero_frame_and_zero_latent():
    ae = ToyAutoencoder()
    assert torch.count_nonzero(encode_video(FrameVideo(np.zeros((2, 16, 16, 3))), ae)) == 0
    assert np.all(decode_video(torch.zeros(2, 2, 2, 4), ae).frames == 0.0)


@pytest.mark.parametrize("patch,d", [(8, 4), (2, 4), (2, 12), (1, 3)])
def test_rows_orthonormal(patch, d):
    e = ToyAutoencoder(patch, d).matrix
    np.testing.assert_allclose(e @ e.T, np.eye(d), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([2, 4, 8]), st.integers(1, 3), st.integers(0, 10_000),
       st.sampled_from([1.0, 4.0]))
def test_roundtrip_for_frames_in_encoder_span(patch, n, seed, scale):
    rng = np.random.default_rng(seed)
    v = _patch_constant(rng, n, 2 * patch * 2, 3 * patch * 2, patch)
    ae = ToyAutoencoder(patch, 4, scale, dtype=torch.float64)
    back = decode_video(encode_video(v, ae), ae)
    assert back.frame_count == n
    np.testing.assert_allclose(back.frames, v.frames, atol=1e-5)


def test_full_rank_encoder_roundtrips_arbitrary_frames(rng):
    ae = ToyAutoencoder(patch=2, latent_channels=12, dtype=torch.float64)
    v = FrameVideo(rng.uniform(0, 1, size=(2, 8, 8, 3)))
    np.testing.assert_allclose(decode_video(encode_video(v, ae), ae).frames, v.frames, atol=1e-12)


def test_encode_is_linear(rng):
    ae = ToyAutoencoder(patch=2, dtype=torch.float64)
    a, b = rng.uniform(0, 0.5, (1, 4, 4, 3)), rng.uniform(0, 0.5, (1, 4, 4, 3))
    za, zb = encode_video(FrameVideo(a), ae), encode_video(FrameVideo(b), ae)
    torch.testing.assert_close(encode_video(FrameVideo(a + b), ae), za + zb)


def test_decode_clamps_instead_of_failing():
    ae = ToyAutoencoder(patch=2)
    out = decode_video(torch.full((1, 2, 2, 4), 50.0), ae).frames
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_errors():
    ae = ToyAutoencoder(patch=8)
    with pytest.raises(ValueError):
        encode_video(FrameVideo(np.zeros((1, 12, 16, 3))), ae)
    with pytest.raises(ValueError):
        decode_video(torch.zeros(1, 2, 2, 3), ae)
    with pytest.raises(ValueError):
        ToyAutoencoder(patch=1, latent_channels=4)


def test_toy_assets_lie_in_patch2_span():
    ae = ToyAutoencoder(patch=2, latent_scale=4.0, dtype=torch.float64)
    video, mask = moving_square()
    refs, ref_masks = reference_images()
    assert video.frames.shape == (16, 64, 64, 3) and mask.mask.shape == (16, 64, 64)
    assert refs.frame_count == 3
    for v in (video, refs):
        np.testing.assert_allclose(decode_video(encode_video(v, ae), ae).frames, v.frames, atol=1e-12)
    # the square moves two pixels per frame
    cols = [np.nonzero(m.any(axis=0))[0][0] for m in mask.mask]
    assert np.all(np.diff(cols) == 2)
    assert all(m.any() for m in ref_masks.mask)
