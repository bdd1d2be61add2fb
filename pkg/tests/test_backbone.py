import dataclasses

import numpy as np
import pytest
import torch

from phinet_core.abstract import ConfigurationError, NumericalError
from phinet_core.backbone import (
    Encoder,
    assemble_patches,
    compute_pixel_stats,
    encode,
    patchify,
    perturb,
)
from phinet_core.gradcheck import randomize_parameters


def test_patchify_raster_order(micro_cfg):
    g, p = micro_cfg.grid_size, micro_cfg.patch_size
    frame = torch.zeros(micro_cfg.channels, micro_cfg.image_size, micro_cfg.image_size)
    for i in range(g):
        for j in range(g):
            frame[:, i * p : (i + 1) * p, j * p : (j + 1) * p] = i * g + j
    patches = patchify(frame, micro_cfg)
    assert patches.shape == (micro_cfg.n_p - 1, micro_cfg.patch_dim)
    for k in range(g * g):
        assert torch.all(patches[k] == k)


def test_assemble_inverts_patchify(micro_cfg, micro_frames):
    x, _ = micro_frames
    assert torch.equal(assemble_patches(patchify(x, micro_cfg), micro_cfg), x)


def test_patchify_rejects_wrong_size(micro_cfg):
    with pytest.raises(ConfigurationError):
        patchify(torch.zeros(3, 9, 9), micro_cfg)


def test_encode_shapes(micro_cfg, micro_frames):
    encoder = Encoder(micro_cfg).double()
    x, _ = micro_frames
    batched = encode(encoder, x)
    assert batched.shape == (x.shape[0], micro_cfg.n_p, micro_cfg.d)
    single = encode(encoder, x[1])
    assert single.shape == (micro_cfg.n_p, micro_cfg.d)
    torch.testing.assert_close(single, batched[1])


def test_identical_frames_give_identical_tokens(micro_cfg, micro_frames, generator):
    encoder = Encoder(micro_cfg).double()
    randomize_parameters(encoder, generator)
    x, _ = micro_frames
    tokens = encode(encoder, torch.stack([x[0], x[0]]))
    assert torch.equal(tokens[0], tokens[1])


def test_permutation_covariance_without_positions(micro_cfg, micro_frames, generator):
    cfg = dataclasses.replace(micro_cfg, use_pos_embed=False)
    encoder = Encoder(cfg).double()
    randomize_parameters(encoder, generator)
    x, _ = micro_frames
    patches = patchify(x, cfg)
    perm = torch.tensor([2, 0, 3, 1])
    shuffled = assemble_patches(patches[:, perm], cfg)
    tokens = encode(encoder, x)
    shuffled_tokens = encode(encoder, shuffled)
    torch.testing.assert_close(shuffled_tokens[:, 1:], tokens[:, 1:][:, perm])
    torch.testing.assert_close(shuffled_tokens[:, 0], tokens[:, 0])


def test_perturb(generator):
    x = torch.zeros(200, 3, 16, 16, dtype=torch.float64)
    assert perturb(x, 0.0, generator) is x
    noisy = perturb(x, 0.5, generator)
    assert abs(float(noisy.std()) - 0.5) < 0.01
    assert abs(float(noisy.mean())) < 0.01
    with pytest.raises(ConfigurationError):
        perturb(x, -0.1, generator)


def test_perturb_is_seeded():
    x = torch.zeros(2, 3, 8, 8)
    a = perturb(x, 1.0, torch.Generator().manual_seed(3))
    b = perturb(x, 1.0, torch.Generator().manual_seed(3))
    assert torch.equal(a, b)


def test_pixel_stats_and_normalize(micro_cfg):
    rng = np.random.default_rng(0)
    frames = rng.uniform(0.2, 0.6, size=(10, 3, 8, 8))
    mean, std = compute_pixel_stats(frames)
    encoder = Encoder(micro_cfg).double()
    encoder.set_pixel_stats(mean, std)
    normalized = encoder.normalize(torch.from_numpy(frames))
    np.testing.assert_allclose(normalized.mean(dim=(0, 2, 3)).numpy(), 0.0, atol=1e-12)
    np.testing.assert_allclose(normalized.std(dim=(0, 2, 3), unbiased=False).numpy(), 1.0, rtol=1e-12)


def test_non_finite_input_names_the_block(micro_cfg, micro_frames):
    encoder = Encoder(micro_cfg).double()
    x, _ = micro_frames
    x = x.clone()
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalError) as info:
        encode(encoder, x)
    assert info.value.where == "encoder.blocks.0"
