import numpy as np
import pytest
import torch
import torch.nn.functional as F

from phinet_core.abstract import ConfigurationError, ProtocolError
from phinet_core.backbone import Encoder
from phinet_core.config import PropagationParams
from phinet_core.gradcheck import randomize_parameters
from phinet_core.propagate import (
    Evaluator,
    boundary,
    boundary_f,
    collapse_metrics,
    downsample_mask,
    evaluate_dataset,
    evaluate_sequence,
    extract_features,
    jaccard,
    propagate_labels,
)
from phinet_core.videodata import LabeledVideo, ShapeSpec, SyntheticVideoSpec, generate_video


@pytest.fixture
def encoder(micro_cfg, generator):
    module = Encoder(micro_cfg).double()
    randomize_parameters(module, generator)
    return module


@pytest.fixture
def static_video():
    """Three identical frames; label 1 fills the top-left patch of the micro grid."""
    square = ShapeSpec(kind="square", size=2.0, position=(1.5, 1.5), color=(0.9, 0.1, 0.1))
    return generate_video(SyntheticVideoSpec(n_frames=3, image_size=8, shapes=(square,), video_id="static"))


def _random_grids(generator, n_frames=4, side=4, d=6):
    grids = torch.randn(n_frames, side, side, d, generator=generator, dtype=torch.float64)
    return F.normalize(grids, dim=-1)


def test_extract_features_shapes_and_norms(encoder, micro_videos):
    frames = micro_videos[0].frames
    grids = extract_features(encoder, frames)
    assert grids.shape == (len(frames), 2, 2, 8)
    torch.testing.assert_close(grids.norm(dim=-1), torch.ones(len(frames), 2, 2, dtype=torch.float64))
    assert extract_features(encoder, frames[0]).shape == (2, 2, 8)


def test_downsample_mask():
    mask = np.zeros((4, 4), dtype=np.int64)
    mask[:2, :2] = 1
    mask[2:, 2:] = 2
    mask[0, 2:] = 3
    mask[1, 2] = 3
    assert downsample_mask(mask, 2).tolist() == [[1, 3], [0, 2]]
    tie = np.array([[0, 0], [1, 1]])
    assert downsample_mask(tie, 1).tolist() == [[0]]
    with pytest.raises(ConfigurationError):
        downsample_mask(np.zeros((5, 5), dtype=np.int64), 2)


def test_orthogonal_features_copy_the_reference():
    side = 3
    basis = torch.eye(side * side, dtype=torch.float64).reshape(side, side, side * side)
    grids = torch.stack([basis] * 5)
    ref = np.array([[0, 1, 1], [0, 2, 1], [0, 0, 2]])
    soft = propagate_labels(grids, ref, PropagationParams(top_k=1, radius=1, queue=2))
    expected = F.one_hot(torch.as_tensor(ref), 3).to(torch.float64)
    for t in range(5):
        torch.testing.assert_close(soft[t], expected)
    soft = propagate_labels(grids, ref, PropagationParams(top_k=3, radius=1, queue=2))
    for t in range(5):
        assert np.array_equal(soft[t].argmax(dim=-1).numpy(), ref)


def test_first_frame_neighbours_are_distinct_patches():
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    b = torch.tensor([0.0, 1.0], dtype=torch.float64)
    between = F.normalize(a + b, dim=0)
    frame0 = torch.stack([a, b]).reshape(1, 2, 2)
    frame1 = torch.stack([between, between]).reshape(1, 2, 2)
    ref = np.array([[1, 2]])
    params = PropagationParams(top_k=2, radius=1, queue=3)
    soft = propagate_labels(torch.stack([frame0, frame1]), ref, params)
    expected = torch.tensor([[[0.0, 0.5, 0.5], [0.0, 0.5, 0.5]]], dtype=torch.float64)
    torch.testing.assert_close(soft[1], expected)
    single = propagate_labels(torch.stack([frame0, frame1]), ref, PropagationParams(top_k=1, radius=1, queue=3))
    assert not torch.allclose(single[1], soft[1])


def test_zero_radius_single_neighbour_keeps_the_reference(generator):
    grids = _random_grids(generator)
    ref = np.arange(16).reshape(4, 4) % 3
    soft = propagate_labels(grids, ref, PropagationParams(top_k=1, radius=0, queue=1))
    assert np.array_equal(soft.argmax(dim=-1)[-1].numpy(), ref)
    assert torch.all((soft == 0) | (soft == 1))


def test_soft_labels_are_distributions(generator):
    grids = _random_grids(generator)
    ref = (np.arange(16).reshape(4, 4) // 5).astype(np.int64)
    soft = propagate_labels(grids, ref, PropagationParams(top_k=5, radius=1, queue=2), n_labels=5)
    assert soft.shape == (4, 4, 4, 5)
    assert torch.all(soft >= 0)
    torch.testing.assert_close(soft.sum(dim=-1), torch.ones(4, 4, 4, dtype=torch.float64))


def test_horizontal_flip_equivariance(generator):
    grids = _random_grids(generator)
    ref = (np.arange(16).reshape(4, 4) % 2).astype(np.int64)
    params = PropagationParams(top_k=5, radius=1, queue=2)
    soft = propagate_labels(grids, ref, params)
    flipped = propagate_labels(torch.flip(grids, dims=[2]), ref[:, ::-1].copy(), params)
    torch.testing.assert_close(flipped, torch.flip(soft, dims=[2]))


def test_reference_shape_mismatch(generator):
    with pytest.raises(ConfigurationError):
        propagate_labels(_random_grids(generator), np.zeros((3, 4), dtype=np.int64))


def test_jaccard():
    a = np.array([[1, 1], [0, 0]])
    b = np.array([[1, 0], [1, 0]])
    assert jaccard(a, a, 1) == 1.0
    assert jaccard(a, b, 1) == pytest.approx(1.0 / 3.0)
    assert jaccard(a, 1 - a, 1) == 0.0
    assert jaccard(a, b, 7) == 1.0
    with pytest.raises(ConfigurationError):
        jaccard(a, np.zeros((3, 3)), 1)


def test_boundary_ignores_the_image_border():
    assert not boundary(np.ones((4, 4), dtype=bool)).any()
    region = np.zeros((5, 5), dtype=bool)
    region[1:4, 1:4] = True
    ring = region.copy()
    ring[2, 2] = False
    assert np.array_equal(boundary(region), ring)


def _square(offset):
    mask = np.zeros((12, 12), dtype=np.int64)
    mask[2:6, 2 + offset : 6 + offset] = 1
    return mask


def test_boundary_f():
    assert boundary_f(_square(0), _square(0), 1) == 1.0
    assert boundary_f(_square(0), _square(1), 1, tol=1) == 1.0
    assert boundary_f(_square(0), _square(1), 1, tol=0) < 1.0
    assert boundary_f(_square(0), _square(5), 1, tol=1) < 0.5
    assert boundary_f(_square(0), np.zeros((12, 12), dtype=np.int64), 1) == 0.0
    assert boundary_f(np.zeros((12, 12)), np.zeros((12, 12)), 1) == 1.0


def test_boundary_f_is_symmetric():
    a, b = _square(0), _square(2)
    b[3, 3] = 1
    assert boundary_f(a, b, 1) == pytest.approx(boundary_f(b, a, 1))


def test_collapse_metrics():
    std, rank = collapse_metrics(torch.eye(4, dtype=torch.float64))
    assert rank == pytest.approx(4.0)
    np.testing.assert_allclose(std, np.full(4, np.sqrt(3.0) / 4.0))
    line = np.outer(np.arange(1.0, 6.0), [1.0, 2.0, 0.0])
    assert collapse_metrics(line)[1] == pytest.approx(1.0)
    std, rank = collapse_metrics(np.zeros((3, 2)))
    assert rank == 0.0 and not std.any()
    with pytest.raises(ProtocolError):
        collapse_metrics(np.ones((1, 4)))


def test_static_video_scores_perfectly(encoder, static_video):
    score = evaluate_sequence(encoder, static_video, PropagationParams())
    assert (score.j_mean, score.f_mean, score.jf_mean) == (1.0, 1.0, 1.0)
    assert score.predictions.shape == (3, 2, 2)
    assert score.predictions[-1].tolist() == [[1, 0], [0, 0]]


def test_upsampled_predictions(encoder, static_video):
    score = evaluate_sequence(encoder, static_video, PropagationParams(upsample=True))
    assert score.predictions.shape == (3, 8, 8)
    assert 0.0 <= score.j_mean <= 1.0 and 0.0 <= score.f_mean <= 1.0


def test_sequences_without_targets(encoder, static_video):
    with pytest.raises(ProtocolError):
        evaluate_sequence(encoder, LabeledVideo(frames=static_video.frames, masks=None))
    empty = LabeledVideo(frames=static_video.frames, masks=np.zeros_like(static_video.masks))
    with pytest.raises(ProtocolError):
        evaluate_sequence(encoder, empty)


def test_evaluator_writes_masks_and_scores(tmp_path, encoder, static_video):
    scores = evaluate_dataset(encoder, [static_video], PropagationParams(), out_dir=tmp_path)
    assert len(scores) == 1
    assert (tmp_path / "masks" / "static" / "frame_000002.png").is_file()
    rows = (tmp_path / "scores.csv").read_text(encoding="utf-8").strip().splitlines()
    assert rows[0] == "sequence,J_m,F_m,J&F_m,feature_std,effective_rank"
    assert rows[1].startswith("static,1.000000")
    assert len(rows[1].split(",")) == 6
    assert scores[0].feature_std >= 0.0 and 0.0 <= scores[0].effective_rank <= 8.0 + 1e-9
    assert rows[-1].startswith("mean,")
    assert Evaluator(encoder).evaluate([static_video])[0].jf_mean == 1.0
