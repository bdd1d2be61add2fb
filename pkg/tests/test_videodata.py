import numpy as np
import pytest

from phinet_core.abstract import ConfigurationError
from phinet_core.config import TrainConfig
from phinet_core.videodata import (
    AugmentationRecord,
    ShapeSpec,
    SyntheticVideoSpec,
    apply_augmentation,
    augment_pair,
    epoch_pairs,
    generate_dataset,
    generate_video,
    read_dataset,
    sample_pair,
    static_dataset,
    write_dataset,
)


def _disk_video(**kwargs):
    shape = ShapeSpec(kind="disk", size=4.0, position=(10.0, 16.0), velocity=(4.0, 0.0), color=(1.0, 0.0, 0.0))
    return generate_video(SyntheticVideoSpec(n_frames=4, image_size=32, shapes=(shape,), **kwargs))


def test_disk_moves_with_constant_velocity():
    video = _disk_video()
    assert video.frames.shape == (4, 3, 32, 32)
    assert video.frames.dtype == np.float32
    for t in range(4):
        rows, cols = np.nonzero(video.masks[t] == 1)
        assert cols.mean() == pytest.approx(10 + 4 * t)
        assert rows.mean() == pytest.approx(16)
        assert np.all(video.frames[t][:, video.masks[t] == 1] == np.array([[1.0], [0.0], [0.0]], dtype=np.float32))


def test_shapes_wrap_around_the_border():
    shape = ShapeSpec(kind="square", size=3.0, position=(30.0, 2.0), velocity=(5.0, 3.0))
    video = generate_video(SyntheticVideoSpec(n_frames=8, image_size=32, shapes=(shape,)))
    areas = [(m == 1).sum() for m in video.masks]
    assert areas[0] == 49
    assert len(set(areas)) == 1


def test_later_shapes_occlude_earlier_ones():
    back = ShapeSpec(kind="square", size=6.0, position=(16.0, 16.0))
    front = ShapeSpec(kind="disk", size=3.0, position=(16.0, 16.0), color=(0.0, 0.0, 1.0))
    video = generate_video(SyntheticVideoSpec(n_frames=2, image_size=32, shapes=(back, front)))
    assert video.masks[0, 16, 16] == 2
    assert video.masks[0, 16, 21] == 1
    assert video.masks[0, 0, 0] == 0


@pytest.mark.parametrize(
    "spec",
    [
        SyntheticVideoSpec(n_frames=1),
        SyntheticVideoSpec(shapes=(ShapeSpec(size=0.0),)),
        SyntheticVideoSpec(shapes=(ShapeSpec(kind="star"),)),
        SyntheticVideoSpec(background="noise"),
    ],
)
def test_degenerate_specs(spec):
    with pytest.raises(ConfigurationError):
        generate_video(spec)


def test_generation_is_deterministic():
    a = generate_dataset(n_videos=3, n_frames=6, image_size=16, seed=7)
    b = generate_dataset(n_videos=3, n_frames=6, image_size=16, seed=7)
    c = generate_dataset(n_videos=3, n_frames=6, image_size=16, seed=8)
    assert [v.video_id for v in a] == ["video_0000", "video_0001", "video_0002"]
    for x, y in zip(a, b):
        assert np.array_equal(x.frames, y.frames) and np.array_equal(x.masks, y.masks)
    assert not all(np.array_equal(x.frames, y.frames) for x, y in zip(a, c))


def test_static_dataset_does_not_move():
    for video in static_dataset(n_videos=2, n_frames=5, image_size=16):
        assert all(np.array_equal(video.masks[0], m) for m in video.masks)
        assert all(np.array_equal(video.frames[0], f) for f in video.frames)


def test_sample_pair_ranges():
    video = generate_dataset(n_videos=1, n_frames=10, image_size=8)[0]
    rng = np.random.default_rng(0)
    seen_k = set()
    for _ in range(300):
        pair = sample_pair(video, 2, 5, rng)
        assert 2 <= pair.k <= 5
        assert 1 <= pair.t and pair.t + pair.k <= 10
        assert np.array_equal(pair.x_t, video.frames[pair.t - 1])
        assert np.array_equal(pair.x_tk, video.frames[pair.t - 1 + pair.k])
        assert np.array_equal(pair.masks[1], video.masks[pair.t - 1 + pair.k])
        seen_k.add(pair.k)
    assert seen_k == {2, 3, 4, 5}


@pytest.mark.parametrize("gap", [(0, 3), (4, 3), (1, 10)])
def test_infeasible_gap(gap):
    video = generate_dataset(n_videos=1, n_frames=10, image_size=8)[0]
    with pytest.raises(ConfigurationError):
        sample_pair(video, *gap, np.random.default_rng(0))


def test_identity_augmentation():
    video = generate_dataset(n_videos=1, n_frames=6, image_size=16)[0]
    pair = sample_pair(video, 1, 3, np.random.default_rng(1))
    out = augment_pair(pair, crop_scale=(1.0, 1.0), hflip_p=0.0, rng=np.random.default_rng(2), ratio=(1.0, 1.0))
    assert out.record == AugmentationRecord(crop=(0, 0, 16, 16), flip=False)
    assert np.array_equal(out.x_t, pair.x_t) and np.array_equal(out.x_tk, pair.x_tk)
    assert np.array_equal(out.masks[0], pair.masks[0])


def test_flip_is_shared_by_both_frames():
    video = generate_dataset(n_videos=1, n_frames=6, image_size=16)[0]
    pair = sample_pair(video, 1, 3, np.random.default_rng(1))
    out = augment_pair(pair, crop_scale=(1.0, 1.0), hflip_p=1.0, rng=np.random.default_rng(2), ratio=(1.0, 1.0))
    assert out.record.flip
    assert np.array_equal(out.x_t, pair.x_t[..., ::-1])
    assert np.array_equal(out.x_tk, pair.x_tk[..., ::-1])
    assert np.array_equal(out.masks[1], pair.masks[1][:, ::-1])


def test_crop_keeps_size_and_labels():
    video = generate_dataset(n_videos=1, n_frames=6, image_size=16)[0]
    record = AugmentationRecord(crop=(2, 3, 8, 10), flip=False)
    frame = apply_augmentation(video.frames[0], record)
    mask = apply_augmentation(video.masks[0], record, mode="nearest")
    assert frame.shape == (3, 16, 16) and frame.dtype == np.float32
    assert mask.shape == (16, 16) and mask.dtype == np.int64
    assert set(np.unique(mask)) <= set(np.unique(video.masks[0]))


def test_epoch_pairs(micro_videos):
    config = TrainConfig(k_min=1, k_max=4, repeated_sampling=2, seed=3)
    pairs = epoch_pairs(micro_videos, 0, config)
    assert len(pairs) == 2 * len(micro_videos)
    assert all(p.record is not None and 1 <= p.k <= 4 for p in pairs)
    again = epoch_pairs(micro_videos, 0, config)
    assert [(p.video_id, p.t, p.k) for p in pairs] == [(p.video_id, p.t, p.k) for p in again]
    later = epoch_pairs(micro_videos, 1, config)
    assert [(p.video_id, p.t, p.k) for p in pairs] != [(p.video_id, p.t, p.k) for p in later]


def test_dataset_directory_round_trip(tmp_path):
    videos = generate_dataset(n_videos=2, n_frames=4, image_size=16, seed=5)
    write_dataset(videos, tmp_path / "data")
    assert (tmp_path / "data" / "video_0001" / "masks" / "frame_000003.png").is_file()
    loaded = read_dataset(tmp_path / "data")
    assert [v.video_id for v in loaded] == ["video_0000", "video_0001"]
    for original, copy in zip(videos, loaded):
        assert np.array_equal(original.masks, copy.masks)
        assert np.max(np.abs(original.frames - copy.frames)) <= 0.5 / 255 + 1e-6


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "nowhere")
