"""
Video Data Module
=================

Synthetic moving-shape videos with ground-truth masks, temporal pair sampling with a
random frame gap k, and the light augmentation used for pre-training (one random resized
crop and one horizontal-flip decision shared by both frames of a pair).

Frames are float arrays ``(C, H, W)`` with values in [0, 1]; masks are integer grids
``(H, W)`` where 0 is the background and ``1..n_shapes`` are shape ids. Shapes move with a
constant velocity and wrap around the frame borders; later shapes occlude earlier ones.

On disk a dataset is a directory of videos::

    <root>/<video_id>/frame_000000.png ...
    <root>/<video_id>/masks/frame_000000.png ...

Frames are 8-bit RGB PNG files, masks 8-bit single-channel PNG files holding label ids.
"""

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from phinet_core.abstract import ConfigurationError
from phinet_core.log_utils import extract_number

SHAPE_KINDS = ("disk", "square", "triangle")
BACKGROUND_KINDS = ("flat", "textured")


@dataclass
class ShapeSpec:
    """One moving shape. `size` is the radius (disk) or half extent (square, triangle)
    in pixels; position and velocity are ``(x, y)`` in pixels and pixels/frame."""

    kind: str = "disk"
    size: float = 4.0
    position: tuple = (16.0, 16.0)
    velocity: tuple = (0.0, 0.0)
    color: tuple = (1.0, 0.0, 0.0)


@dataclass
class SyntheticVideoSpec:
    n_frames: int = 64
    image_size: int = 32
    shapes: tuple = ()
    background: str = "flat"
    background_color: tuple = (0.5, 0.5, 0.5)
    seed: int = 0
    video_id: str = "video_0000"

    @property
    def n_shapes(self):
        return len(self.shapes)

    def validate(self):
        if self.n_frames < 2:
            raise ConfigurationError(f"a video needs at least 2 frames, got {self.n_frames}")
        if self.image_size < 1:
            raise ConfigurationError("image_size must be positive")
        if self.background not in BACKGROUND_KINDS:
            raise ConfigurationError(f"unknown background {self.background!r}")
        for shape in self.shapes:
            if shape.kind not in SHAPE_KINDS:
                raise ConfigurationError(f"unknown shape kind {shape.kind!r}")
            if not shape.size > 0:
                raise ConfigurationError(f"degenerate shape of size {shape.size}")


@dataclass
class LabeledVideo:
    frames: np.ndarray
    masks: np.ndarray = None
    video_id: str = "video_0000"

    @property
    def n_frames(self):
        return len(self.frames)


@dataclass
class AugmentationRecord:
    """Crop box ``(top, left, height, width)`` in pixels and the flip decision."""

    crop: tuple
    flip: bool = False


@dataclass
class FramePair:
    x_t: np.ndarray
    x_tk: np.ndarray
    k: int
    video_id: str
    t: int
    record: AugmentationRecord = None
    masks: tuple = field(default=None, repr=False)


#################
# Generation
#################


def _toroidal_offset(coords, center, size):
    return (coords - center + size / 2.0) % size - size / 2.0


def render_shape(shape, center, image_size):
    """Boolean mask of `shape` centred at ``center = (x, y)`` on a torus."""
    rows, cols = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    dx = _toroidal_offset(cols, center[0], image_size)
    dy = _toroidal_offset(rows, center[1], image_size)
    if shape.kind == "disk":
        return dx**2 + dy**2 <= shape.size**2
    if shape.kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= shape.size
    # triangle, apex up
    return (np.abs(dy) <= shape.size) & (np.abs(dx) <= (dy + shape.size) / 2.0)


def _background(spec, rng):
    s = spec.image_size
    base = np.broadcast_to(np.asarray(spec.background_color, dtype=np.float64)[:, None, None], (3, s, s))
    if spec.background == "flat":
        return base.copy()
    coarse = rng.uniform(-1.0, 1.0, size=(3, max(2, s // 8), max(2, s // 8)))
    texture = F.interpolate(torch.from_numpy(coarse)[None], size=(s, s), mode="bilinear", align_corners=False)[0]
    return np.clip(base + 0.15 * texture.numpy(), 0.0, 1.0)


def generate_video(spec):
    """Render a synthetic video and its masks. Deterministic given the spec.

    Args:
        spec (SyntheticVideoSpec): the video description.

    Returns:
        LabeledVideo: frames ``(T, 3, S, S)`` float32 and masks ``(T, S, S)`` int64.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    background = _background(spec, rng)
    frames = np.empty((spec.n_frames, 3, s, s), dtype=np.float32)
    masks = np.zeros((spec.n_frames, s, s), dtype=np.int64)
    for t in range(spec.n_frames):
        frame = background.copy()
        mask = masks[t]
        for label, shape in enumerate(spec.shapes, start=1):
            center = (
                (shape.position[0] + shape.velocity[0] * t) % s,
                (shape.position[1] + shape.velocity[1] * t) % s,
            )
            inside = render_shape(shape, center, s)
            frame[:, inside] = np.asarray(shape.color, dtype=np.float64)[:, None]
            mask[inside] = label
        frames[t] = frame
    return LabeledVideo(frames=frames, masks=masks, video_id=spec.video_id)


def random_video_spec(seed, index=0, n_frames=64, image_size=32, n_shapes=2, max_speed=3, static=False):
    """Draw a random video description from ``(seed, index)``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    shapes = []
    for _ in range(n_shapes):
        velocity = (0.0, 0.0) if static else tuple(float(v) for v in rng.integers(-max_speed, max_speed + 1, size=2))
        shapes.append(
            ShapeSpec(
                kind=str(rng.choice(SHAPE_KINDS)),
                size=max(1.0, float(rng.uniform(0.1, 0.2) * image_size)),
                position=tuple(float(v) for v in rng.uniform(0, image_size, size=2)),
                velocity=velocity,
                color=tuple(float(v) for v in rng.uniform(0.0, 1.0, size=3)),
            )
        )
    return SyntheticVideoSpec(
        n_frames=n_frames,
        image_size=image_size,
        shapes=tuple(shapes),
        background=str(rng.choice(BACKGROUND_KINDS)),
        background_color=tuple(float(v) for v in rng.uniform(0.2, 0.8, size=3)),
        seed=int(rng.integers(0, 2**31 - 1)),
        video_id=f"video_{index:04d}",
    )


def generate_dataset(n_videos=16, n_frames=64, image_size=32, seed=0, n_shapes=2, static=False):
    """Generate `n_videos` random labeled videos. The default arguments are the standard
    desk dataset."""
    if n_videos < 1:
        raise ConfigurationError("a dataset needs at least one video")
    return [
        generate_video(random_video_spec(seed, i, n_frames, image_size, n_shapes, static=static))
        for i in range(n_videos)
    ]


def static_dataset(n_videos=4, n_frames=16, image_size=32, seed=0):
    """Videos whose shapes do not move (propagation sanity checks)."""
    return generate_dataset(n_videos, n_frames, image_size, seed, static=True)


#################
# Pair sampling
#################


def sample_pair(video, k_min, k_max, rng):
    """Sample a frame pair ``(x_t, x_{t+k})`` with ``k ~ U{k_min..k_max}`` and
    ``t ~ U{1..T-k}`` (1-based).

    Args:
        video (LabeledVideo): the source video.
        k_min (int): smallest gap, >= 1.
        k_max (int): largest gap, <= T - 1.
        rng (numpy.random.Generator): source of randomness.

    Returns:
        FramePair: the pair, without augmentation record; masks are attached when the
        video has them.
    """
    n_frames = video.n_frames
    if k_min < 1 or k_min > k_max or k_max > n_frames - 1:
        raise ConfigurationError(f"frame gap [{k_min}, {k_max}] is infeasible for {n_frames} frames")
    k = int(rng.integers(k_min, k_max + 1))
    t = int(rng.integers(1, n_frames - k + 1))
    masks = None
    if video.masks is not None:
        masks = (video.masks[t - 1], video.masks[t - 1 + k])
    return FramePair(x_t=video.frames[t - 1], x_tk=video.frames[t - 1 + k], k=k, video_id=video.video_id, t=t, masks=masks)


def sample_crop(image_size, scale, rng, ratio=(3.0 / 4.0, 4.0 / 3.0), attempts=10):
    """Random resized crop box with area fraction in `scale` and aspect ratio in `ratio`.

    Falls back to the whole frame when no box fits within `attempts`.
    """
    area = float(image_size * image_size)
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_ratio[0], log_ratio[1]))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= image_size and 0 < h <= image_size:
            top = int(rng.integers(0, image_size - h + 1))
            left = int(rng.integers(0, image_size - w + 1))
            return (top, left, h, w)
    return (0, 0, image_size, image_size)


def apply_augmentation(array, record, mode="bilinear"):
    """Apply a crop box and flip decision to a frame ``(C, H, W)`` or mask ``(H, W)``.

    Frames are resized bilinearly, masks with nearest neighbours so labels stay integral.
    """
    size = array.shape[-1]
    top, left, h, w = record.crop
    out = array[..., top : top + h, left : left + w]
    if (h, w) != (size, size):
        is_mask = out.ndim == 2
        x = torch.from_numpy(np.ascontiguousarray(out, dtype=np.float64))
        x = x[None, None] if is_mask else x[None]
        if mode == "nearest":
            x = F.interpolate(x, size=(size, size), mode="nearest")
        else:
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        x = x[0, 0] if is_mask else x[0]
        out = x.numpy().astype(array.dtype)
    if record.flip:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


def augment_pair(pair, crop_scale=(0.5, 1.0), hflip_p=0.5, rng=None, ratio=(3.0 / 4.0, 4.0 / 3.0)):
    """Apply one random resized crop and one flip decision identically to both frames.

    Returns:
        FramePair: a new pair with the augmentation record filled in.
    """
    rng = rng if rng is not None else np.random.default_rng()
    size = pair.x_t.shape[-1]
    record = AugmentationRecord(crop=sample_crop(size, crop_scale, rng, ratio), flip=bool(rng.random() < hflip_p))
    masks = pair.masks
    if masks is not None:
        masks = tuple(apply_augmentation(m, record, mode="nearest") for m in masks)
    return dataclasses.replace(
        pair,
        x_t=apply_augmentation(pair.x_t, record),
        x_tk=apply_augmentation(pair.x_tk, record),
        record=record,
        masks=masks,
    )


def pair_rng(seed, epoch, video_index, draw):
    """Random generator for one pair draw, independent of any other draw."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, video_index, draw]))


def epoch_pairs(videos, epoch, config):
    """All training pairs of an epoch, shuffled: `repeated_sampling` pairs per video.

    Args:
        videos (list[LabeledVideo]): the training videos.
        epoch (int): epoch index, part of every pair seed.
        config (TrainConfig): gap range, augmentation and seed.

    Returns:
        list[FramePair]: ``repeated_sampling * len(videos)`` pairs.
    """
    pairs = []
    for draw in range(config.repeated_sampling):
        for index, video in enumerate(videos):
            rng = pair_rng(config.seed, epoch, index, draw)
            pair = sample_pair(video, config.k_min, config.k_max, rng)
            pairs.append(
                augment_pair(pair, (config.crop_scale_min, config.crop_scale_max), config.hflip_p, rng)
            )
    order = np.random.default_rng(np.random.SeedSequence([config.seed, epoch])).permutation(len(pairs))
    return [pairs[i] for i in order]


#################
# Directory I/O
#################


def _frame_to_uint8(frame):
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_video(video, root):
    """Write one video (and its masks, if any) under ``<root>/<video_id>/``."""
    folder = Path(root) / video.video_id
    folder.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(video.frames):
        Image.fromarray(_frame_to_uint8(frame), mode="RGB").save(folder / f"frame_{t:06d}.png")
    if video.masks is not None:
        write_masks(video.masks, folder / "masks")
    return folder


def write_masks(masks, folder):
    """Write integer label grids as 8-bit PNG files ``frame_%06d.png``."""
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    for t, mask in enumerate(masks):
        Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(folder / f"frame_{t:06d}.png")
    return folder


def read_masks(folder):
    files = sorted(Path(folder).glob("frame_*.png"), key=extract_number)
    return np.stack([np.asarray(Image.open(f), dtype=np.int64) for f in files]) if files else None


def read_video(folder):
    """Read one video directory; masks are None when ``masks/`` is absent."""
    folder = Path(folder)
    files = sorted(folder.glob("frame_*.png"), key=extract_number)
    if not files:
        raise FileNotFoundError(f"no frame_*.png files in {folder}")
    frames = np.stack([np.asarray(Image.open(f).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0 for f in files])
    masks = read_masks(folder / "masks") if (folder / "masks").is_dir() else None
    return LabeledVideo(frames=frames.astype(np.float32), masks=masks, video_id=folder.name)


def write_dataset(videos, root):
    for video in videos:
        write_video(video, root)
    return Path(root)


def read_dataset(root):
    """Read every video directory under `root`, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    videos = [read_video(p) for p in sorted(root.iterdir()) if p.is_dir()]
    if not videos:
        raise FileNotFoundError(f"no videos under {root}")
    return videos
