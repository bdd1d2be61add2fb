"""
Propagate Module
================

Semi-supervised label propagation over learned patch features and the region (J) and
boundary (F) scores used to judge it, plus the representation-collapse diagnostics.

The label map of the first frame is given. Every later frame is labelled patch by patch
from a context made of the first frame (always kept) and the most recent frames with
their predicted soft labels: the `top_k` most similar context patches within a square
window of `radius` patches vote with softmax weights (temperature `temperature`). The
queue starts empty, so frame 1 is labelled from frame 0 alone.

Masks are scored at patch resolution unless ``upsample`` is set, in which case soft
labels are resized bilinearly to the frame size before the argmax.
"""

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import distance_transform_edt

from phinet_core.abstract import AbstractComponent, ConfigurationError, ProtocolError
from phinet_core.config import PropagationParams
from phinet_core.videodata import write_masks


@torch.no_grad()
def extract_features(encoder, frames):
    """Encode raw frames and return L2-normalized patch feature grids.

    Args:
        encoder (Encoder): the online or the slow encoder.
        frames (numpy.ndarray or torch.Tensor): ``(C, H, W)`` or ``(T, C, H, W)`` in [0, 1].

    Returns:
        torch.Tensor: ``(h_p, w_p, d)`` or ``(T, h_p, w_p, d)``; the [CLS] token is dropped.
    """
    x = torch.as_tensor(np.asarray(frames)).to(encoder.pixel_mean.dtype)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    tokens = encoder(encoder.normalize(x))[:, 1:]
    n = tokens.shape[1]
    side = int(round(n**0.5))
    if side * side != n:
        raise ConfigurationError(f"{n} patch tokens do not form a square grid")
    grids = F.normalize(tokens.reshape(x.shape[0], side, side, -1), dim=-1)
    return grids[0] if single else grids


def downsample_mask(mask, grid_size):
    """Majority label of every patch of a ``(H, W)`` label grid; ties go to the lower label."""
    mask = np.asarray(mask)
    size = mask.shape[0]
    if mask.shape != (size, size) or size % grid_size != 0:
        raise ConfigurationError(f"mask of shape {mask.shape} cannot be cut into a {grid_size}x{grid_size} grid")
    p = size // grid_size
    blocks = mask.reshape(grid_size, p, grid_size, p).transpose(0, 2, 1, 3).reshape(grid_size, grid_size, -1)
    n_labels = int(mask.max()) + 1
    out = np.empty((grid_size, grid_size), dtype=np.int64)
    for i in range(grid_size):
        for j in range(grid_size):
            out[i, j] = np.bincount(blocks[i, j], minlength=n_labels).argmax()
    return out


def _window_mask(h, w, radius):
    """``(h*w, h*w)`` boolean matrix, True where two positions are within `radius`."""
    rows, cols = np.divmod(np.arange(h * w), w)
    near = (np.abs(rows[:, None] - rows[None, :]) <= radius) & (np.abs(cols[:, None] - cols[None, :]) <= radius)
    return torch.from_numpy(near)


def propagate_labels(grids, ref_labels, params=None, n_labels=None):
    """Propagate the label map of frame 0 to every other frame.

    Args:
        grids (torch.Tensor or list): ``T`` feature grids ``(h, w, d)``, unit-norm.
        ref_labels (numpy.ndarray): ``(h, w)`` integer labels of frame 0.
        params (PropagationParams): top_k, radius, queue and temperature.
        n_labels (int): number of labels (defaults to ``max(ref_labels) + 1``).

    Returns:
        torch.Tensor: soft label maps ``(T, h, w, n_labels)``; rows sum to 1.
    """
    params = params or PropagationParams()
    grids = torch.stack(list(grids)) if not torch.is_tensor(grids) else grids
    n_frames, h, w, d = grids.shape
    ref = torch.as_tensor(np.asarray(ref_labels), dtype=torch.long)
    if tuple(ref.shape) != (h, w):
        raise ConfigurationError(f"reference labels {tuple(ref.shape)} do not match the grid {(h, w)}")
    n_labels = n_labels or int(ref.max()) + 1
    soft_ref = F.one_hot(ref.reshape(-1), n_labels).to(grids.dtype)
    window = _window_mask(h, w, params.radius)

    pinned = (grids[0].reshape(-1, d), soft_ref)
    queue = deque(maxlen=params.queue)
    outputs = [soft_ref.reshape(h, w, n_labels)]
    for t in range(1, n_frames):
        context = [pinned] + list(queue)
        if not context:
            raise ProtocolError("empty propagation context")
        keys = torch.stack([c[0] for c in context])  # (N, hw, d)
        values = torch.cat([c[1] for c in context])  # (N * hw, L)
        query = grids[t].reshape(-1, d)
        affinity = torch.einsum("qd,nkd->qnk", query, keys)
        affinity = affinity.masked_fill(~window[:, None, :], float("-inf")).reshape(h * w, -1)
        k = min(params.top_k, len(context) * int(window.sum(dim=1).min()))
        top_values, top_index = affinity.topk(k, dim=1)
        weights = torch.softmax(top_values / params.temperature, dim=1)
        soft = (weights[..., None] * values[top_index]).sum(dim=1)
        outputs.append(soft.reshape(h, w, n_labels))
        queue.append((query, soft))
    return torch.stack(outputs)


def upsample_soft_labels(soft, size):
    """Bilinear resize of soft label maps ``(T, h, w, L)`` to ``(T, size, size, L)``."""
    x = soft.permute(0, 3, 1, 2)
    x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x.permute(0, 2, 3, 1)


def hard_labels(soft):
    return soft.argmax(dim=-1).cpu().numpy()


#################
# Scores
#################


def jaccard(pred_mask, gt_mask, label):
    """Region similarity ``|pred ∩ gt| / |pred ∪ gt|`` of one label; 1 when both are empty."""
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ConfigurationError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    pred, gt = pred_mask == label, gt_mask == label
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary(region):
    """Pixels of `region` with at least one 4-neighbour outside it. The image border is
    not a transition."""
    padded = np.pad(region, 1, mode="edge")
    inner = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return region & ~inner


def boundary_f(pred_mask, gt_mask, label, tol=1):
    """Boundary F-measure of one label with matching tolerance `tol` (Euclidean pixels).

    Returns:
        float: ``2PR / (P + R)``; 1 when both boundaries are empty, 0 when only one is.
    """
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ConfigurationError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    pred_b = boundary(pred_mask == label)
    gt_b = boundary(gt_mask == label)
    if not pred_b.any() and not gt_b.any():
        return 1.0
    if not pred_b.any() or not gt_b.any():
        return 0.0
    to_gt = distance_transform_edt(~gt_b)
    to_pred = distance_transform_edt(~pred_b)
    precision = float((to_gt[pred_b] <= tol).mean())
    recall = float((to_pred[gt_b] <= tol).mean())
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def collapse_metrics(features):
    """Per-dimension standard deviation and effective rank of a feature batch.

    Args:
        features (array-like): ``(..., d)``; every leading index is one sample.

    Returns:
        tuple: (numpy.ndarray of shape ``(d,)``, float effective rank). The effective
        rank is ``exp`` of the entropy of the normalized singular values; it is 0 for an
        all-zero batch.
    """
    x = torch.as_tensor(np.asarray(features) if not torch.is_tensor(features) else features)
    x = x.detach().to(torch.float64).reshape(-1, x.shape[-1])
    if x.shape[0] < 2:
        raise ProtocolError("collapse metrics need at least two samples")
    std = x.std(dim=0, unbiased=False).numpy()
    s = torch.linalg.svdvals(x)
    total = s.sum()
    if total <= 0:
        return std, 0.0
    p = s / total
    p = p[p > 0]
    return std, float(torch.exp(-(p * p.log()).sum()))


#################
# Evaluation
#################


@dataclass
class SequenceScore:
    sequence: str
    j_mean: float
    f_mean: float
    predictions: np.ndarray = field(default=None, repr=False)
    feature_std: float = float("nan")
    effective_rank: float = float("nan")

    @property
    def jf_mean(self):
        return (self.j_mean + self.f_mean) / 2.0


def evaluate_sequence(encoder, video, params=None, tol=1):
    """Propagate the first mask of `video` and score every later frame.

    J and F are averaged over frames and over the object labels of the first mask at
    full resolution; a label too small to survive at patch resolution counts as empty
    in both prediction and target.

    Returns:
        SequenceScore: scores and hard predictions ``(T, h, w)`` (or full resolution
        with ``params.upsample``).
    """
    params = params or PropagationParams()
    if video.masks is None:
        raise ProtocolError(f"video {video.video_id} has no masks")
    grids = extract_features(encoder, video.frames)
    grid_size = grids.shape[1]
    ref = downsample_mask(video.masks[0], grid_size)
    n_labels = int(video.masks.max()) + 1
    soft = propagate_labels(grids, ref, params, n_labels=n_labels)
    if params.upsample:
        predictions = hard_labels(upsample_soft_labels(soft, video.masks.shape[-1]))
        targets = np.asarray(video.masks)
    else:
        predictions = hard_labels(soft)
        targets = np.stack([downsample_mask(m, grid_size) for m in video.masks])
    labels = [label for label in np.unique(video.masks[0]) if label != 0]
    if not labels:
        raise ProtocolError(f"video {video.video_id} has no object in its first mask")
    j_scores, f_scores = [], []
    for t in range(1, len(predictions)):
        for label in labels:
            j_scores.append(jaccard(predictions[t], targets[t], label))
            f_scores.append(boundary_f(predictions[t], targets[t], label, tol))
    std, rank = collapse_metrics(grids)
    return SequenceScore(
        video.video_id,
        float(np.mean(j_scores)),
        float(np.mean(f_scores)),
        predictions,
        feature_std=float(std.mean()),
        effective_rank=rank,
    )


def write_score_table(scores, path):
    """CSV with one row per sequence and a final ``mean`` row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sequence", "J_m", "F_m", "J&F_m", "feature_std", "effective_rank"])
        for s in scores:
            writer.writerow([s.sequence, *(f"{v:.6f}" for v in (s.j_mean, s.f_mean, s.jf_mean, s.feature_std, s.effective_rank))])
        mean = mean_scores(scores) + mean_collapse(scores)
        writer.writerow(["mean", *(f"{v:.6f}" for v in mean)])
    return path


def mean_scores(scores):
    """``(J_m, F_m, J&F_m)`` averaged over sequences."""
    j = float(np.mean([s.j_mean for s in scores]))
    f = float(np.mean([s.f_mean for s in scores]))
    return j, f, (j + f) / 2.0


def mean_collapse(scores):
    """``(feature_std, effective_rank)`` averaged over sequences."""
    return (
        float(np.mean([s.feature_std for s in scores])),
        float(np.mean([s.effective_rank for s in scores])),
    )


class Evaluator(AbstractComponent):
    """Scores an encoder on a list of labeled videos and optionally writes its masks."""

    @staticmethod
    def name():
        return "Evaluator"

    @staticmethod
    def description():
        return "Label propagation with region and boundary scores."

    def __init__(self, encoder, params=None, out_dir=None, **kwargs):
        super().__init__(**kwargs)
        self.encoder = encoder
        self.params = params or PropagationParams()
        self.out_dir = Path(out_dir) if out_dir is not None else None

    def evaluate(self, videos):
        self.file_logger.info(
            "propagation_params",
            top_k=self.params.top_k,
            radius=self.params.radius,
            queue=self.params.queue,
            temperature=self.params.temperature,
        )
        self.encoder.eval()
        scores = []
        for video in videos:
            score = evaluate_sequence(self.encoder, video, self.params)
            scores.append(score)
            fields = dict(
                sequence=score.sequence,
                J_m=score.j_mean,
                F_m=score.f_mean,
                feature_std=score.feature_std,
                effective_rank=score.effective_rank,
            )
            self.terminal_logger.info("propagation_sequence", **fields)
            self.file_logger.info("propagation_sequence", **fields)
            if self.out_dir is not None:
                write_masks(score.predictions, self.out_dir / "masks" / score.sequence)
        if self.out_dir is not None:
            write_score_table(scores, self.out_dir / "scores.csv")
        return scores


def evaluate_dataset(encoder, videos, params=None, out_dir=None):
    """Evaluate every video; returns the list of SequenceScore."""
    return Evaluator(encoder, params, out_dir).evaluate(videos)
