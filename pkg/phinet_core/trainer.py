"""
Trainer Module
==============

The optimisation loop of PhiNet v2. Each epoch draws ``repeated_sampling`` frame pairs
per video, shuffles them and walks through them in batches; every step runs the
(symmetric) objective, one AdamW update with a warmup-cosine learning rate and, at
``per_step`` cadence, an EMA update of the slow encoder. At ``per_epoch`` cadence the
EMA update happens once at the end of each epoch.

A run directory holds::

    config.resolved              the fully resolved configuration
    metrics.csv                  one row per step
    logs.log                     JSON-lines log (when configured by the caller)
    checkpoints/epoch_0001.ckpt  one checkpoint every `checkpoint_every` epochs

A run started on a directory that already holds checkpoints resumes from the last one.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from phinet_core.abstract import AbstractComponent, CheckpointError, ConfigurationError, NumericalError
from phinet_core.backbone import compute_pixel_stats
from phinet_core.checkpoint import (
    Checkpoint,
    load_module_arrays,
    load_optimizer_arrays,
    module_arrays,
    optimizer_arrays,
    read_container,
    write_container,
)
from phinet_core.config import EmaCadence, ModelConfig, TrainConfig, dump_config, load_config
from phinet_core.log_utils import extract_number
from phinet_core.objective import build_model, phinet_loss_symmetric
from phinet_core.slow_learner import EmaState, ema_update, init_long, parameters_digest
from phinet_core.videodata import epoch_pairs

METRICS_COLUMNS = ("step", "epoch", "lr", "total", "sim2", "sim1_kl", "sigma2", "grad_norm", "feature_std")
NO_DECAY_NAMES = ("cls_token", "pos_embed", "queries")


@dataclass
class TrainState:
    """Everything a training run mutates.

    Attributes:
        model (PhiNet): trainable parameters.
        ema (EmaState): the slow encoder.
        optimizer (torch.optim.AdamW): optimizer over all trainable parameters.
        generator (torch.Generator): randomness of the noise and latent samples.
        step (int): optimisation steps taken.
        epoch (int): completed epochs.
    """

    model: torch.nn.Module
    ema: EmaState
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    epoch: int = 0


def steps_per_epoch(n_videos, config):
    return max(1, math.ceil(n_videos * config.repeated_sampling / config.batch_size))


def lr_schedule(step, config, n_steps_per_epoch=1):
    """Linear warmup from 0 to ``config.lr`` then cosine decay to 0.

    Args:
        step (int): optimisation step, >= 0.
        config (TrainConfig): provides lr, warmup_epochs and total_epochs.
        n_steps_per_epoch (int): steps in one epoch.

    Returns:
        float: the learning rate of `step`.
    """
    if step < 0:
        raise ConfigurationError(f"step must be >= 0, got {step}")
    warmup = config.warmup_epochs * n_steps_per_epoch
    total = config.total_epochs * n_steps_per_epoch
    if step < warmup:
        return config.lr * step / warmup
    if step >= total:
        return 0.0
    progress = (step - warmup) / (total - warmup)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def parameter_groups(model, weight_decay):
    """Split parameters into a decayed and a non-decayed group.

    Norm gains, biases, layer scales, the [CLS] token, positional embeddings and the
    decoder queries are not decayed.

    Returns:
        tuple: the two param groups and the sorted list of excluded names.
    """
    decay, no_decay, excluded = [], [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or name.split(".")[-1] in NO_DECAY_NAMES:
            no_decay.append(p)
            excluded.append(name)
        else:
            decay.append(p)
    groups = [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return groups, sorted(excluded)


def build_optimizer(model, config):
    groups, excluded = parameter_groups(model, config.weight_decay)
    optimizer = torch.optim.AdamW(groups, lr=config.lr, betas=(config.adam_beta1, config.adam_beta2))
    return optimizer, excluded


def init_state(model_cfg, config, videos=None):
    """Fresh TrainState: parameters from `config.seed`, pixel statistics from `videos`."""
    torch.manual_seed(config.seed)
    dtype = torch.float64 if config.float64 else torch.float32
    model = build_model(model_cfg, config.flags, dtype)
    if videos:
        mean, std = compute_pixel_stats(np.concatenate([v.frames for v in videos]))
        model.encoder.set_pixel_stats(mean, std)
    optimizer, _ = build_optimizer(model, config)
    generator = torch.Generator().manual_seed(config.seed)
    return TrainState(model=model, ema=init_long(model.encoder, config.gamma), optimizer=optimizer, generator=generator)


def batch_tensors(pairs, encoder):
    """Stack a list of FramePair into two normalized frame batches."""
    dtype = encoder.pixel_mean.dtype
    x_t = torch.from_numpy(np.stack([p.x_t for p in pairs])).to(dtype)
    x_tk = torch.from_numpy(np.stack([p.x_tk for p in pairs])).to(dtype)
    return encoder.normalize(x_t), encoder.normalize(x_tk)


def feature_std(features):
    """Mean over dimensions of the standard deviation of patch features ``(..., d)``."""
    flat = features.reshape(-1, features.shape[-1])
    return float(flat.std(dim=0, unbiased=False).mean())


def train_step(state, pairs, config, lr=None, stop=None):
    """One AdamW update on the mean loss of `pairs`.

    With ``config.micro_batch_size`` the batch is processed in chunks whose gradients
    are accumulated with weights ``len(chunk) / len(pairs)``.

    Args:
        state (TrainState): mutated in place.
        pairs (list[FramePair]): the batch.
        config (TrainConfig): training configuration.
        lr (float): learning rate of this step (``config.lr`` if None).
        stop (GradientStop): optional named stop-gradient.

    Returns:
        tuple: (state, LossBreakdown of the last chunk, dict of step metrics)

    Raises:
        NumericalError: if the loss is not finite; the error carries the breakdown.
    """
    if not pairs:
        raise ConfigurationError("empty batch")
    lr = config.lr if lr is None else lr
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    model = state.model
    chunk = config.micro_batch_size or len(pairs)
    state.optimizer.zero_grad(set_to_none=True)
    totals = {"total": 0.0, "sim2": 0.0, "sim1_kl": 0.0}
    features = []
    breakdown = None
    for start in range(0, len(pairs), chunk):
        part = pairs[start : start + chunk]
        x_t, x_tk = batch_tensors(part, model.encoder)
        breakdown = phinet_loss_symmetric(model, state.ema.encoder, x_t, x_tk, config, state.generator, stop)
        if not breakdown.is_finite():
            raise NumericalError("non-finite loss", where="objective", breakdown=breakdown)
        weight = len(part) / len(pairs)
        (breakdown.total * weight).backward()
        for key, value in breakdown.as_metrics().items():
            if key in totals:
                totals[key] += value * weight
        features.append(breakdown.features)

    grads = [p.grad.detach().flatten() for p in model.parameters() if p.grad is not None]
    grad_norm = float(torch.cat(grads).norm()) if grads else 0.0
    if config.clip_grad_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_grad_norm)
    state.optimizer.step()
    if config.ema_cadence == EmaCadence.PER_STEP:
        ema_update(state.ema, model.encoder)
    state.step += 1

    metrics = {
        "step": state.step,
        "epoch": state.epoch,
        "lr": lr,
        **totals,
        "sigma2": breakdown.sigma2,
        "grad_norm": grad_norm,
        "feature_std": feature_std(torch.cat(features, dim=0)),
    }
    return state, breakdown, metrics


#################
# Checkpoints
#################


def state_to_checkpoint(state, model_cfg, config):
    arrays = module_arrays("model/", state.model)
    arrays.update(module_arrays("ema/", state.ema.encoder))
    optim_arrays, groups = optimizer_arrays("optimizer/", state.optimizer)
    arrays.update(optim_arrays)
    arrays["rng/torch"] = state.generator.get_state().numpy()
    metadata = {
        "epoch": state.epoch,
        "step": state.step,
        "ema_update_count": state.ema.update_count,
        "ema_gamma": state.ema.gamma,
        "param_groups": groups,
        "config": dump_config(model_cfg, config),
    }
    return Checkpoint(arrays=arrays, metadata=metadata)


def save_checkpoint(path, state, model_cfg, config):
    ckpt = state_to_checkpoint(state, model_cfg, config)
    return write_container(path, ckpt.arrays, ckpt.metadata)


def configs_from_checkpoint(ckpt):
    """The (ModelConfig, TrainConfig) snapshot stored in a checkpoint."""
    if "config" not in ckpt.metadata:
        raise CheckpointError("checkpoint has no configuration snapshot")
    model_cfg, config, _ = load_config(ckpt.metadata["config"], ModelConfig(), TrainConfig())
    return model_cfg, config


def state_from_checkpoint(ckpt, model_cfg=None, config=None):
    """Rebuild a TrainState from a checkpoint, using its own config snapshot by default."""
    stored_model_cfg, stored_config = configs_from_checkpoint(ckpt)
    model_cfg = model_cfg or stored_model_cfg
    config = config or stored_config
    state = init_state(model_cfg, config)
    load_module_arrays(state.model, ckpt.subset("model/"))
    load_module_arrays(state.ema.encoder, ckpt.subset("ema/"))
    load_optimizer_arrays(state.optimizer, ckpt.subset("optimizer/"), ckpt.metadata["param_groups"])
    state.generator.set_state(torch.from_numpy(ckpt.arrays["rng/torch"].copy()))
    state.ema.update_count = int(ckpt.metadata.get("ema_update_count", 0))
    state.ema.gamma = float(ckpt.metadata.get("ema_gamma", config.gamma))
    state.step = ckpt.step
    state.epoch = ckpt.epoch
    return state, model_cfg, config


def load_checkpoint(path):
    """Read a checkpoint file and rebuild its TrainState.

    Returns:
        tuple: (TrainState, ModelConfig, TrainConfig)
    """
    return state_from_checkpoint(read_container(path))


def list_checkpoints(run_dir):
    folder = Path(run_dir) / "checkpoints"
    return sorted(folder.glob("epoch_*.ckpt"), key=extract_number) if folder.is_dir() else []


#################
# Training loop
#################


class Trainer(AbstractComponent):
    """Runs (or resumes) a training run in a run directory."""

    @staticmethod
    def name():
        return "Trainer"

    @staticmethod
    def description():
        return "Pre-trains PhiNet v2 on a list of labeled videos."

    def __init__(self, model_cfg, config, run_dir=None, resume=True, **kwargs):
        super().__init__(**kwargs)
        self.model_cfg = model_cfg
        self.config = config
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.resume = resume
        self.state = None

    @property
    def metrics_path(self):
        return self.run_dir / "metrics.csv"

    def checkpoint_path(self, epoch):
        return self.run_dir / "checkpoints" / f"epoch_{epoch:04d}.ckpt"

    def _prepare_run_dir(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.resolved").write_text(dump_config(self.model_cfg, self.config), encoding="utf-8")

    def _start_state(self, videos):
        existing = list_checkpoints(self.run_dir) if (self.run_dir and self.resume) else []
        if existing:
            state, _, _ = state_from_checkpoint(read_container(existing[-1]), self.model_cfg, self.config)
            self.terminal_logger.info("resume", checkpoint=str(existing[-1]), epoch=state.epoch, step=state.step)
            self.file_logger.info("resume", checkpoint=str(existing[-1]), epoch=state.epoch, step=state.step)
            return state
        return init_state(self.model_cfg, self.config, videos)

    def _open_metrics(self, step):
        """Open the metrics CSV for appending, dropping rows past `step` on resume."""
        rows = []
        if step > 0 and self.metrics_path.is_file():
            with open(self.metrics_path, encoding="utf-8", newline="") as f:
                rows = [r for r in csv.DictReader(f) if int(r["step"]) <= step]
        f = open(self.metrics_path, "w", encoding="utf-8", newline="")
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
        return f, writer

    def save(self, state):
        path = save_checkpoint(self.checkpoint_path(state.epoch), state, self.model_cfg, self.config)
        self.terminal_logger.info("checkpoint_saved", path=str(path), epoch=state.epoch, step=state.step)
        self.file_logger.info("checkpoint_saved", path=str(path), epoch=state.epoch, step=state.step)
        return path

    def train(self, videos):
        """Train on `videos` until ``config.total_epochs``.

        Returns:
            TrainState: the final state (also saved in the run directory, if any).
        """
        if not videos:
            raise ConfigurationError("the training dataset is empty")
        config = self.config
        if self.run_dir is not None:
            self._prepare_run_dir()
        state = self._start_state(videos)
        self.state = state
        _, excluded = parameter_groups(state.model, config.weight_decay)
        self.file_logger.info("weight_decay_exclusions", names=excluded)
        self.terminal_logger.info("weight_decay_exclusions", count=len(excluded))

        metrics_file, writer = self._open_metrics(state.step) if self.run_dir is not None else (None, None)
        try:
            if config.total_epochs == 0:
                if self.run_dir is not None:
                    self.save(state)
                return state
            n_steps = steps_per_epoch(len(videos), config)
            for epoch in range(state.epoch, config.total_epochs):
                pairs = epoch_pairs(videos, epoch, config)
                for b in range(n_steps):
                    batch = pairs[b * config.batch_size : (b + 1) * config.batch_size]
                    if not batch:
                        break
                    watch = config.ema_cadence == EmaCadence.PER_EPOCH
                    before = parameters_digest(state.ema.encoder) if watch else None
                    _, _, metrics = train_step(state, batch, config, lr_schedule(state.step, config, n_steps))
                    if watch and parameters_digest(state.ema.encoder) != before:
                        raise RuntimeError("the slow encoder changed during an optimizer step")
                    if writer is not None:
                        writer.writerow(metrics)
                    self.terminal_logger.info("train_step", cl="trace", **metrics)
                    self.file_logger.info("train_step", **metrics)
                state.epoch = epoch + 1
                if config.ema_cadence == EmaCadence.PER_EPOCH:
                    ema_update(state.ema, state.model.encoder)
                    self.file_logger.info(
                        "ema_update", cadence="per_epoch", update_count=state.ema.update_count, gamma=state.ema.gamma
                    )
                if metrics_file is not None:
                    metrics_file.flush()
                last = state.epoch == config.total_epochs
                if self.run_dir is not None and (state.epoch % config.checkpoint_every == 0 or last):
                    self.save(state)
        finally:
            if metrics_file is not None:
                metrics_file.close()
        return state


def train(model_cfg, config, videos, run_dir=None, resume=True):
    """Train PhiNet v2 and return the final TrainState."""
    return Trainer(model_cfg, config, run_dir=run_dir, resume=resume).train(videos)
