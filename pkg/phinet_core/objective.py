"""
Objective Module
================

The training loss of PhiNet v2 for a batch of frame pairs. For one direction
(``x_src -> x_tgt``) the loss of a pair is

    sim2 + sim1 = 1 / (2 sigma^2) * ||f_long(x_tgt) - Y||^2_F'  +  KL(q || p)

where ``||.||_F'`` skips the [CLS] token, ``sigma^2 = d (n_p - 1) beta / (2 m)``,
``Y = g(h(f(x_src)), r)`` with ``r ~ q`` sampled straight-through, ``q`` the posterior
from the [CLS] tokens of ``h(f(x_src))`` and ``f(x_tgt + eps)``, and ``p`` the prior from
the [CLS] token of ``h(f(x_src))`` alone. The KL gradient is balanced between prior and
posterior. The symmetric loss adds the reverse direction.

Every stop-gradient of the objective goes through a named stop (`GradientStop`). The
`FrozenGradientStop` variant records the stopped values once and replays them, which
turns the loss into a surrogate whose ordinary derivative equals the gradient that
autograd computes. This is what the finite-difference suite checks.

Batch reduction is the arithmetic mean of per-pair totals.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from phinet_core.abstract import ConfigurationError, NumericalError
from phinet_core.backbone import Encoder, perturb
from phinet_core.config import GKind
from phinet_core.hippocampus import (
    CA3,
    LatentHead,
    build_decoder,
    ca1_decode,
    posterior_logits,
    prior_logits,
    sample_straight_through,
)


class GradientStop:
    """Named stop-gradient: returns ``tensor.detach()``."""

    def __init__(self, prefix=""):
        self.prefix = prefix

    def child(self, name):
        return type(self)(prefix=f"{self.prefix}{name}/")

    def __call__(self, key, tensor):
        return tensor.detach()


class FrozenGradientStop(GradientStop):
    """A stop-gradient that records the stopped values on the first pass and replays
    them afterwards.

    Children share the recording of their parent.
    """

    def __init__(self, prefix="", record=None):
        super().__init__(prefix)
        self.record = {} if record is None else record
        self.replaying = False

    def child(self, name):
        stop = FrozenGradientStop(prefix=f"{self.prefix}{name}/", record=self.record)
        stop._root = getattr(self, "_root", self)
        return stop

    def replay(self):
        self.replaying = True
        return self

    def __call__(self, key, tensor):
        root = getattr(self, "_root", self)
        key = self.prefix + key
        if root.replaying:
            if key not in self.record:
                raise KeyError(f"no recorded value for stop-gradient {key!r}")
            return self.record[key]
        self.record[key] = tensor.detach().clone()
        return self.record[key]


class PhiNet(nn.Module):
    """All trainable parameters of PhiNet v2: encoder f (shared by both entorhinal
    paths), CA3 predictor h (absent when the flags disable it), CA1 predictor g, and the
    prior and posterior heads."""

    def __init__(self, cfg, flags):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.ca3 = CA3(cfg) if flags.use_h else None
        self.ca1 = build_decoder(cfg, flags.g_kind)
        self.prior_head = LatentHead(cfg.d, cfg.prior_width, cfg.m, cfg.c)
        self.posterior_head = LatentHead(2 * cfg.d, cfg.prior_width, cfg.m, cfg.c)
        for head in (self.prior_head, self.posterior_head):
            for layer in (head.fc1, head.fc2):
                nn.init.trunc_normal_(layer.weight, std=cfg.init_std, a=-2 * cfg.init_std, b=2 * cfg.init_std)
                nn.init.zeros_(layer.bias)


@dataclass
class LossBreakdown:
    """Loss terms of a batch (means over pairs).

    ``total == sim2 + sim1_balanced``; the value of ``sim1_balanced`` equals ``sim1_kl``
    but its gradient follows the KL-balancing contract. For the symmetric loss the
    per-direction breakdowns are kept in `forward` and `reverse`.
    """

    total: torch.Tensor
    sim2: torch.Tensor
    sim1_kl: torch.Tensor
    sim1_balanced: torch.Tensor
    sigma2: float
    forward: "LossBreakdown" = None
    reverse: "LossBreakdown" = None
    features: torch.Tensor = field(default=None, repr=False)

    def is_finite(self):
        return all(bool(torch.isfinite(t).all()) for t in (self.total, self.sim2, self.sim1_kl))

    def as_metrics(self):
        """Scalar metrics with their canonical CSV names."""
        return {
            "total": float(self.total.detach()),
            "sim2": float(self.sim2.detach()),
            "sim1_kl": float(self.sim1_kl.detach()),
            "sigma2": float(self.sigma2),
        }


def _check_finite(tensor, where):
    if not torch.isfinite(tensor).all():
        raise NumericalError("non-finite value", where=where)
    return tensor


def sigma_squared(cfg, beta):
    """Likelihood variance ``d (n_p - 1) beta / (2 m)``."""
    if beta <= 0:
        raise ConfigurationError(f"beta must be > 0, got {beta}")
    return cfg.d * (cfg.n_p - 1) * beta / (2 * cfg.m)


def sim2(y, z_long_patches, sigma2):
    """Sim-2: ``1 / (2 sigma^2)`` times the squared error summed over the patch tokens.

    Args:
        y (torch.Tensor): CA1 prediction ``(..., n_p - 1, d)``.
        z_long_patches (torch.Tensor): target patch tokens, same shape; never receives
            gradient.
        sigma2 (float): likelihood variance, > 0.

    Returns:
        torch.Tensor: one value per pair (shape ``y.shape[:-2]``).
    """
    if y.shape != z_long_patches.shape:
        raise ConfigurationError(f"sim2 shapes differ: {tuple(y.shape)} vs {tuple(z_long_patches.shape)}")
    if sigma2 <= 0:
        raise ConfigurationError(f"sigma2 must be > 0, got {sigma2}")
    diff = z_long_patches.detach() - y
    return (diff**2).sum(dim=(-2, -1)) / (2.0 * sigma2)


def kl_categorical(q_logits, p_logits):
    """``sum_i sum_j q_ij ln(q_ij / p_ij)`` with row-softmax distributions, in log space.

    Returns:
        torch.Tensor: one value per pair (shape ``q_logits.shape[:-2]``).
    """
    if q_logits.shape != p_logits.shape:
        raise ConfigurationError(f"KL shapes differ: {tuple(q_logits.shape)} vs {tuple(p_logits.shape)}")
    if not (torch.isfinite(q_logits).all() and torch.isfinite(p_logits).all()):
        raise NumericalError("non-finite logits", where="objective.kl_categorical")
    log_q = torch.log_softmax(q_logits, dim=-1)
    log_p = torch.log_softmax(p_logits, dim=-1)
    return (log_q.exp() * (log_q - log_p)).sum(dim=(-2, -1))


def kl_balanced(q_logits, p_logits, alpha, stop=None):
    """KL with balanced gradients: ``alpha KL(stop(q) || p) + (1 - alpha) KL(q || stop(p))``.

    The value equals `kl_categorical`; the prior receives a fraction `alpha` of the
    gradient and the posterior the rest.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    stop = stop or GradientStop()
    to_prior = kl_categorical(stop("kl_q", q_logits), p_logits)
    to_posterior = kl_categorical(q_logits, stop("kl_p", p_logits))
    return alpha * to_prior + (1.0 - alpha) * to_posterior


def phinet_loss_asym(model, target_encoder, x_src, x_tgt, config, generator=None, stop=None):
    """One direction of the loss, ``x_src -> x_tgt``, for a batch of normalized frames.

    Args:
        model (PhiNet): trainable parameters.
        target_encoder (Encoder): the slow encoder f_long; only used when
            ``config.flags.use_ema_target``.
        x_src (torch.Tensor): ``(B, C, H, W)`` source frames.
        x_tgt (torch.Tensor): ``(B, C, H, W)`` future frames.
        config (TrainConfig): provides beta, alpha, sigma_eps and the loss flags.
        generator (torch.Generator): randomness of the noise and the latent sample.
        stop (GradientStop): named stop-gradient.

    Returns:
        LossBreakdown: batch means; `features` holds the online patch tokens of x_src.
    """
    flags = config.flags
    stop = stop or GradientStop()
    cfg = model.cfg
    sigma2 = sigma_squared(cfg, config.beta)

    z_src = model.encoder(x_src)
    x_future = perturb(x_tgt, config.sigma_eps, generator) if flags.use_noise else x_tgt
    z_future = model.encoder(x_future)
    if flags.use_ema_target:
        if target_encoder is None:
            raise ConfigurationError("the EMA target is enabled but no slow encoder was given")
        with torch.no_grad():
            target = target_encoder(x_tgt)
    else:
        target = z_future if not flags.use_noise else model.encoder(x_tgt)
    target = stop("target", target)[:, 1:]

    if flags.use_h:
        if model.ca3 is None:
            raise ConfigurationError("use_h is set but the model has no CA3 predictor")
        z_hat = model.ca3(z_src)
    else:
        z_hat = z_src
    cls_hat, cls_future = z_hat[:, 0], z_future[:, 0]

    p_logits = _check_finite(prior_logits(model.prior_head, cls_hat, flags.sg_prior, stop), "hippocampus.prior_logits")
    q_logits = _check_finite(
        posterior_logits(model.posterior_head, cls_hat, cls_future, flags.sg_post, stop),
        "hippocampus.posterior_logits",
    )
    r = sample_straight_through(q_logits, generator, stop)
    y = _check_finite(ca1_decode(model.ca1, z_hat, r), "hippocampus.ca1_decode")

    sim2_pairs = _check_finite(sim2(y, target, sigma2), "objective.sim2")
    kl_pairs = kl_categorical(q_logits.detach(), p_logits.detach())
    balanced_pairs = _check_finite(kl_balanced(q_logits, p_logits, config.alpha, stop), "objective.kl_balanced")

    s2 = sim2_pairs.mean()
    bal = balanced_pairs.mean()
    return LossBreakdown(
        total=s2 + bal,
        sim2=s2,
        sim1_kl=kl_pairs.mean(),
        sim1_balanced=bal,
        sigma2=sigma2,
        features=z_src[:, 1:].detach(),
    )


def phinet_loss_symmetric(model, target_encoder, x_t, x_tk, config, generator=None, stop=None):
    """Sum of the chronological (``x_t -> x_tk``) and reverse (``x_tk -> x_t``) losses.

    Both directions share parameters and draw their own noise and latent sample from
    `generator`, forward first. Without ``config.flags.symmetric`` this is
    `phinet_loss_asym`.
    """
    stop = stop or GradientStop()
    if not config.flags.symmetric:
        return phinet_loss_asym(model, target_encoder, x_t, x_tk, config, generator, stop)
    fwd = phinet_loss_asym(model, target_encoder, x_t, x_tk, config, generator, stop.child("forward"))
    rev = phinet_loss_asym(model, target_encoder, x_tk, x_t, config, generator, stop.child("reverse"))
    return LossBreakdown(
        total=fwd.total + rev.total,
        sim2=fwd.sim2 + rev.sim2,
        sim1_kl=fwd.sim1_kl + rev.sim1_kl,
        sim1_balanced=fwd.sim1_balanced + rev.sim1_balanced,
        sigma2=fwd.sigma2,
        forward=fwd,
        reverse=rev,
        features=torch.cat([fwd.features, rev.features], dim=0),
    )


def build_model(cfg, flags, dtype=torch.float32):
    """Create a PhiNet for the given flags and precision."""
    if GKind(flags.g_kind) not in (GKind.TRANSFORMER, GKind.LINEAR):
        raise ConfigurationError(f"unknown g kind {flags.g_kind!r}")
    return PhiNet(cfg, flags).to(dtype)
