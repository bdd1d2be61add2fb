"""
Hippocampus Module
==================

The hippocampal predictors of PhiNet v2:

- CA3, a bias-free linear predictor h that forecasts the token matrix of a future frame
  from the current one, ``Z_hat = W_h Z`` along the embedding dimension.
- The prior and posterior heads over the discrete latent r (m categorical variables of c
  classes each). Both are single-hidden-layer ReLU networks reading only [CLS] tokens.
- The straight-through sampler of r.
- CA1, the predictor g, a cross-attention decoder whose keys and values are the tokens of
  Z_hat plus one embedded token for r, and whose first-block queries are learned.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from phinet_core.abstract import ConfigurationError, NumericalError
from phinet_core.backbone import Block, trunc_normal_init
from phinet_core.config import GKind


def _identity_stop(key, tensor):
    return tensor.detach()


class CA3(nn.Module):
    """Linear predictor h. W_h starts as the identity."""

    def __init__(self, cfg):
        super().__init__()
        self.w_h = nn.Parameter(torch.eye(cfg.d))

    def forward(self, z):
        return ca3_predict(self.w_h, z)


def ca3_predict(w_h, z):
    """Apply W_h along the embedding dimension to every token, [CLS] included.

    Args:
        w_h (torch.Tensor): ``(d, d)`` matrix.
        z (torch.Tensor): tokens ``(..., n_p, d)``.

    Returns:
        torch.Tensor: ``z @ w_h.T``, i.e. ``W_h Z`` in the ``d x n_p`` convention.
    """
    if w_h.dim() != 2 or w_h.shape[0] != w_h.shape[1] or w_h.shape[1] != z.shape[-1]:
        raise ConfigurationError(f"W_h of shape {tuple(w_h.shape)} does not act on tokens of width {z.shape[-1]}")
    return z @ w_h.transpose(0, 1)


class LatentHead(nn.Module):
    """Single-hidden-layer ReLU network producing ``(m, c)`` logits."""

    def __init__(self, in_dim, hidden, m, c):
        super().__init__()
        self.m, self.c = m, c
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, m * c)

    def forward(self, x):
        logits = self.fc2(F.relu(self.fc1(x)))
        return logits.reshape(*x.shape[:-1], self.m, self.c)


def prior_logits(head, cls_hat, sg_prior=True, stop=_identity_stop):
    """Prior p(r | Z_hat) from the [CLS] row of the CA3 prediction.

    With `sg_prior` the head input is gradient-stopped, so nothing flows back into
    `cls_hat` through this path (the head parameters still train).
    """
    if sg_prior:
        cls_hat = stop("prior_input", cls_hat)
    return head(cls_hat)


def posterior_logits(head, cls_hat, cls_future, sg_post=False, stop=_identity_stop):
    """Posterior q(r | Z_hat, Z_eps) from ``[cls_hat; cls_future]`` in that order."""
    if cls_hat.shape != cls_future.shape:
        raise ConfigurationError(f"[CLS] shapes differ: {tuple(cls_hat.shape)} vs {tuple(cls_future.shape)}")
    x = torch.cat([cls_hat, cls_future], dim=-1)
    if sg_post:
        x = stop("posterior_input", x)
    return head(x)


def sample_straight_through(logits, generator=None, stop=_identity_stop):
    """Sample one-hot rows from softmax(logits) with a straight-through gradient.

    The forward value is ``one_hot + (softmax - stop(softmax))``, which is exactly the
    one-hot sample, while the backward pass sees the softmax Jacobian.

    Args:
        logits (torch.Tensor): ``(..., m, c)`` logits.
        generator (torch.Generator): source of randomness.
        stop (callable): named stop-gradient, see `objective.GradientStop`.

    Returns:
        torch.Tensor: the sample, same shape as `logits`.
    """
    if not torch.isfinite(logits).all():
        raise NumericalError("non-finite latent logits", where="hippocampus.sample_straight_through")
    c = logits.shape[-1]
    probs = torch.softmax(logits, dim=-1)
    with torch.no_grad():
        index = torch.multinomial(probs.detach().reshape(-1, c), 1, generator=generator).squeeze(-1)
        one_hot = F.one_hot(index, c).reshape(logits.shape).to(logits.dtype)
    one_hot = stop("latent_sample", one_hot)
    return one_hot + (probs - stop("latent_probs", probs))


class TransformerDecoder(nn.Module):
    """CA1 predictor g built from cross-attention blocks.

    Keys and values of every block are the tokens of Z_hat followed by one token
    embedding the flattened r; the queries of the first block are ``n_p - 1`` learned
    parameters, the queries of later blocks are the outputs of the previous block.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.queries = nn.Parameter(torch.zeros(1, cfg.n_p - 1, cfg.d))
        self.latent_embed = nn.Linear(cfg.m * cfg.c, cfg.d)
        self.blocks = nn.ModuleList(
            [
                Block(cfg.d, cfg.g_heads, cfg.mlp_ratio, cfg.layer_scale_init, cross=True)
                for _ in range(cfg.decoder_depth)
            ]
        )
        self.norm = nn.LayerNorm(cfg.d)
        self.head = nn.Linear(cfg.d, cfg.d)
        std = cfg.init_std
        self.apply(lambda m: trunc_normal_init(m, std))
        nn.init.trunc_normal_(self.queries, std=std, a=-2 * std, b=2 * std)

    def forward(self, z_hat, r):
        r_token = self.latent_embed(r.flatten(start_dim=-2)).unsqueeze(1)
        context = torch.cat([z_hat, r_token], dim=1)
        x = self.queries.expand(z_hat.shape[0], -1, -1)
        for block in self.blocks:
            x = block(x, context)
        return self.head(self.norm(x))


class LinearDecoder(nn.Module):
    """Linear stand-in for g: a bias-free linear map applied to the patch tokens of
    Z_hat only; r does not enter."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.w_g = nn.Linear(cfg.d, cfg.d, bias=False)
        trunc_normal_init(self.w_g, cfg.init_std)

    def forward(self, z_hat, r):
        return self.w_g(z_hat[:, 1:])


def build_decoder(cfg, g_kind):
    if GKind(g_kind) is GKind.LINEAR:
        return LinearDecoder(cfg)
    return TransformerDecoder(cfg)


def ca1_decode(decoder, z_hat, r):
    """Predict the patch tokens of the future frame, ``Y = g(Z_hat, r)``.

    Args:
        decoder (TransformerDecoder or LinearDecoder): the predictor g.
        z_hat (torch.Tensor): CA3 prediction ``(B, n_p, d)``.
        r (torch.Tensor): latent sample ``(B, m, c)``.

    Returns:
        torch.Tensor: ``(B, n_p - 1, d)``, no [CLS] output.
    """
    cfg = decoder.cfg
    if tuple(z_hat.shape[-2:]) != (cfg.n_p, cfg.d):
        raise ConfigurationError(f"Z_hat shape {tuple(z_hat.shape[-2:])} does not match {(cfg.n_p, cfg.d)}")
    if tuple(r.shape[-2:]) != (cfg.m, cfg.c) or r.shape[0] != z_hat.shape[0]:
        raise ConfigurationError(f"latent shape {tuple(r.shape)} does not match (B, {cfg.m}, {cfg.c})")
    return decoder(z_hat, r)
