"""
Backbone Module
===============

The entorhinal encoder f: a Vision Transformer that maps a frame to a token matrix. A
frame is cut into non-overlapping patches in raster order, each patch is linearly
projected to the embedding dimension d, a learned [CLS] token is prepended and learned
positional embeddings are added before the pre-norm transformer blocks.

Frames enter the encoder in normalized pixel space (zero mean, unit standard deviation
per channel, using dataset statistics stored on the encoder). The future-frame noise
`perturb` acts in the same space.

The transformer block and attention layers defined here are shared with the CA1
decoder of the hippocampus module.
"""

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from phinet_core.abstract import ConfigurationError, NumericalError


def _check_frame_shape(frames, cfg):
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if tuple(frames.shape[-3:]) != expected:
        raise ConfigurationError(f"frame shape {tuple(frames.shape[-3:])} does not match {expected}")


def patchify(frames, cfg):
    """Cut frames into flattened non-overlapping patches in raster order.

    Args:
        frames (torch.Tensor): frames of shape ``(..., channels, image_size, image_size)``.
        cfg (ModelConfig): the model configuration.

    Returns:
        torch.Tensor: patches of shape ``(..., n_p - 1, channels * patch_size**2)``, each
        patch flattened in (channel, row, column) order.
    """
    _check_frame_shape(frames, cfg)
    lead = frames.shape[:-3]
    g, p, ch = cfg.grid_size, cfg.patch_size, cfg.channels
    x = frames.reshape(*lead, ch, g, p, g, p)
    x = x.movedim(-4, -5).movedim(-2, -4)  # (..., g_row, g_col, ch, p, p)
    return x.reshape(*lead, g * g, ch * p * p)


def assemble_patches(patches, cfg):
    """Inverse of `patchify`: reassemble raster-ordered patches into frames."""
    if tuple(patches.shape[-2:]) != (cfg.n_p - 1, cfg.patch_dim):
        raise ConfigurationError(f"patch shape {tuple(patches.shape[-2:])} does not match {(cfg.n_p - 1, cfg.patch_dim)}")
    lead = patches.shape[:-2]
    g, p, ch = cfg.grid_size, cfg.patch_size, cfg.channels
    x = patches.reshape(*lead, g, g, ch, p, p)
    x = x.movedim(-4, -2).movedim(-5, -4)  # (..., ch, g_row, p, g_col, p)
    return x.reshape(*lead, ch, g * p, g * p)


def perturb(frames, sigma_eps, generator=None):
    """Add i.i.d. Gaussian noise of standard deviation `sigma_eps` to the frames.

    The output is not clipped. With ``sigma_eps == 0`` the frames are returned unchanged.

    Args:
        frames (torch.Tensor): normalized frames.
        sigma_eps (float): standard deviation of the noise, >= 0.
        generator (torch.Generator): source of randomness.

    Returns:
        torch.Tensor: the perturbed frames.
    """
    if sigma_eps < 0:
        raise ConfigurationError(f"sigma_eps must be >= 0, got {sigma_eps}")
    if sigma_eps == 0:
        return frames
    noise = torch.randn(frames.shape, generator=generator, dtype=frames.dtype, device=frames.device)
    return frames + sigma_eps * noise


def compute_pixel_stats(frames):
    """Per-channel mean and standard deviation of a stack of frames ``(N, C, H, W)``."""
    frames = np.asarray(frames, dtype=np.float64)
    mean = frames.mean(axis=(0, 2, 3))
    std = frames.std(axis=(0, 2, 3))
    return mean, np.maximum(std, 1e-6)


def trunc_normal_init(module, std=0.02):
    """Truncated-normal weights, zero biases, unit LayerNorm gains."""
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    """Multi-head attention; self-attention when no context is given, cross-attention
    (queries from `x`, keys and values from `context`) otherwise."""

    def __init__(self, d, heads):
        super().__init__()
        self.heads = heads
        self.scale = 1.0 / math.sqrt(d // heads)
        self.q = nn.Linear(d, d)
        self.kv = nn.Linear(d, 2 * d)
        self.proj = nn.Linear(d, d)

    def _split(self, x):
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, context=None):
        context = x if context is None else context
        q = self._split(self.q(x))
        k, v = (self._split(t) for t in self.kv(context).chunk(2, dim=-1))
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, d, hidden):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block with per-branch layer scale.

    With ``cross=True`` the attention takes its keys and values from a separately
    normalized context sequence.
    """

    def __init__(self, d, heads, mlp_ratio=4.0, layer_scale_init=1.0, cross=False):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.norm_context = nn.LayerNorm(d) if cross else None
        self.attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = Mlp(d, int(d * mlp_ratio))
        self.ls1 = nn.Parameter(torch.full((d,), float(layer_scale_init)))
        self.ls2 = nn.Parameter(torch.full((d,), float(layer_scale_init)))

    def forward(self, x, context=None):
        if self.norm_context is not None:
            x = x + self.ls1 * self.attn(self.norm1(x), self.norm_context(context))
        else:
            x = x + self.ls1 * self.attn(self.norm1(x))
        return x + self.ls2 * self.mlp(self.norm2(x))


class Encoder(nn.Module):
    """The ViT encoder f (and, as an EMA copy, the slow encoder f_long).

    Attributes:
        cfg (ModelConfig): the model configuration.
        pixel_mean (torch.Tensor): per-channel mean used by `normalize` (buffer).
        pixel_std (torch.Tensor): per-channel standard deviation (buffer).
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_p, cfg.d)) if cfg.use_pos_embed else None
        self.blocks = nn.ModuleList(
            [Block(cfg.d, cfg.heads, cfg.mlp_ratio, cfg.layer_scale_init) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(cfg.d)
        self.register_buffer("pixel_mean", torch.zeros(cfg.channels))
        self.register_buffer("pixel_std", torch.ones(cfg.channels))
        self.reset_parameters()

    def reset_parameters(self):
        std = self.cfg.init_std
        self.apply(lambda m: trunc_normal_init(m, std))
        nn.init.trunc_normal_(self.cls_token, std=std, a=-2 * std, b=2 * std)
        if self.pos_embed is not None:
            nn.init.trunc_normal_(self.pos_embed, std=std, a=-2 * std, b=2 * std)

    def set_pixel_stats(self, mean, std):
        with torch.no_grad():
            self.pixel_mean.copy_(torch.as_tensor(np.asarray(mean), dtype=self.pixel_mean.dtype))
            self.pixel_std.copy_(torch.as_tensor(np.asarray(std), dtype=self.pixel_std.dtype))

    def normalize(self, frames):
        """Shift and scale raw frames in [0, 1] to the encoder's input space."""
        return (frames - self.pixel_mean[:, None, None]) / self.pixel_std[:, None, None]

    def embed(self, frames):
        """Patch projection, [CLS] token and positional embeddings."""
        tokens = self.patch_embed(patchify(frames, self.cfg))
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        x = torch.cat([cls, tokens], dim=1)
        if self.pos_embed is not None:
            x = x + self.pos_embed
        return x

    def forward(self, frames):
        x = self.embed(frames)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise NumericalError("non-finite activation in encoder", where=f"encoder.blocks.{i}")
        return self.norm(x)


def encode(encoder, frames):
    """Encode normalized frames into token matrices.

    Args:
        encoder (Encoder): the encoder f (or f_long).
        frames (torch.Tensor): one frame ``(C, H, W)`` or a batch ``(B, C, H, W)``.

    Returns:
        torch.Tensor: tokens ``(n_p, d)`` or ``(B, n_p, d)``; token 0 is [CLS].
    """
    _check_frame_shape(frames, encoder.cfg)
    if frames.dim() == 3:
        return encoder(frames.unsqueeze(0)).squeeze(0)
    return encoder(frames)
