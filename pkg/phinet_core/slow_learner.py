"""
Slow Learner Module
===================

The neocortical encoder f_long: an exponential moving average of the parameters of the
online encoder f, ``xi_long <- gamma xi_long + (1 - gamma) xi``. It is never trained by
gradient; its parameters have ``requires_grad`` switched off and the objective only ever
reads them under a stop-gradient. Buffers (pixel statistics) are copied, not averaged.

Updates must be serialized with optimizer steps; reads between updates are safe.
"""

import copy
import hashlib
from dataclasses import dataclass

import torch

from phinet_core.abstract import ConfigurationError


@dataclass
class EmaState:
    """The slow encoder and its bookkeeping.

    Attributes:
        encoder (Encoder): the parameter copy xi_long.
        gamma (float): decay in [0, 1].
        update_count (int): number of updates applied since `init_long`.
    """

    encoder: torch.nn.Module
    gamma: float = 0.99
    update_count: int = 0


def init_long(encoder, gamma=0.99):
    """Create the slow encoder as an exact copy of `encoder`.

    Args:
        encoder (Encoder): the online encoder f.
        gamma (float): EMA decay in [0, 1].

    Returns:
        EmaState: state with ``update_count == 0``.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1], got {gamma}")
    long_encoder = copy.deepcopy(encoder)
    for p in long_encoder.parameters():
        p.requires_grad_(False)
    return EmaState(encoder=long_encoder, gamma=gamma, update_count=0)


def check_structure(long_encoder, encoder):
    """Raise a ConfigurationError unless both modules have the same names and shapes."""
    a = {name: tuple(t.shape) for name, t in long_encoder.state_dict().items()}
    b = {name: tuple(t.shape) for name, t in encoder.state_dict().items()}
    if a != b:
        missing = sorted(set(a) ^ set(b)) or sorted(k for k in a if a[k] != b[k])
        raise ConfigurationError(f"EMA structure mismatch: {missing[:5]}")


@torch.no_grad()
def ema_update(state, encoder, gamma=None):
    """Move the slow encoder towards `encoder`: ``xi_long = gamma xi_long + (1 - gamma) xi``.

    Args:
        state (EmaState): the state to update (mutated in place and returned).
        encoder (Encoder): the online encoder f.
        gamma (float): optional decay overriding ``state.gamma``.

    Returns:
        EmaState: the updated state.
    """
    gamma = state.gamma if gamma is None else gamma
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1], got {gamma}")
    check_structure(state.encoder, encoder)
    online = dict(encoder.named_parameters())
    for name, p_long in state.encoder.named_parameters():
        p_long.mul_(gamma).add_(online[name].detach(), alpha=1.0 - gamma)
    online_buffers = dict(encoder.named_buffers())
    for name, b_long in state.encoder.named_buffers():
        b_long.copy_(online_buffers[name])
    state.update_count += 1
    return state


def parameters_digest(module):
    """SHA-256 over the names and bytes of all parameters of `module`."""
    digest = hashlib.sha256()
    for name, p in module.named_parameters():
        digest.update(name.encode("utf-8"))
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
