"""
Gradient Check Module
=====================

Finite-difference verification of the gradients that training relies on.

The objective contains stop-gradients, a balanced KL and a straight-through sample, so
its autograd gradient is not the derivative of its value. The check therefore runs the
loss once with a `FrozenGradientStop`, which records every stopped value, and evaluates
the perturbed losses in replay mode. The replayed loss is an ordinary function of the
parameters whose derivative at the recorded point is exactly the gradient used in
training. Noise and latent samples come from a generator reseeded for every
evaluation.

Every trainable parameter group is checked along random directions with central
differences in 64-bit precision. Closed-form oracles cover the Sim-2 term, the
categorical KL and its balancing, and the straight-through Jacobian.
"""

import contextlib
import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from phinet_core import objective
from phinet_core.abstract import AbstractComponent
from phinet_core.config import LossFlags, TrainConfig, model_preset
from phinet_core.hippocampus import sample_straight_through
from phinet_core.objective import FrozenGradientStop, build_model, phinet_loss_symmetric

REL_TOL = 1e-4
ABS_TOL = 1e-10


@dataclass
class GroupResult:
    name: str
    kind: str
    error: float
    passed: bool
    detail: str = ""


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    @property
    def failures(self):
        return [r.name for r in self.results if not r.passed]

    def names(self):
        return [r.name for r in self.results]

    def render(self):
        width = max((len(r.name) for r in self.results), default=4)
        lines = [f"{'group':<{width}}  kind    error       status"]
        for r in self.results:
            lines.append(f"{r.name:<{width}}  {r.kind:<6}  {r.error:.3e}   {'ok' if r.passed else 'FAIL'}")
        return "\n".join(lines)


def parameter_group(name):
    """Group key of a parameter name: one group per block, per head and per top-level
    tensor."""
    parts = name.split(".")
    if parts[0] in ("prior_head", "posterior_head"):
        return parts[0]
    if len(parts) > 2 and parts[1] == "blocks":
        return ".".join(parts[:3])
    return ".".join(parts[:2])


def parameter_groups(model):
    groups = {}
    for name, p in model.named_parameters():
        if p.requires_grad:
            groups.setdefault(parameter_group(name), []).append(p)
    return groups


@torch.no_grad()
def randomize_parameters(module, generator, scale=0.3):
    """Move every parameter away from its initialization so no gradient vanishes
    structurally (identity W_h, layer scales set to a constant)."""
    for sub in module.modules():
        for name, p in sub.named_parameters(recurse=False):
            noise = torch.randn(p.shape, generator=generator, dtype=p.dtype) * scale
            if isinstance(sub, nn.LayerNorm) and name == "weight":
                noise += 1.0
            p.copy_(noise)


def _rel_error(a, b):
    denom = max(abs(a), abs(b), 1e-300)
    return abs(a - b) / denom


def _judge(a, b):
    err = _rel_error(a, b)
    return err, err < REL_TOL or abs(a - b) < ABS_TOL


#################
# Oracles
#################


def check_sim2(generator):
    y = torch.randn(2, 4, 8, generator=generator, dtype=torch.float64, requires_grad=True)
    z = torch.randn(2, 4, 8, generator=generator, dtype=torch.float64)
    sigma2 = 0.7
    value = objective.sim2(y, z, sigma2)
    expected = ((z - y.detach()) ** 2).sum(dim=(-2, -1)) / (2 * sigma2)
    (grad,) = torch.autograd.grad(value.sum(), y)
    expected_grad = (y.detach() - z) / sigma2
    err = max(
        float(((value.detach() - expected).abs() / expected.abs()).max()),
        float(((grad - expected_grad).abs() / expected_grad.abs().clamp_min(1e-12)).max()),
    )
    return GroupResult("objective.sim2", "oracle", err, err < 1e-10)


def check_kl(generator):
    q = torch.randn(2, 3, 4, generator=generator, dtype=torch.float64, requires_grad=True)
    p = torch.randn(2, 3, 4, generator=generator, dtype=torch.float64, requires_grad=True)
    value = objective.kl_categorical(q, p)
    qs, ps = torch.softmax(q.detach(), -1), torch.softmax(p.detach(), -1)
    expected = (qs * (qs.log() - ps.log())).sum(dim=(-2, -1))
    err = float(((value.detach() - expected).abs() / expected.abs()).max())
    return GroupResult("objective.kl_categorical", "oracle", err, err < 1e-10)


def check_kl_balancing(generator, alpha=0.8):
    q = torch.randn(2, 3, 4, generator=generator, dtype=torch.float64, requires_grad=True)
    p = torch.randn(2, 3, 4, generator=generator, dtype=torch.float64, requires_grad=True)
    gq, gp = torch.autograd.grad(objective.kl_balanced(q, p, alpha).sum(), (q, p))
    fq, fp = torch.autograd.grad(objective.kl_categorical(q, p).sum(), (q, p))
    err = max(
        float((gq - (1 - alpha) * fq).abs().max() / fq.abs().max()),
        float((gp - alpha * fp).abs().max() / fp.abs().max()),
    )
    return GroupResult("objective.kl_balanced", "oracle", err, err < 1e-10)


def check_straight_through(generator):
    logits = torch.randn(2, 3, 5, generator=generator, dtype=torch.float64, requires_grad=True)
    weights = torch.randn(2, 3, 5, generator=generator, dtype=torch.float64)
    r = sample_straight_through(logits, generator)
    one_hot_ok = bool(((r.detach() == 0) | (r.detach() == 1)).all()) and bool((r.detach().sum(-1) == 1).all())
    (grad,) = torch.autograd.grad((r * weights).sum(), logits)
    probs = torch.softmax(logits.detach(), -1)
    expected = probs * (weights - (probs * weights).sum(-1, keepdim=True))
    err = float((grad - expected).abs().max() / expected.abs().max())
    return GroupResult(
        "hippocampus.sample_straight_through", "oracle", err, one_hot_ok and err < 1e-6, "" if one_hot_ok else "not one-hot"
    )


#################
# Finite differences
#################


class LossProbe:
    """The training loss at fixed data and randomness as a function of the parameters."""

    def __init__(self, model, target, x_src, x_tgt, config, seed):
        self.model = model
        self.target = target
        self.x_src = x_src
        self.x_tgt = x_tgt
        self.config = config
        self.seed = seed
        self.stop = FrozenGradientStop()

    def __call__(self):
        generator = torch.Generator().manual_seed(self.seed)
        return phinet_loss_symmetric(self.model, self.target, self.x_src, self.x_tgt, self.config, generator, self.stop)

    def gradients(self):
        """Autograd gradient at the current point; records the stopped values."""
        self.model.zero_grad(set_to_none=True)
        loss = self().total
        loss.backward()
        self.stop.replay()
        return float(loss.detach())

    @torch.no_grad()
    def directional(self, params, direction, h):
        for p, v in zip(params, direction):
            p.add_(v, alpha=h)
        plus = float(self().total)
        for p, v in zip(params, direction):
            p.add_(v, alpha=-2 * h)
        minus = float(self().total)
        for p, v in zip(params, direction):
            p.add_(v, alpha=h)
        return (plus - minus) / (2 * h)


def check_groups(probe, generator, h=1e-6, n_directions=2):
    probe.gradients()
    results = []
    for name, params in parameter_groups(probe.model).items():
        worst, ok = 0.0, True
        for _ in range(n_directions):
            direction = [torch.randn(p.shape, generator=generator, dtype=p.dtype) for p in params]
            norm = torch.sqrt(sum((v**2).sum() for v in direction))
            direction = [v / norm for v in direction]
            analytic = float(sum((p.grad * v).sum() for p, v in zip(params, direction) if p.grad is not None))
            numeric = probe.directional(params, direction, h)
            err, passed = _judge(analytic, numeric)
            worst = max(worst, err)
            ok = ok and passed
        results.append(GroupResult(name, "fd", worst, ok))
    return results


@contextlib.contextmanager
def inject_fault(name):
    """Temporarily break one loss term (``sim2``) by flipping its sign."""
    if name is None:
        yield
        return
    if name != "sim2":
        raise ValueError(f"unknown fault {name!r}, expected sim2")
    original = objective.sim2
    objective.sim2 = lambda y, z, sigma2: -original(y, z, sigma2)
    try:
        yield
    finally:
        objective.sim2 = original


class GradientCheck(AbstractComponent):
    """Runs the oracle checks and the finite-difference suite on the micro model."""

    @staticmethod
    def name():
        return "GradientCheck"

    @staticmethod
    def description():
        return "Finite-difference check of every trainable parameter group."

    def __init__(self, model_cfg=None, flags=None, seed=0, batch=2, **kwargs):
        super().__init__(**kwargs)
        self.model_cfg = model_cfg or model_preset("micro")
        self.flags = flags or LossFlags()
        self.seed = seed
        self.batch = batch

    def build_probe(self, generator):
        cfg = self.model_cfg
        config = TrainConfig(flags=self.flags, float64=True, seed=self.seed, warmup_epochs=0, total_epochs=1)
        model = build_model(cfg, self.flags, torch.float64)
        randomize_parameters(model, generator)
        target = copy.deepcopy(model.encoder)
        randomize_parameters(target, generator)
        for p in target.parameters():
            p.requires_grad_(False)
        shape = (self.batch, cfg.channels, cfg.image_size, cfg.image_size)
        x_src = torch.randn(shape, generator=generator, dtype=torch.float64)
        x_tgt = torch.randn(shape, generator=generator, dtype=torch.float64)
        return LossProbe(model, target, x_src, x_tgt, config, self.seed)

    def run(self):
        """Run every check.

        Returns:
            GradcheckReport: one result per oracle and per parameter group.
        """
        generator = torch.Generator().manual_seed(self.seed)
        report = GradcheckReport()
        report.results.extend(
            [check_sim2(generator), check_kl(generator), check_kl_balancing(generator), check_straight_through(generator)]
        )
        report.results.extend(check_groups(self.build_probe(generator), generator))
        for r in report.results:
            log = self.terminal_logger.info if r.passed else self.terminal_logger.error
            log("gradcheck_group", group=r.name, kind=r.kind, error=r.error, passed=r.passed)
            self.file_logger.info("gradcheck_group", group=r.name, kind=r.kind, error=r.error, passed=r.passed)
        return report


def run_gradcheck(seed=0, fault=None, model_cfg=None, flags=None):
    with inject_fault(fault):
        return GradientCheck(model_cfg, flags, seed).run()

