"""White-box first-order attacks: PGD, BIM, MIM (momentum) and C&W-L2.

All attacks are untargeted, operate on batched images in ``[0, 1]`` and only
query the model through ``model(x) -> logits``, so the same code attacks a
bare classifier or a defended pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .model import margin_loss

KINDS = ("pgd", "bim", "mim", "cw")
NORMS = ("linf", "l2")


class AttackError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    kind: str = "pgd"
    norm: str = "linf"
    epsilon: float = 8 / 255
    steps: int = 20
    step_size: float | None = None
    momentum_decay: float = 1.0
    random_start: bool = True
    cw_confidence: float = 0.0
    cw_c: float = 1.0
    cw_iterations: int = 100
    cw_lr: float = 0.01

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.kind == "cw" and self.norm != "l2":
            raise ValueError("cw is an l2 attack")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size is not None and self.steps > 0 and self.step_size <= 0:
            raise ValueError("step_size must be > 0")

    @property
    def alpha(self) -> float:
        """Per-step size; defaults to 2.5 * epsilon / steps."""
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / max(self.steps, 1)

    @property
    def label(self) -> str:
        return f"{self.kind}-{self.norm}-{self.epsilon:.6g}"


@dataclass
class AdversarialBatch:
    originals: torch.Tensor
    adversarials: torch.Tensor
    labels: torch.Tensor
    success: torch.Tensor
    norms: torch.Tensor
    config: AttackConfig | None = field(default=None, repr=False)


def l2_budget(per_pixel: float, c: int, h: int, w: int) -> float:
    """Whole-image l2 budget from a per-pixel scale: ``per_pixel * sqrt(C*H*W)``."""
    if min(c, h, w) <= 0:
        raise ValueError("dimensions must be positive")
    return per_pixel * math.sqrt(c * h * w)


def _flat_norm(t, norm):
    flat = t.reshape(t.shape[0], -1)
    if norm == "linf":
        return flat.abs().amax(dim=1)
    return flat.norm(dim=1)


def _bcast(v, like):
    return v.reshape(-1, *([1] * (like.dim() - 1)))


def project(x_adv: torch.Tensor, x: torch.Tensor, norm: str, epsilon: float) -> torch.Tensor:
    """Project ``x_adv`` onto the ``epsilon``-ball around ``x`` and onto [0, 1]."""
    if x_adv.shape != x.shape:
        raise ValueError("shape mismatch")
    delta = x_adv - x
    if norm == "linf":
        delta = delta.clamp(-epsilon, epsilon)
    elif norm == "l2":
        n = _flat_norm(delta, "l2")
        scale = torch.where(n > epsilon, epsilon / n.clamp_min(1e-30), torch.ones_like(n))
        delta = delta * _bcast(scale, delta)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return (x + delta).clamp(0, 1)


def _random_start(x, norm, epsilon, generator):
    if norm == "linf":
        noise = torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1
        return x + epsilon * noise
    direction = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    direction = direction / _bcast(_flat_norm(direction, "l2").clamp_min(1e-30), x)
    d = x[0].numel()
    radius = torch.rand(x.shape[0], generator=generator, dtype=x.dtype) ** (1.0 / d)
    return x + epsilon * direction * _bcast(radius, x)


def _loss_grad(model, x_adv, y):
    x_adv = x_adv.detach().requires_grad_(True)
    loss = F.cross_entropy(model(x_adv), y, reduction="sum")
    if not loss.requires_grad:
        return torch.zeros_like(x_adv)
    (grad,) = torch.autograd.grad(loss, x_adv, allow_unused=True)
    if grad is None:
        return torch.zeros_like(x_adv)
    return grad


def _finish(model, x, x_adv, y, norm, config):
    with torch.no_grad():
        pred = model(x_adv).argmax(dim=1)
    return AdversarialBatch(
        originals=x,
        adversarials=x_adv.detach(),
        labels=y,
        success=pred != y,
        norms=_flat_norm(x_adv - x, norm),
        config=config,
    )


def _iterate(model, x, y, config, random_start, decay=None, seed=None):
    x = x.detach()
    y = torch.as_tensor(y, dtype=torch.long)
    eps, norm = config.epsilon, config.norm
    x_adv = x.clone()
    if eps == 0:
        return _finish(model, x, x_adv, y, norm, config)
    if random_start:
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
        x_adv = project(_random_start(x, norm, eps, gen), x, norm, eps)
    alpha = config.alpha
    g = torch.zeros_like(x)
    for step in range(config.steps):
        grad = _loss_grad(model, x_adv, y)
        if not torch.isfinite(grad).all():
            raise AttackError(f"{config.kind}: non-finite gradient at step {step}")
        if decay is not None:
            l1 = grad.abs().reshape(len(grad), -1).sum(1)
            g = decay * g + grad / _bcast(l1.clamp_min(1e-12), grad)
            direction = g
        else:
            direction = grad
        if norm == "linf":
            update = direction.sign()
        else:
            update = direction / _bcast(_flat_norm(direction, "l2").clamp_min(1e-12), direction)
        x_adv = project(x_adv + alpha * update, x, norm, eps).detach()
    return _finish(model, x, x_adv, y, norm, config)


def pgd(model, x, y, config: AttackConfig, seed: int | None = None) -> AdversarialBatch:
    return _iterate(model, x, y, config, config.random_start, seed=seed)


def bim(model, x, y, config: AttackConfig, seed: int | None = None) -> AdversarialBatch:
    """PGD without random start."""
    return _iterate(model, x, y, config, False, seed=seed)


def mim(model, x, y, config: AttackConfig, seed: int | None = None) -> AdversarialBatch:
    """Momentum iterative method: ``g <- decay * g + grad / ||grad||_1``."""
    if config.momentum_decay < 0:
        raise ValueError("momentum_decay must be >= 0")
    return _iterate(model, x, y, config, False, decay=config.momentum_decay, seed=seed)


def _cw_success(logits, y, kappa):
    m = margin_loss(logits, y)
    return (m >= kappa) & (logits.argmax(dim=1) != y)


def cw(model, x, y, config: AttackConfig, seed: int | None = None) -> AdversarialBatch:
    """Carlini-Wagner l2 attack with a tanh change of variables.

    Minimizes ``||x' - x||^2 + c * max(z_y - max_{j!=y} z_j + kappa, 0)`` with
    Adam and keeps, per sample, the lowest-distortion successful iterate. A
    sample with no success is returned unchanged.
    """
    x = x.detach()
    y = torch.as_tensor(y, dtype=torch.long)
    kappa, c = config.cw_confidence, config.cw_c
    best = x.clone()
    best_dist = torch.full((len(x),), float("inf"), dtype=x.dtype)
    with torch.no_grad():
        ok = _cw_success(model(x), y, kappa)
    best_dist[ok] = 0.0

    w = torch.atanh((2 * x - 1) * (1 - 1e-6)).requires_grad_(True)
    opt = torch.optim.Adam([w], lr=config.cw_lr)
    for _ in range(config.cw_iterations):
        x_adv = (torch.tanh(w) + 1) / 2
        logits = model(x_adv)
        dist = ((x_adv - x) ** 2).reshape(len(x), -1).sum(1)
        hinge = (-margin_loss(logits, y) + kappa).clamp_min(0)
        loss = (dist + c * hinge).sum()
        opt.zero_grad()
        loss.backward()
        with torch.no_grad():
            improved = _cw_success(logits, y, kappa) & (dist < best_dist)
            best_dist = torch.where(improved, dist, best_dist)
            best[improved] = x_adv[improved].detach()
        opt.step()
    return _finish(model, x, best, y, "l2", config)


_DISPATCH = {"pgd": pgd, "bim": bim, "mim": mim, "cw": cw}


def run_attack(model, x, y, config: AttackConfig, seed: int | None = None) -> AdversarialBatch:
    return _DISPATCH[config.kind](model, x, y, config, seed=seed)


def attack_defended(pipeline, x, y, config: AttackConfig, seed: int | None = None) -> AdversarialBatch:
    """Attack a defended pipeline through its ensemble logits.

    In argmin mode the pipeline recomputes prompt selection (without gradient)
    at every forward call, so selection is constant within a step and
    re-evaluated at the next. In gumbel mode gradients flow through selection.
    """
    return run_attack(pipeline, x, y, config, seed=seed)


def within_budget(batch: AdversarialBatch, norm: str, epsilon: float, tol: float = 1e-6) -> bool:
    adv = batch.adversarials
    in_range = bool(((adv >= 0) & (adv <= 1)).all())
    return in_range and bool((_flat_norm(adv - batch.originals, norm) <= epsilon + tol).all())
