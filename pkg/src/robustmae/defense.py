"""Test-time cluster-specific frequency-domain prompting.

Training images are clustered in the feature space of the pretrained
encoder; each cluster owns one learnable complex prompt added to the centered
spectrum of its images on the high-frequency band. At test time an input is
routed to the prompt of its nearest prototype and the prediction ensembles
the logits of the raw and prompted images.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .frequency import fft2_centered, ifft2_centered, radial_mask
from .pretrain import _set_lr, lr_at

log = logging.getLogger(__name__)


@dataclass
class DefenseConfig:
    n_clusters: int = 64
    radius_fraction: float = 1 / 8
    selection: str = "argmin"
    tau: float = 0.5
    gumbel_hard: bool = False
    lam: float = 1.0
    epochs: int = 100
    warmup_epochs: int = 5
    base_lr: float = 1e-3
    batch_size: int = 1024
    weight_decay: float = 0.0
    kmeans_batch: int = 1024
    kmeans_sweeps: int = 20

    def __post_init__(self):
        if self.selection not in ("argmin", "gumbel"):
            raise ValueError(f"unknown selection mode {self.selection!r}")
        if self.selection == "gumbel" and self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0 < self.radius_fraction <= 0.5:
            raise ValueError("radius_fraction must lie in (0, 1/2]")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")


@dataclass
class PromptBank:
    prototypes: torch.Tensor  # (N, D) float
    prompts: torch.Tensor  # (N, C, H, W) complex64
    radius: float
    lam: float = 1.0

    def __post_init__(self):
        if len(self.prototypes) < 1:
            raise ValueError("bank needs at least one prototype")
        if len(self.prototypes) != len(self.prompts):
            raise ValueError("prototype / prompt count mismatch")
        if not torch.isfinite(self.prototypes).all():
            raise ValueError("non-finite prototypes")
        self.prompts = self.prompts.to(torch.complex64) * self.mask

    @classmethod
    def empty(cls, prototypes, channels, size, radius, lam=1.0):
        prompts = torch.zeros(len(prototypes), channels, size, size, dtype=torch.complex64)
        return cls(prototypes.float(), prompts, radius, lam)

    @property
    def n(self) -> int:
        return len(self.prototypes)

    @property
    def mask(self) -> torch.Tensor:
        return radial_mask(self.prompts.shape[-1], self.radius, "pass-high")

    def set_prompts(self, prompts: torch.Tensor) -> None:
        """Store prompts, zeroing every coefficient outside the mask."""
        self.prompts = prompts.detach().to(torch.complex64) * self.mask


def feature_encoder(model) -> nn.Module:
    return getattr(model, "encoder", model)


@torch.no_grad()
def extract_cluster_features(encoder, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Final-layer (normalized) class token for every image, shape (n, width)."""
    enc = feature_encoder(encoder)
    out = [enc(images[i : i + batch_size])[:, 0] for i in range(0, len(images), batch_size)]
    return torch.cat(out)


def sq_distances(x: torch.Tensor, centers: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Squared Euclidean distances (n, k), computed coordinate-wise."""
    out = []
    for i in range(0, len(x), chunk):
        out.append(((x[i : i + chunk, None, :] - centers[None]) ** 2).sum(-1))
    return torch.cat(out) if out else x.new_zeros(0, len(centers))


def kmeans_pp_init(x: torch.Tensor, k: int, gen: torch.Generator) -> torch.Tensor:
    first = torch.randint(len(x), (1,), generator=gen).item()
    centers = [x[first]]
    d2 = ((x - x[first]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct rows than k: fall back to any point
            idx = torch.randint(len(x), (1,), generator=gen).item()
        else:
            idx = torch.multinomial(d2 / total, 1, generator=gen).item()
        centers.append(x[idx])
        d2 = torch.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return torch.stack(centers).clone()


@dataclass
class ClusterResult:
    prototypes: torch.Tensor
    assignments: torch.Tensor
    objective: list[float] = field(default_factory=list)


def _objective(x, centers):
    d = sq_distances(x, centers)
    best, assign = d.min(dim=1)
    return best, assign


def fit_clusters(features: torch.Tensor, n: int, seed: int = 0, batch_size: int = 1024,
                 sweeps: int = 20) -> ClusterResult:
    """Mini-batch k-means with k-means++ seeding.

    Centers follow per-center ``1/count`` updates. After each sweep over the
    data the full objective (mean squared distance) is evaluated; empty
    clusters are re-seeded at the point farthest from its center, and a sweep
    that would raise the objective is rolled back.
    """
    x = features.detach().to(torch.float64)
    if len(x) < n:
        raise ValueError(f"{len(x)} rows but {n} clusters requested")
    gen = torch.Generator().manual_seed(seed)
    centers = kmeans_pp_init(x, n, gen)
    counts = torch.zeros(n, dtype=torch.float64)
    best, assign = _objective(x, centers)
    objective = [best.mean().item()]
    for _ in range(sweeps):
        trial = centers.clone()
        trial_counts = counts.clone()
        order = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), batch_size):
            mb = x[order[i : i + batch_size]]
            near = sq_distances(mb, trial).argmin(dim=1)
            # batched form of the sequential running-mean update
            m = torch.bincount(near, minlength=n).to(x.dtype)
            sums = torch.zeros_like(trial).index_add_(0, near, mb)
            trial_counts += m
            hit = m > 0
            trial[hit] += (sums[hit] - m[hit, None] * trial[hit]) / trial_counts[hit, None]
        dist, a = _objective(x, trial)
        trial, dist, a = _reseed_empty(x, trial, dist, a)
        if dist.mean().item() <= objective[-1]:
            centers, counts, best, assign = trial, trial_counts, dist, a
        objective.append(best.mean().item())
    return ClusterResult(centers.to(features.dtype), assign, objective)


def _reseed_empty(x, centers, dist, assign):
    n = len(centers)
    for _ in range(n):
        sizes = torch.bincount(assign, minlength=n)
        empty = (sizes == 0).nonzero().flatten()
        if len(empty) == 0:
            break
        far = dist.argmax().item()
        centers[empty[0]] = x[far]
        dist, assign = _objective(x, centers)
    return centers, dist, assign


def select_prompt(features: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Index of the nearest prototype; ties go to the lowest index."""
    single = features.dim() == 1
    f = features.unsqueeze(0) if single else features
    if f.shape[-1] != prototypes.shape[-1]:
        raise ValueError("feature / prototype dimension mismatch")
    k = sq_distances(f.to(prototypes.dtype), prototypes).argmin(dim=1)
    return k[0] if single else k


def select_prompt_gumbel(features, prototypes, tau: float, generator=None, noise: bool = True):
    """Gumbel-softmax weights over prototypes from negative squared distances."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    single = features.dim() == 1
    f = features.unsqueeze(0) if single else features
    logits = -sq_distances(f, prototypes.to(f.dtype))
    if noise:
        u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype).clamp(1e-20, 1 - 1e-7)
        logits = logits - torch.log(-torch.log(u))
    w = F.softmax(logits / tau, dim=-1)
    return w[0] if single else w


def hermitian_symmetrize(prompt: torch.Tensor) -> torch.Tensor:
    """(P + conj(P(-u, -v))) / 2 for a centered spectrum with even sides."""
    flipped = torch.roll(torch.flip(prompt, dims=(-2, -1)), shifts=(1, 1), dims=(-2, -1))
    return 0.5 * (prompt + flipped.conj())


def apply_prompt(images: torch.Tensor, prompts: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``clip(real(ifft(fft(x) + mask * sym(prompt))), 0, 1)``."""
    if prompts.shape[-3:] != images.shape[-3:]:
        raise ValueError(f"prompt shape {tuple(prompts.shape)} does not match images {tuple(images.shape)}")
    spec = fft2_centered(images) + mask.to(images.device) * hermitian_symmetrize(prompts)
    return ifft2_centered(spec).to(images.dtype).clamp(0, 1)


class DefendedPipeline(nn.Module):
    """``M(x) + lam * M(x_p)`` with the prompt chosen by the selection encoder."""

    def __init__(self, classifier: nn.Module, selector: nn.Module, bank: PromptBank,
                 selection: str = "argmin", tau: float = 0.5, hard: bool = False, seed: int = 0):
        super().__init__()
        self.classifier = classifier
        self.selector = feature_encoder(selector)
        self.bank = bank
        self.selection = selection
        self.tau = tau
        self.hard = hard
        self.generator = torch.Generator().manual_seed(seed)
        self.register_buffer("_mask", bank.mask, persistent=False)

    def prompted(self, x: torch.Tensor) -> torch.Tensor:
        bank = self.bank
        if self.selection == "argmin":
            with torch.no_grad():
                k = select_prompt(self.selector(x)[:, 0], bank.prototypes)
            prompts = bank.prompts[k]
        else:
            w = select_prompt_gumbel(self.selector(x)[:, 0], bank.prototypes, self.tau, self.generator)
            if self.hard:
                one_hot = F.one_hot(w.argmax(dim=1), bank.n).to(w.dtype)
                w = one_hot + w - w.detach()
            prompts = torch.einsum("bn,nchw->bchw", w.to(torch.complex64), bank.prompts)
        return apply_prompt(x, prompts, self._mask)

    def forward(self, x):
        logits = self.classifier(x)
        if self.bank.lam == 0:
            return logits
        return logits + self.bank.lam * self.classifier(self.prompted(x))


def ensemble_predict(classifier, selector, images, bank: PromptBank, **kw) -> torch.Tensor:
    with torch.no_grad():
        return DefendedPipeline(classifier, selector, bank, **kw)(images)


def train_prompts(classifier: nn.Module, images: torch.Tensor, labels: torch.Tensor,
                  assignments: torch.Tensor, bank: PromptBank, cfg: DefenseConfig,
                  seed: int = 0) -> tuple[PromptBank, list[float]]:
    """Learn one prompt per cluster by minimizing CE on prompted images.

    Every sample only updates its own cluster's prompt. Gradients and
    parameters are projected onto the mask support after each step. Returns
    the trained bank and per-epoch mean training loss.
    """
    sizes = torch.bincount(assignments, minlength=bank.n)
    for k in (sizes == 0).nonzero().flatten().tolist():
        warnings.warn(f"cluster {k} has no training samples; its prompt stays zero")
    mask = bank.mask
    mask_r = mask[..., None]
    param = torch.view_as_real(bank.prompts.clone()).contiguous().requires_grad_(True)
    opt = torch.optim.AdamW([param], lr=0.0, betas=(0.9, 0.999), eps=1e-8, weight_decay=cfg.weight_decay)
    frozen = [p.requires_grad for p in classifier.parameters()]
    for p in classifier.parameters():
        p.requires_grad_(False)
    classifier.eval()
    gen = torch.Generator().manual_seed(seed)
    n = len(images)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    peak = cfg.base_lr * cfg.batch_size / 256
    history = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = torch.randperm(n, generator=gen)
            loss_sum = 0.0
            for i in range(steps_per_epoch):
                idx = order[i * cfg.batch_size : (i + 1) * cfg.batch_size]
                prompts = torch.view_as_complex(param)[assignments[idx]]
                xp = apply_prompt(images[idx], prompts, mask)
                loss = F.cross_entropy(classifier(xp), labels[idx])
                _set_lr(opt, lr_at(step, total, warmup, peak))
                opt.zero_grad()
                loss.backward()
                param.grad.mul_(mask_r)
                opt.step()
                with torch.no_grad():
                    param.mul_(mask_r)
                loss_sum += loss.item() * len(idx)
                step += 1
            history.append(loss_sum / n)
            log.info("prompt epoch %d: loss %.4f", epoch, history[-1])
    finally:
        for p, req in zip(classifier.parameters(), frozen):
            p.requires_grad_(req)
    trained = PromptBank(bank.prototypes, torch.view_as_complex(param.detach()).clone(), bank.radius, bank.lam)
    return trained, history
