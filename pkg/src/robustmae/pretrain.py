"""Masked-image-modeling pretraining, perceptual loss, adversarial pretraining
inner loop and supervised finetuning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import MAE, ViTClassifier, patchify, unpatchify

log = logging.getLogger(__name__)


@dataclass
class MaskSpec:
    """Batched partition of S patch indices into masked / visible sets."""

    mask_ratio: float
    rng_seed: int | None
    masked_idx: torch.Tensor  # (B, M), sorted
    unmasked_idx: torch.Tensor  # (B, S - M), sorted

    @property
    def num_patches(self) -> int:
        return self.masked_idx.shape[1] + self.unmasked_idx.shape[1]

    def binary(self) -> torch.Tensor:
        """(B, S) float mask, 1 on masked patches."""
        m = torch.zeros(self.masked_idx.shape[0], self.num_patches)
        return m.scatter(1, self.masked_idx, 1.0)


@dataclass
class PretrainConfig:
    epochs: int = 100
    warmup_epochs: int = 10
    base_lr: float = 1.5e-4
    batch_size: int = 256
    weight_decay: float = 0.05
    mask_ratio: float = 0.75
    perceptual_weight: float = 0.0
    perceptual_layers: tuple[int, ...] = (2, 4, 6)
    perceptual_checkpoint: str | None = None
    abp: bool = False
    abp_steps: int = 4
    abp_step_size: float = 0.5

    def __post_init__(self):
        if self.perceptual_weight < 0:
            raise ValueError("perceptual weight must be >= 0")
        if self.abp and self.abp_steps < 1:
            raise ValueError("abp_steps must be >= 1 when ABP is enabled")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")


@dataclass
class FinetuneConfig:
    epochs: int = 100
    warmup_epochs: int = 5
    base_lr: float = 1e-3
    batch_size: int = 128
    weight_decay: float = 0.05
    label_smoothing: float = 0.0
    augment: bool = True


def random_mask(num_patches: int, ratio: float, seed: int | None = None, batch: int = 1,
                generator: torch.Generator | None = None) -> MaskSpec:
    """Uniformly random masking of ``round(ratio * S)`` patches per sample."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    n_mask = int(round(ratio * num_patches))
    if n_mask == 0 or n_mask == num_patches:
        raise ValueError(f"ratio {ratio} leaves no masked or no visible patches of {num_patches}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    order = torch.rand(batch, num_patches, generator=generator).argsort(dim=1)
    masked = order[:, :n_mask].sort(dim=1).values
    unmasked = order[:, n_mask:].sort(dim=1).values
    return MaskSpec(ratio, seed, masked, unmasked)


def pixel_target(patches: torch.Tensor) -> torch.Tensor:
    """Per-patch normalized pixels: ``(p - mean) / sqrt(var + 1e-6)``."""
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, keepdim=True, unbiased=False)
    return (patches - mean) / (var + 1e-6).sqrt()


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor,
               reduction: str = "mean") -> torch.Tensor:
    """MSE per patch, averaged over masked patches only.

    ``reduction="none"`` returns one value per sample.
    """
    if mask.sum() == 0:
        raise ValueError("empty masked set")
    per_patch = ((pred - target) ** 2).mean(dim=-1)
    if reduction == "none":
        return (per_patch * mask).sum(1) / mask.sum(1)
    return (per_patch * mask).sum() / mask.sum()


def mim_step(mae: MAE, images: torch.Tensor, spec: MaskSpec, targets_from=None,
             reduction: str = "mean", return_pred: bool = False):
    """Pixel reconstruction loss of ``mae`` on ``images`` under ``spec``.

    ``targets_from`` supplies the images the targets come from (defaults to
    ``images``); adversarial pretraining reconstructs the clean image from a
    perturbed input.
    """
    src = images if targets_from is None else targets_from
    target = pixel_target(patchify(src, mae.cfg.patch_size))
    pred = mae(images, spec.unmasked_idx)
    loss = masked_mse(pred, target, spec.binary().to(pred.dtype), reduction)
    return (loss, pred) if return_pred else loss


def reconstruct(images: torch.Tensor, pred: torch.Tensor, spec: MaskSpec, patch_size: int) -> torch.Tensor:
    """Paste de-normalized predictions into the masked patches of ``images``."""
    patches = patchify(images, patch_size)
    mean = patches.mean(dim=-1, keepdim=True)
    std = (patches.var(dim=-1, keepdim=True, unbiased=False) + 1e-6).sqrt()
    filled = pred * std + mean
    m = spec.binary().to(patches.dtype).unsqueeze(-1)
    out = patches * (1 - m) + filled * m
    return unpatchify(out, patch_size, images.shape[1])


def perceptual_loss(x: torch.Tensor, x_hat: torch.Tensor, feat_model, layers) -> torch.Tensor:
    """Sum over ``layers`` (1-based) of squared distances between per-token
    L2-normalized features, averaged over the batch."""
    fx = feat_model.features(x)
    fy = feat_model.features(x_hat)
    total = x.new_zeros(())
    for layer in layers:
        if not 1 <= layer <= len(fx):
            raise ValueError(f"layer {layer} out of range 1..{len(fx)}")
        a = F.normalize(fx[layer - 1], dim=-1)
        b = F.normalize(fy[layer - 1], dim=-1)
        total = total + ((a - b) ** 2).reshape(len(x), -1).sum(1).mean()
    return total


def total_loss(l_pix, l_perc, mu: float = 1.0):
    if mu < 0:
        raise ValueError("mu must be >= 0")
    return l_pix + mu * l_perc


def pixel_mask(spec: MaskSpec, patch_size: int, channels: int) -> torch.Tensor:
    """(B, C, H, W) mask equal to 1 on pixels of visible patches."""
    vis = 1 - spec.binary()
    patches = vis.unsqueeze(-1).expand(-1, -1, patch_size * patch_size * channels)
    return unpatchify(patches, patch_size, channels)


def abp_inner(x: torch.Tensor, spec: MaskSpec, mae: MAE, steps: int, step_size: float) -> torch.Tensor:
    """Gradient ascent on the masked reconstruction loss, visible pixels only.

    ``x_t = clip(x_{t-1} + step_size * m * grad L_pix(x, x_hat(x_{t-1})))``
    where targets always come from the clean ``x``.
    """
    x = x.detach()
    if steps <= 0:
        return x.clone()
    m = pixel_mask(spec, mae.cfg.patch_size, x.shape[1]).to(x.dtype)
    x_adv = x.clone()
    for t in range(steps):
        x_adv.requires_grad_(True)
        loss = mim_step(mae, x_adv, spec, targets_from=x, reduction="none").sum()
        (grad,) = torch.autograd.grad(loss, x_adv)
        if not torch.isfinite(grad).all():
            raise FloatingPointError(f"ABP: non-finite gradient at inner step {t}")
        x_adv = (x_adv.detach() + step_size * m * grad).clamp(0, 1)
        x_adv = x * (1 - m) + x_adv * m
    return x_adv.detach()


def lr_at(step: int, total: int, warmup: int, peak: float) -> float:
    """Linear warmup then half-cycle cosine decay to zero."""
    if step < warmup:
        return peak * (step + 1) / warmup
    if total <= warmup:
        return peak
    progress = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1 + math.cos(math.pi * progress))


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def pretrain_mae(mae: MAE, images: torch.Tensor, cfg: PretrainConfig, seed: int = 0,
                 feat_model=None) -> list[dict]:
    """Train ``mae`` in place; returns per-epoch mean losses."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(mae.parameters(), lr=0.0, betas=(0.9, 0.95), weight_decay=cfg.weight_decay)
    peak = cfg.base_lr * cfg.batch_size / 256
    n = len(images)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    use_perc = cfg.perceptual_weight > 0 and feat_model is not None
    if use_perc:
        for p in feat_model.parameters():
            p.requires_grad_(False)
    history = []
    step = 0
    mae.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        sums = {"pix": 0.0, "perc": 0.0, "adv": 0.0}
        for i in range(steps_per_epoch):
            batch = images[order[i * cfg.batch_size : (i + 1) * cfg.batch_size]]
            spec = random_mask(mae.cfg.num_patches, cfg.mask_ratio, batch=len(batch), generator=gen)
            _set_lr(opt, lr_at(step, total, warmup, peak))
            l_pix, pred = mim_step(mae, batch, spec, return_pred=True)
            loss = l_pix
            if use_perc:
                x_hat = reconstruct(batch, pred, spec, mae.cfg.patch_size)
                l_perc = perceptual_loss(batch, x_hat, feat_model, cfg.perceptual_layers)
                loss = total_loss(l_pix, l_perc, cfg.perceptual_weight)
                sums["perc"] += l_perc.item()
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["pix"] += l_pix.item()
            if cfg.abp:
                x_adv = abp_inner(batch, spec, mae, cfg.abp_steps, cfg.abp_step_size)
                l_adv = mim_step(mae, x_adv, spec, targets_from=batch)
                opt.zero_grad()
                l_adv.backward()
                opt.step()
                sums["adv"] += l_adv.item()
            step += 1
        rec = {"epoch": epoch, **{k: v / steps_per_epoch for k, v in sums.items()}}
        history.append(rec)
        log.info("pretrain epoch %d: %s", epoch, rec)
    mae.eval()
    return history


def augment_batch(batch: torch.Tensor, gen: torch.Generator, pad: int = 4) -> torch.Tensor:
    """Random horizontal flip and random crop after reflection padding."""
    b, _, h, w = batch.shape
    flip = torch.rand(b, generator=gen) < 0.5
    batch = torch.where(flip[:, None, None, None], batch.flip(-1), batch)
    padded = F.pad(batch, (pad, pad, pad, pad), mode="reflect")
    dy = torch.randint(0, 2 * pad + 1, (b,), generator=gen)
    dx = torch.randint(0, 2 * pad + 1, (b,), generator=gen)
    rows = (dy[:, None] + torch.arange(h)[None, :])[:, None, :, None]
    cols = (dx[:, None] + torch.arange(w)[None, :])[:, None, None, :]
    bi = torch.arange(b)[:, None, None, None]
    ci = torch.arange(batch.shape[1])[None, :, None, None]
    return padded[bi, ci, rows, cols]


@torch.no_grad()
def _accuracy(model, images, labels, bs=512):
    correct = 0
    for i in range(0, len(images), bs):
        correct += (model(images[i : i + bs]).argmax(1) == labels[i : i + bs]).sum().item()
    return 100.0 * correct / max(len(images), 1)


def finetune_supervised(model: ViTClassifier, images: torch.Tensor, labels: torch.Tensor,
                        cfg: FinetuneConfig, seed: int = 0, eval_set=None) -> ViTClassifier:
    """Full-parameter cross-entropy finetuning with warmup + cosine decay.

    Per-epoch records land in ``model.history``; ``model.clean_accuracy``
    holds the final accuracy on ``eval_set`` (or the training set).
    """
    n_cls = model.cfg.num_classes
    if len(labels) and int(labels.max()) >= n_cls:
        raise ValueError(f"dataset has label {int(labels.max())} but model has {n_cls} classes")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=0.0, weight_decay=cfg.weight_decay)
    peak = cfg.base_lr * cfg.batch_size / 256
    n = len(images)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        loss_sum = 0.0
        for i in range(steps_per_epoch):
            idx = order[i * cfg.batch_size : (i + 1) * cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            if cfg.augment:
                xb = augment_batch(xb, gen)
            _set_lr(opt, lr_at(step, total, warmup, peak))
            loss = F.cross_entropy(model(xb), yb, label_smoothing=cfg.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item()
            step += 1
        model.eval()
        rec = {"epoch": epoch, "loss": loss_sum / steps_per_epoch}
        if eval_set is not None:
            rec["eval_acc"] = _accuracy(model, *eval_set)
        history.append(rec)
        log.info("finetune epoch %d: %s", epoch, rec)
    model.eval()
    ev = eval_set if eval_set is not None else (images, labels)
    model.history = history
    model.clean_accuracy = _accuracy(model, *ev)
    return model
