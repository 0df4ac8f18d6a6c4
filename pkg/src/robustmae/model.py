"""Small vision transformer classifier and masked autoencoder.

Both models share the same encoder layout (patch embedding, class token,
learned 1-D positional embeddings, pre-norm blocks, final LayerNorm), so the
encoder weights of a pretrained :class:`MAE` load directly into a
:class:`ViTClassifier`.

Images are batched ``(B, C, H, W)`` float tensors with pixels in ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class NonFiniteActivation(RuntimeError):
    def __init__(self, layer: int):
        super().__init__(f"non-finite activation at layer {layer}")
        self.layer = layer


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    depth: int = 6
    width: int = 192
    heads: int = 3
    num_classes: int = 10
    mlp_ratio: float = 4.0
    decoder_depth: int = 2
    decoder_width: int = 96
    decoder_heads: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.decoder_width % self.decoder_heads:
            raise ValueError("decoder_width must be divisible by decoder_heads")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, S, p*p*C), patches in row-major order.

    Each patch is flattened as (row, col, channel).
    """
    if images.dim() == 3:
        return patchify(images.unsqueeze(0), patch_size)[0]
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


def unpatchify(patches: torch.Tensor, patch_size: int, channels: int) -> torch.Tensor:
    if patches.dim() == 2:
        return unpatchify(patches.unsqueeze(0), patch_size, channels)[0]
    b, s, d = patches.shape
    if d != patch_size * patch_size * channels:
        raise ValueError(f"patch dim {d} does not match {patch_size}x{patch_size}x{channels}")
    g = int(round(s**0.5))
    if g * g != s:
        raise ValueError(f"{s} patches do not form a square grid")
    x = patches.reshape(b, g, g, patch_size, patch_size, channels)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, channels, g * patch_size, g * patch_size)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (d // self.heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    """Patch embedding + class token + positional embeddings + blocks + norm."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.width)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.num_patches, cfg.width))
        self.blocks = nn.ModuleList(
            Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.width)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def tokens(self, images, keep_idx=None):
        """Embed images; ``keep_idx`` (B, K) selects visible patches."""
        x = self.patch_embed(patchify(images, self.cfg.patch_size))
        x = x + self.pos_embed[:, 1:]
        if keep_idx is not None:
            x = torch.gather(x, 1, keep_idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        cls = (self.cls_token + self.pos_embed[:, :1]).expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1)

    def forward(self, images, keep_idx=None, return_all=False, check_finite=False):
        x = self.tokens(images, keep_idx)
        layers = []
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if check_finite and not torch.isfinite(x).all():
                raise NonFiniteActivation(i)
            if return_all:
                layers.append(x)
        x = self.norm(x)
        if check_finite and not torch.isfinite(x).all():
            raise NonFiniteActivation(len(self.blocks))
        if return_all:
            layers.append(x)
            return layers
        return x


class ViTClassifier(nn.Module):
    """Encoder with a linear head on the normalized class token."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.head = nn.Linear(cfg.width, cfg.num_classes)
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, images):
        return self.head(self.encoder(images)[:, 0])

    def features(self, images) -> list[torch.Tensor]:
        """Per-layer token features: ``depth`` block outputs then the normed output."""
        return self.encoder(images, return_all=True)


class MAE(nn.Module):
    """Masked autoencoder with raw-pixel reconstruction targets.

    The encoder sees only visible patches; the decoder receives the encoded
    tokens plus a shared mask token at every masked position.
    """

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        dw = cfg.decoder_width
        self.decoder_embed = nn.Linear(cfg.width, dw)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dw))
        self.decoder_pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.num_patches, dw))
        self.decoder_blocks = nn.ModuleList(
            Block(dw, cfg.decoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)
        )
        self.decoder_norm = nn.LayerNorm(dw)
        self.decoder_pred = nn.Linear(dw, cfg.patch_dim)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.decoder_pos_embed, std=0.02)

    def encode(self, images, keep_idx):
        return self.encoder(images, keep_idx=keep_idx)

    def decode(self, latent, keep_idx):
        """Return per-patch predictions ``(B, S, patch_dim)`` for all S positions."""
        b = latent.shape[0]
        s = self.cfg.num_patches
        x = self.decoder_embed(latent)
        dw = x.shape[-1]
        full = self.mask_token.expand(b, s, dw).clone()
        full = full.scatter(1, keep_idx.unsqueeze(-1).expand(-1, -1, dw), x[:, 1:])
        x = torch.cat([x[:, :1], full], dim=1) + self.decoder_pos_embed
        for blk in self.decoder_blocks:
            x = blk(x)
        return self.decoder_pred(self.decoder_norm(x))[:, 1:]

    def forward(self, images, keep_idx):
        return self.decode(self.encode(images, keep_idx), keep_idx)


def classifier_from_mae(mae: MAE, num_classes: int | None = None) -> ViTClassifier:
    cfg = mae.cfg
    if num_classes is not None and num_classes != cfg.num_classes:
        cfg = ViTConfig(**{**cfg.__dict__, "num_classes": num_classes})
    clf = ViTClassifier(cfg)
    clf.encoder.load_state_dict(mae.encoder.state_dict())
    return clf


def forward_classify(model: nn.Module, images: torch.Tensor) -> torch.Tensor:
    """Evaluation-mode logits; raises :class:`NonFiniteActivation` on NaN/inf."""
    single = images.dim() == 3
    if single:
        images = images.unsqueeze(0)
    with torch.no_grad():
        if isinstance(model, ViTClassifier):
            logits = model.head(model.encoder(images, check_finite=True)[:, 0])
        else:
            logits = model(images)
    if not torch.isfinite(logits).all():
        depth = getattr(getattr(model, "cfg", None), "depth", 0)
        raise NonFiniteActivation(depth + 1)
    return logits[0] if single else logits


def margin_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample ``max_{j != y} z_j - z_y``; positive means misclassified."""
    true = logits.gather(1, labels[:, None])[:, 0]
    other = logits.scatter(1, labels[:, None], float("-inf")).amax(dim=1)
    return other - true


def classification_loss(logits, labels, kind: str = "ce") -> torch.Tensor:
    """Summed per-sample loss, so batched gradients equal per-sample gradients."""
    if kind in ("ce", "cross-entropy"):
        return F.cross_entropy(logits, labels, reduction="sum")
    if kind == "margin":
        return margin_loss(logits, labels).sum()
    raise ValueError(f"unknown loss kind {kind!r}")


def input_grad(model: nn.Module, images: torch.Tensor, labels, loss_kind: str = "ce") -> torch.Tensor:
    """Gradient of the classification loss with respect to the input pixels."""
    single = images.dim() == 3
    if single:
        images = images.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    x = images.detach().clone().requires_grad_(True)
    logits = model(x)
    n_cls = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"label out of range [0, {n_cls})")
    loss = classification_loss(logits, labels, loss_kind)
    grad = None
    if loss.requires_grad:
        (grad,) = torch.autograd.grad(loss, x, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    return grad[0] if single else grad
