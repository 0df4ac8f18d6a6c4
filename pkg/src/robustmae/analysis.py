"""Representation diagnostics: linear CKA, adversarial feature deviation and
perturbation statistics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch


@dataclass
class CKAMap:
    values: torch.Tensor  # (rows, cols) in [0, 1]
    row_labels: list = field(default_factory=list)
    col_labels: list = field(default_factory=list)


@dataclass
class DeviationCurve:
    values: list[float]
    metric: str = "feature deviation"
    attack: str = ""


def _center(x: torch.Tensor) -> torch.Tensor:
    return x - x.mean(dim=0, keepdim=True)


def _degenerate(x, xc):
    return xc.abs().max() <= 1e-10 * max(x.abs().max().item(), 1e-300)


def linear_cka(x: torch.Tensor, y: torch.Tensor) -> float:
    """Linear CKA with the biased HSIC estimator.

    Rows are samples. Returns 0 (with a warning) when either representation
    is constant across samples, which makes its centered Gram matrix vanish.
    """
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"sample count mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    x = x.detach().reshape(x.shape[0], -1).to(torch.float64)
    y = y.detach().reshape(y.shape[0], -1).to(torch.float64)
    xc, yc = _center(x), _center(y)
    if _degenerate(x, xc) or _degenerate(y, yc):
        warnings.warn("degenerate representation (zero centered Gram); CKA reported as 0")
        return 0.0
    # tr(HKH HLH) = ||Xc^T Yc||_F^2; the (k-1)^-2 factors cancel in the ratio
    cross = (xc.T @ yc).pow(2).sum()
    self_x = (xc.T @ xc).pow(2).sum()
    self_y = (yc.T @ yc).pow(2).sum()
    return float((cross / torch.sqrt(self_x * self_y)).clamp(0.0, 1.0))


def cka_token_map(features: list[torch.Tensor], token_indices) -> CKAMap:
    """CKA between the class token and each listed token, for every layer.

    ``features`` holds one (B, T, D) tensor per layer.
    """
    token_indices = list(token_indices)
    n_tok = features[0].shape[1]
    for t in token_indices:
        if not 0 <= t < n_tok:
            raise ValueError(f"token index {t} out of range 0..{n_tok - 1}")
    vals = torch.zeros(len(features), len(token_indices), dtype=torch.float64)
    for li, f in enumerate(features):
        cls = f[:, 0]
        for ti, t in enumerate(token_indices):
            vals[li, ti] = linear_cka(cls, f[:, t])
    return CKAMap(vals, list(range(len(features))), token_indices)


def cka_layer_grid(feats_a: list[torch.Tensor], feats_b: list[torch.Tensor] | None = None) -> CKAMap:
    """CKA between every pair of layer outputs (tokens flattened per sample)."""
    same = feats_b is None
    feats_b = feats_a if same else feats_b
    vals = torch.zeros(len(feats_a), len(feats_b), dtype=torch.float64)
    for i, a in enumerate(feats_a):
        for j, b in enumerate(feats_b):
            if same and j < i:
                vals[i, j] = vals[j, i]
            else:
                vals[i, j] = linear_cka(a, b)
    return CKAMap(vals, list(range(len(feats_a))), list(range(len(feats_b))))


def layer_deviation(clean_feats: list[torch.Tensor], adv_feats: list[torch.Tensor],
                    attack: str = "") -> DeviationCurve:
    """Per-layer mean over tokens of ``||f_adv - f_clean|| / (||f_clean|| + 1e-12)``."""
    if len(clean_feats) != len(adv_feats):
        raise ValueError("layer count mismatch")
    vals = []
    for c, a in zip(clean_feats, adv_feats):
        if c.shape != a.shape:
            raise ValueError(f"shape mismatch {tuple(c.shape)} vs {tuple(a.shape)}")
        c = c.to(torch.float64)
        a = a.to(torch.float64)
        ratio = (a - c).norm(dim=-1) / (c.norm(dim=-1) + 1e-12)
        vals.append(ratio.mean().item())
    return DeviationCurve(vals, attack=attack)


def perturbation_variance(x: torch.Tensor, x_adv: torch.Tensor) -> float:
    """Per-image pixel variance of the perturbation, averaged over the batch."""
    delta = (x_adv - x).reshape(len(x), -1).to(torch.float64)
    return delta.var(dim=1, unbiased=False).mean().item()


def perturbation_render(x: torch.Tensor, x_adv: torch.Tensor):
    """Min-max normalized residual (per image) and its channel-mean gray image.

    A constant residual renders as uniform 0.5.
    """
    single = x.dim() == 3
    if single:
        x, x_adv = x.unsqueeze(0), x_adv.unsqueeze(0)
    r = (x_adv - x).to(torch.float64)
    lo = r.amin(dim=(1, 2, 3), keepdim=True)
    hi = r.amax(dim=(1, 2, 3), keepdim=True)
    span = hi - lo
    rgb = torch.where(span > 0, (r - lo) / torch.where(span > 0, span, 1.0), torch.full_like(r, 0.5))
    gray = rgb.mean(dim=1)
    return (rgb[0], gray[0]) if single else (rgb, gray)
