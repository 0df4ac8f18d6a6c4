"""Frequency-domain transforms, radial masks and low-pass diagnostics.

FFT convention: unnormalized forward transform, inverse scaled by 1/(H*W),
zero frequency shifted to index (H//2, W//2). The DCT is the orthonormal
type-II transform along both spatial axes, DC at (0, 0).
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F


def fft2_centered(images: torch.Tensor) -> torch.Tensor:
    return torch.fft.fftshift(torch.fft.fft2(images), dim=(-2, -1))


def ifft2_centered(spectrum: torch.Tensor) -> torch.Tensor:
    """Real part of the inverse transform; no clipping."""
    return torch.fft.ifft2(torch.fft.ifftshift(spectrum, dim=(-2, -1))).real


def radial_mask(size: int, radius: float, polarity: str = "pass-low", dtype=torch.float32) -> torch.Tensor:
    """Binary (size, size) mask; distance measured from the center pixel.

    Entries at distance exactly ``radius`` belong to the low band.
    """
    c = size // 2
    idx = torch.arange(size, dtype=torch.float64) - c
    dist = torch.sqrt(idx[:, None] ** 2 + idx[None, :] ** 2)
    low = dist <= radius
    if polarity == "pass-low":
        m = low
    elif polarity == "pass-high":
        m = ~low
    else:
        raise ValueError(f"unknown polarity {polarity!r}")
    return m.to(dtype)


def all_pass_radius(size: int) -> float:
    """Smallest radius whose low-pass mask keeps every frequency."""
    c = size // 2
    return math.sqrt(2 * c * c)


def _band_filter(images, radius, polarity):
    mask = radial_mask(images.shape[-1], radius, polarity).to(images.device)
    return ifft2_centered(fft2_centered(images) * mask).to(images.dtype)


def lowpass_filter(images: torch.Tensor, radius: float, clip: bool = True) -> torch.Tensor:
    if radius < 0:
        raise ValueError("radius must be >= 0")
    out = _band_filter(images, radius, "pass-low")
    return out.clamp(0, 1) if clip else out


def highpass_filter(images: torch.Tensor, radius: float) -> torch.Tensor:
    """Complement of :func:`lowpass_filter` (unclipped)."""
    return _band_filter(images, radius, "pass-high")


_DCT_CACHE: dict = {}


def dct_matrix(n: int, dtype=torch.float32) -> torch.Tensor:
    """Orthonormal DCT-II matrix D with coefficients = D @ signal."""
    key = (n, dtype)
    if key not in _DCT_CACHE:
        k = np.arange(n)[:, None]
        i = np.arange(n)[None, :]
        d = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
        d[0] /= np.sqrt(2.0)
        _DCT_CACHE[key] = torch.as_tensor(d, dtype=dtype)
    return _DCT_CACHE[key]


def dct2(images: torch.Tensor) -> torch.Tensor:
    dh = dct_matrix(images.shape[-2], images.dtype).to(images.device)
    dw = dct_matrix(images.shape[-1], images.dtype).to(images.device)
    return dh @ images @ dw.T


def idct2(coeffs: torch.Tensor) -> torch.Tensor:
    dh = dct_matrix(coeffs.shape[-2], coeffs.dtype).to(coeffs.device)
    dw = dct_matrix(coeffs.shape[-1], coeffs.dtype).to(coeffs.device)
    return dh.T @ coeffs @ dw


def freq_saliency(model, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean absolute cross-entropy gradient over DCT coefficients, shape (H, W)."""
    coeffs = dct2(images.detach()).requires_grad_(True)
    logits = model(idct2(coeffs))
    loss = F.cross_entropy(logits, labels, reduction="sum")
    grad = torch.autograd.grad(loss, coeffs, allow_unused=True)[0] if loss.requires_grad else None
    if grad is None:
        return torch.zeros(images.shape[-2:], dtype=images.dtype)
    return grad.abs().mean(dim=(0, 1))


@torch.no_grad()
def accuracy(model, images, labels, batch_size: int = 256) -> float:
    correct = 0
    for i in range(0, len(images), batch_size):
        pred = model(images[i : i + batch_size]).argmax(dim=1)
        correct += (pred == labels[i : i + batch_size]).sum().item()
    return 100.0 * correct / len(images)


def lowpass_sweep(model, images, labels, radii, batch_size: int = 256) -> list[tuple[float, float]]:
    """Accuracy (percent) on low-pass filtered inputs for each radius.

    ``None`` or ``"all"`` in ``radii`` stands for the all-pass radius.
    """
    radii = list(radii)
    if not radii:
        raise ValueError("empty radius list")
    size = images.shape[-1]
    curve = []
    for r in radii:
        if r is None or r == "all" or r >= all_pass_radius(size):
            r = all_pass_radius(size)
        filtered = lowpass_filter(images, r)
        curve.append((float(r), accuracy(model, filtered, labels, batch_size)))
    return curve
