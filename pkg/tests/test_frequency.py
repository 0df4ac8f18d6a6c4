import numpy as np
import pytest
import scipy.fft
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from conftest import ConstantModel
from oracles import brute_dct2, brute_dft_centered, brute_idft_centered
from robustmae.frequency import (
    accuracy,
    all_pass_radius,
    dct2,
    fft2_centered,
    freq_saliency,
    highpass_filter,
    idct2,
    ifft2_centered,
    lowpass_filter,
    lowpass_sweep,
    radial_mask,
)


def test_zero_and_constant_spectrum():
    assert torch.equal(fft2_centered(torch.zeros(1, 4, 4)).abs(), torch.zeros(1, 4, 4))
    spec = fft2_centered(torch.full((4, 4), 0.3, dtype=torch.float64))
    expected = torch.zeros(4, 4, dtype=torch.complex128)
    expected[2, 2] = 0.3 * 16
    assert torch.allclose(spec, expected, atol=1e-12)


def test_fft_2x2_brute_force():
    x = np.array([[1.0, 0.0], [0.0, 0.0]])
    spec = fft2_centered(torch.tensor(x)).numpy()
    assert np.allclose(spec, brute_dft_centered(x), atol=1e-12)


def test_fft_4x4_brute_force():
    rng = np.random.default_rng(0)
    x = rng.random((4, 4))
    spec = fft2_centered(torch.tensor(x)).numpy()
    assert np.allclose(spec, brute_dft_centered(x), atol=1e-10)
    back = ifft2_centered(torch.tensor(spec)).numpy()
    assert np.allclose(back, brute_idft_centered(spec).real, atol=1e-10)


def test_round_trips():
    x = torch.rand(4, 3, 32, 32)
    assert (ifft2_centered(fft2_centered(x)) - x).abs().max() < 1e-5
    assert (idct2(dct2(x)) - x).abs().max() < 1e-5
    assert torch.equal(ifft2_centered(torch.zeros(3, 8, 8, dtype=torch.complex64)), torch.zeros(3, 8, 8))


def test_parseval():
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    spec = fft2_centered(x)
    lhs = (spec.abs() ** 2).sum() / (32 * 32)
    rhs = (x**2).sum()
    assert abs(lhs - rhs) / rhs < 1e-4


def test_hermitian_symmetry_of_real_spectra():
    n = 8
    x = torch.rand(3, n, n, dtype=torch.float64)
    s = fft2_centered(x)
    c = n // 2
    for a in range(1, n):
        for b in range(1, n):
            # (a, b) has frequency (a-c, b-c); its negation sits at (2c-a, 2c-b)
            assert abs(s[:, a, b] - s[:, 2 * c - a, 2 * c - b].conj()).max() < 1e-6


def test_symmetrized_random_spectrum_inverts_to_real():
    n = 8
    spec = torch.randn(n, n, dtype=torch.complex128)
    # negation about the center for an even grid: index k -> (n - k) mod n, after un-shifting
    unshifted = torch.fft.ifftshift(spec)
    flipped = torch.roll(torch.flip(unshifted, dims=(0, 1)), shifts=(1, 1), dims=(0, 1)).conj()
    sym = torch.fft.fftshift((unshifted + flipped) / 2)
    inv = torch.fft.ifft2(torch.fft.ifftshift(sym))
    assert inv.imag.abs().max() < 1e-5


def test_dct_constant_and_oracle():
    x = torch.full((1, 4, 4), 0.7, dtype=torch.float64)
    c = dct2(x)[0]
    assert abs(c[0, 0] - 0.7 * 4) < 1e-12
    c[0, 0] = 0
    assert c.abs().max() < 1e-12
    rng = np.random.default_rng(1)
    r = rng.random((4, 4))
    ours = dct2(torch.tensor(r)).numpy()
    assert np.allclose(ours, brute_dct2(r), atol=1e-12)
    assert np.allclose(ours, scipy.fft.dctn(r, type=2, norm="ortho"), atol=1e-12)


def test_radial_mask_geometry():
    low = radial_mask(8, 1)
    assert low.sum() == 5 and low[4, 4] == 1 and low[4, 5] == 1 and low[5, 5] == 0
    assert torch.equal(low + radial_mask(8, 1, "pass-high"), torch.ones(8, 8))
    assert radial_mask(32, 4, "pass-high")[16, 20] == 0  # boundary is low band
    assert radial_mask(32, all_pass_radius(32)).all()
    with pytest.raises(ValueError):
        radial_mask(8, 1, "band")


def test_lowpass_all_pass_and_dc():
    x = torch.rand(2, 3, 16, 16)
    assert (lowpass_filter(x, all_pass_radius(16)) - x).abs().max() < 1e-5
    assert (lowpass_filter(x, 100) - x).abs().max() < 1e-5
    dc = lowpass_filter(x, 0)
    assert (dc - x.mean(dim=(-2, -1), keepdim=True)).abs().max() < 1e-5
    with pytest.raises(ValueError):
        lowpass_filter(x, -1)


def test_lowpass_checkerboard_masked_dft_oracle():
    i = np.arange(8)
    board = ((i[:, None] + i[None, :]) % 2).astype(float)
    out = lowpass_filter(torch.tensor(board), 1).numpy()
    spec = brute_dft_centered(board)
    keep = radial_mask(8, 1, dtype=torch.float64).numpy()
    ref = np.clip(brute_idft_centered(spec * keep).real, 0, 1)
    assert np.allclose(out, ref, atol=1e-10)
    # all energy above the DC term sits at the Nyquist corner, so nothing but the mean survives
    assert np.allclose(out, 0.5, atol=1e-10)


def test_mask_complementarity():
    x = torch.rand(3, 3, 32, 32)
    for r in (0, 2, 4, 8.5):
        assert (lowpass_filter(x, r, clip=False) + highpass_filter(x, r) - x).abs().max() < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=4), st.integers(min_value=0, max_value=2**31 - 1))
def test_fft_round_trip_property(half, seed):
    n = 2 * half
    x = torch.rand(2, n, n, generator=torch.Generator().manual_seed(seed))
    assert (ifft2_centered(fft2_centered(x)) - x).abs().max() < 1e-5
    assert (idct2(dct2(x)) - x).abs().max() < 1e-5


class OneCoefficientModel(nn.Module):
    """Logits (a * dct2(x)[c, i, j], 0)."""

    def __init__(self, c, i, j, a=2.0):
        super().__init__()
        self.c, self.i, self.j, self.a = c, i, j, a

    def forward(self, x):
        v = self.a * dct2(x)[:, self.c, self.i, self.j]
        return torch.stack([v, torch.zeros_like(v)], dim=1)


def test_saliency_constant_model_is_zero():
    m = ConstantModel(torch.tensor([0.2, 0.1]))
    sal = freq_saliency(m, torch.rand(3, 3, 8, 8), torch.tensor([0, 1, 0]))
    assert torch.equal(sal, torch.zeros(8, 8))


def test_saliency_single_coefficient():
    m = OneCoefficientModel(1, 2, 5)
    sal = freq_saliency(m, torch.rand(4, 3, 8, 8, dtype=torch.float64), torch.tensor([0, 1, 1, 0]))
    assert sal.shape == (8, 8) and (sal >= 0).all()
    assert sal[2, 5] > 0
    sal[2, 5] = 0
    assert sal.abs().max() < 1e-12


def test_saliency_on_vit(tiny_model):
    sal = freq_saliency(tiny_model, torch.rand(4, 3, 16, 16), torch.tensor([0, 1, 2, 3]))
    assert sal.shape == (16, 16) and (sal >= 0).all() and sal.sum() > 0


def test_sweep_end_points(trained_toy, toy_data):
    _, _, vx, vy = toy_data
    vx, vy = vx[:200], vy[:200]
    clean = accuracy(trained_toy, vx, vy)
    curve = lowpass_sweep(trained_toy, vx, vy, [0, 2, "all"])
    assert curve[-1][0] == pytest.approx(all_pass_radius(16))
    assert abs(curve[-1][1] - clean) <= 0.1
    means = vx.mean(dim=(-2, -1), keepdim=True).expand_as(vx).contiguous()
    assert curve[0][1] == accuracy(trained_toy, means, vy)
    with pytest.raises(ValueError):
        lowpass_sweep(trained_toy, vx, vy, [])
