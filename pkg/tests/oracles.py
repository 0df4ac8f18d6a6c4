"""Direct-sum reference implementations used as test oracles."""

import math

import numpy as np


def brute_dft_centered(x: np.ndarray) -> np.ndarray:
    """Direct O(N^4) DFT with the zero frequency moved to (H//2, W//2)."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for a in range(h):
        for b in range(w):
            u, v = a - h // 2, b - w // 2
            s = 0j
            for m in range(h):
                for n in range(w):
                    s += x[m, n] * np.exp(-2j * np.pi * (u * m / h + v * n / w))
            out[a, b] = s
    return out


def brute_idft_centered(spec: np.ndarray) -> np.ndarray:
    h, w = spec.shape
    out = np.zeros((h, w), dtype=complex)
    for m in range(h):
        for n in range(w):
            s = 0j
            for a in range(h):
                for b in range(w):
                    u, v = a - h // 2, b - w // 2
                    s += spec[a, b] * np.exp(2j * np.pi * (u * m / h + v * n / w))
            out[m, n] = s / (h * w)
    return out


def brute_dct2(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    out = np.zeros_like(x, dtype=float)
    for k in range(n):
        for l in range(n):
            s = 0.0
            for i in range(n):
                for j in range(n):
                    s += x[i, j] * math.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.cos(
                        math.pi * (2 * j + 1) * l / (2 * n))
            ck = math.sqrt(1 / n) if k == 0 else math.sqrt(2 / n)
            cl = math.sqrt(1 / n) if l == 0 else math.sqrt(2 / n)
            out[k, l] = ck * cl * s
    return out


def brute_cka(x, y):
    """CKA from explicit Gram matrices and the centering matrix, by index loops."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    n = len(x)
    k = [[sum(x[i, a] * x[j, a] for a in range(x.shape[1])) for j in range(n)] for i in range(n)]
    l = [[sum(y[i, a] * y[j, a] for a in range(y.shape[1])) for j in range(n)] for i in range(n)]
    h = [[(1.0 if i == j else 0.0) - 1.0 / n for j in range(n)] for i in range(n)]

    def mm(a, b):
        return [[sum(a[i][t] * b[t][j] for t in range(n)) for j in range(n)] for i in range(n)]

    def hsic(a, b):
        m = mm(mm(mm(a, h), b), h)
        return sum(m[i][i] for i in range(n)) / (n - 1) ** 2

    return hsic(k, l) / np.sqrt(hsic(k, k) * hsic(l, l))
