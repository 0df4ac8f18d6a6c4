"""CIFAR-10 binary-format ingestion and a synthetic stand-in dataset."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

RECORD = 3073
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    train_images: torch.Tensor
    train_labels: torch.Tensor
    test_images: torch.Tensor
    test_labels: torch.Tensor
    num_classes: int = 10

    def limit(self, train: int | None = None, test: int | None = None) -> "Dataset":
        return Dataset(self.train_images[:train], self.train_labels[:train],
                       self.test_images[:test], self.test_labels[:test], self.num_classes)


def parse_cifar_bytes(raw: bytes, name: str = "<bytes>"):
    """Decode records of 1 label byte + 3072 pixel bytes (R, G, B planes)."""
    if len(raw) % RECORD:
        offset = (len(raw) // RECORD) * RECORD
        raise FormatError(f"{name}: truncated record at byte offset {offset} "
                          f"(file length {len(raw)} is not a multiple of {RECORD})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD)
    labels = arr[:, 0]
    bad = np.nonzero(labels >= 10)[0]
    if len(bad):
        raise FormatError(f"{name}: label byte {labels[bad[0]]} >= 10 at byte offset {bad[0] * RECORD}")
    images = arr[:, 1:].reshape(-1, 3, 32, 32)
    return torch.from_numpy(images.astype(np.float32) / 255.0), torch.from_numpy(labels.astype(np.int64))


def read_cifar_file(path) -> tuple[torch.Tensor, torch.Tensor]:
    path = Path(path)
    return parse_cifar_bytes(path.read_bytes(), str(path))


def load_cifar10(directory) -> Dataset:
    directory = Path(directory)
    missing = [f for f in TRAIN_FILES + [TEST_FILE] if not (directory / f).exists()]
    if missing:
        raise FileNotFoundError(f"{directory}: missing CIFAR-10 files {missing}")
    parts = [read_cifar_file(directory / f) for f in TRAIN_FILES]
    tx, ty = read_cifar_file(directory / TEST_FILE)
    return Dataset(torch.cat([p[0] for p in parts]), torch.cat([p[1] for p in parts]), tx, ty)


def locate_cifar10(default="data/cifar-10-batches-bin") -> Path | None:
    """Directory holding the CIFAR-10 binary batches, or None.

    ``$ROBUSTMAE_CIFAR10`` takes precedence over ``default``.
    """
    for cand in (os.environ.get("ROBUSTMAE_CIFAR10"), default):
        if cand and all((Path(cand) / f).exists() for f in TRAIN_FILES + [TEST_FILE]):
            return Path(cand)
    return None


def encode_cifar(images: torch.Tensor, labels: torch.Tensor) -> bytes:
    px = (images.clamp(0, 1) * 255).round().to(torch.uint8).reshape(len(images), -1).numpy()
    lab = labels.to(torch.uint8).numpy()[:, None]
    return np.concatenate([lab, px], axis=1).tobytes()


def write_cifar_dir(directory, data: Dataset) -> None:
    """Write ``data`` as the five training batches plus the test batch."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    chunks = np.array_split(np.arange(len(data.train_images)), len(TRAIN_FILES))
    for name, idx in zip(TRAIN_FILES, chunks):
        idx = torch.from_numpy(idx)
        _atomic_bytes(directory / name, encode_cifar(data.train_images[idx], data.train_labels[idx]))
    _atomic_bytes(directory / TEST_FILE, encode_cifar(data.test_images, data.test_labels))


def _atomic_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def synthetic_images(n: int, seed: int = 0, size: int = 32, num_classes: int = 10):
    """Procedural 10-class RGB images with low- and mid-frequency class cues.

    Each class owns a grating orientation/frequency pair and a color bias;
    random phase, amplitude, background gradient and pixel noise vary per
    image. Pixels are quantized to 8 bits so the set round-trips through the
    CIFAR binary format.
    """
    gen = torch.Generator().manual_seed(seed)
    labels = torch.randint(num_classes, (n,), generator=gen)
    yy, xx = torch.meshgrid(torch.arange(size, dtype=torch.float32), torch.arange(size, dtype=torch.float32),
                            indexing="ij")
    theta = labels.float() * math.pi / num_classes
    freq = 1.5 + 2.5 * (labels % 3).float()
    phase = torch.rand(n, generator=gen) * 2 * math.pi
    proj = (torch.cos(theta)[:, None, None] * xx + torch.sin(theta)[:, None, None] * yy) / size
    grating = torch.sin(2 * math.pi * freq[:, None, None] * proj + phase[:, None, None])
    palette = torch.rand(num_classes, 3, generator=torch.Generator().manual_seed(1234)) * 0.6 + 0.2
    color = palette[labels] + 0.1 * torch.randn(n, 3, generator=gen)
    amp = 0.15 + 0.1 * torch.rand(n, 1, 1, 1, generator=gen)
    slope = 0.2 * torch.randn(n, 2, generator=gen)
    bg = slope[:, 0, None, None] * (xx / size - 0.5) + slope[:, 1, None, None] * (yy / size - 0.5)
    img = color[:, :, None, None] + amp * grating[:, None] + bg[:, None]
    img = img + 0.05 * torch.randn(n, 3, size, size, generator=gen)
    img = (img.clamp(0, 1) * 255).round() / 255
    return img, labels


def synthetic_dataset(n_train: int = 5000, n_test: int = 1000, seed: int = 0) -> Dataset:
    tx, ty = synthetic_images(n_train, seed)
    vx, vy = synthetic_images(n_test, seed + 1)
    return Dataset(tx, ty, vx, vy)
