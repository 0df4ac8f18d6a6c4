import pytest
import torch
from torch import nn

from robustmae.data import synthetic_images
from robustmae.model import ViTClassifier, ViTConfig
from robustmae.pretrain import FinetuneConfig, finetune_supervised

torch.set_num_threads(1)

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def tiny_config(**kw) -> ViTConfig:
    base = dict(image_size=16, patch_size=4, channels=3, depth=2, width=32, heads=2, num_classes=10,
                decoder_depth=1, decoder_width=32, decoder_heads=2)
    base.update(kw)
    return ViTConfig(**base)


class LinearModel(nn.Module):
    """logits = W @ flatten(x) + b."""

    def __init__(self, weight, bias=None):
        super().__init__()
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(len(weight), dtype=weight.dtype) if bias is None else bias)

    def forward(self, x):
        return x.reshape(len(x), -1) @ self.weight.T + self.bias


class ConstantModel(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.register_buffer("logits", logits)

    def forward(self, x):
        return self.logits.expand(len(x), -1).clone()


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return ViTClassifier(tiny_config()).eval()


@pytest.fixture(scope="session")
def toy_data():
    x, y = synthetic_images(1500, seed=0, size=16)
    vx, vy = synthetic_images(400, seed=1, size=16)
    return x, y, vx, vy


@pytest.fixture(scope="session")
def trained_toy(toy_data):
    """Tiny ViT trained on the 16x16 synthetic set (session cached)."""
    x, y, vx, vy = toy_data
    torch.manual_seed(0)
    model = ViTClassifier(tiny_config(width=48))
    cfg = FinetuneConfig(epochs=12, warmup_epochs=1, base_lr=2e-3, batch_size=128, augment=False)
    finetune_supervised(model, x, y, cfg, seed=0, eval_set=(vx, vy))
    return model.eval()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """All CLI stages of the synthetic smoke preset, run once per session."""
    from robustmae.cli import main

    out = tmp_path_factory.mktemp("smoke")
    for stage in ("pretrain", "finetune", "attack", "cluster", "train-prompts", "evaluate", "analyze", "report"):
        assert main([stage, "--preset", "smoke", "--out", str(out)]) == 0, stage
    return out
