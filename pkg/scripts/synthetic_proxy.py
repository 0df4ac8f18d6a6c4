"""Trend check on synthetic data when CIFAR-10 is not available.

Trains the desk pipeline on procedurally generated 32x32 images and prints the
same three curves the CIFAR acceptance runs look at: PGD-20 robust accuracy
against epsilon, bare versus prompt-defended accuracy at 2/255, and the
low-pass sweep. The numbers are indicative only. Synthetic images are far
easier than CIFAR-10, so thresholds tuned for CIFAR do not transfer.

    python scripts/synthetic_proxy.py --out runs/synthetic-proxy [--quick]
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

from robustmae.attacks import AttackConfig
from robustmae.config import DataConfig, EvalConfig, preset
from robustmae.data import synthetic_images
from robustmae.frequency import accuracy, lowpass_sweep
from robustmae.harness import build_pipeline, evaluate, load_model, run_stage
from robustmae.model import ViTConfig

EPSILONS = [0, 1, 2, 4, 8]


def proxy_config(out: str, quick: bool, seed: int):
    cfg = preset("desk-cifar")
    scale = 4 if quick else 1
    return dataclasses.replace(
        cfg,
        seed=seed,
        out=out,
        data=DataConfig(source="synthetic", synthetic_train=4000 // scale, synthetic_test=500 // scale),
        model=ViTConfig(image_size=32, patch_size=4, depth=4, width=64, heads=4,
                        decoder_depth=1, decoder_width=64, decoder_heads=2),
        pretrain=dataclasses.replace(cfg.pretrain, epochs=10 // scale + 1, warmup_epochs=1, base_lr=1.5e-3,
                                     perceptual_layers=(2, 4)),
        finetune=dataclasses.replace(cfg.finetune, epochs=20 // scale, warmup_epochs=2, base_lr=2e-3),
        defense=dataclasses.replace(cfg.defense, n_clusters=16, epochs=10 // scale, warmup_epochs=1,
                                    base_lr=1e-2),
        attacks=[AttackConfig(kind="pgd", norm="linf", epsilon=e / 255, steps=20) for e in EPSILONS],
        eval=EvalConfig(samples=500 // scale, batch_size=100, analysis_batch=64),
    )


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/synthetic-proxy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="quarter-size data and schedules")
    args = p.parse_args(argv)
    torch.set_num_threads(max(1, torch.get_num_threads()))

    cfg = proxy_config(args.out, args.quick, args.seed)
    for stage in ("pretrain", "finetune", "cluster", "train-prompts"):
        print(json.dumps({"stage": stage, **run_stage(dataclasses.replace(cfg, stage=stage))}), flush=True)

    model, _ = load_model(Path(cfg.out) / "classifier.rmae")
    pipe = build_pipeline(cfg, model)
    x, y = synthetic_images(cfg.data.synthetic_test, seed=cfg.seed + 1, size=32)
    x, y = x[: cfg.eval.samples], y[: cfg.eval.samples]

    bare = evaluate(model, x, y, cfg.attacks, "classifier", "none", cfg.seed)
    defended = evaluate(pipe, x, y, cfg.attacks[:3], "classifier", "prompt", cfg.seed)
    print("\nPGD-20 robust accuracy (percent)")
    print("eps*255  bare    defended")
    def_by_eps = {round(r.epsilon * 255): r.robust_acc for r in defended.rows}
    for r in bare.rows:
        e = round(r.epsilon * 255)
        d = def_by_eps.get(e)
        print(f"{e:>7}  {r.robust_acc:6.1f}  {'' if d is None else f'{d:6.1f}'}")

    print("\nLow-pass sweep (radius, accuracy)")
    for radius, acc in lowpass_sweep(model, x, y, [2, 4, 8, 16, "all"]):
        print(f"{radius:7.2f}  {acc:6.1f}")
    print(f"clean accuracy {accuracy(model, x, y):.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
