"""Run the full desk CIFAR-10 pipeline stage by stage.

    python scripts/run_desk_cifar.py --data data/cifar-10-batches-bin --out runs/desk-cifar

Stages whose checkpoint already exists are skipped unless --force is given.
"""

import argparse
import sys
from pathlib import Path

import yaml

from robustmae.cli import main as cli_main
from robustmae.data import locate_cifar10

STAGES = [
    ("pretrain", "mae.rmae"),
    ("finetune", "classifier.rmae"),
    ("attack", None),
    ("cluster", "clusters.rmae"),
    ("train-prompts", "prompts.rmae"),
    ("evaluate", None),
    ("analyze", None),
    ("report", None),
]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", default="data/cifar-10-batches-bin")
    p.add_argument("--out", default="runs/desk-cifar")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="optional YAML overrides")
    p.add_argument("--force", action="store_true")
    args = p.parse_args(argv)

    root = locate_cifar10(args.data)
    if root is None:
        print(f"CIFAR-10 binary batches not found at {args.data} or $ROBUSTMAE_CIFAR10", file=sys.stderr)
        return 1
    out = Path(args.out)
    override = out / "_data_override.yaml"
    out.mkdir(parents=True, exist_ok=True)
    extra = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    extra = extra or {}
    extra.setdefault("data", {})["path"] = str(root)
    override.write_text(yaml.safe_dump(extra))
    for stage, artifact in STAGES:
        if artifact and (out / artifact).exists() and not args.force:
            print(f"[skip] {stage}: {artifact} exists")
            continue
        cmd = [stage, "--preset", "desk-cifar", "--seed", str(args.seed), "--out", str(out),
               "--config", str(override)]
        print(f"[run] {' '.join(cmd)}", flush=True)
        code = cli_main(cmd)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
