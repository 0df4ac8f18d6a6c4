"""Command-line entry point: ``robustmae <stage> [--config F] [--preset P] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import PRESETS, STAGES, load_config


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustmae", description=__doc__)
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", help="YAML file overriding the preset")
    p.add_argument("--preset", default="desk-cifar", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        from .harness import run_stage

        cfg = load_config(args.config, args.preset, stage=args.stage, seed=args.seed, out=args.out)
        result = run_stage(cfg)
    except Exception as e:  # noqa: BLE001 - every failure becomes one diagnostic line
        print(f"robustmae {args.stage}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(json.dumps({"stage": args.stage, "out": cfg.out, **result}, default=float))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
