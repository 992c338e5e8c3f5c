"""``dmfuse`` command-line entry point."""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from ..config import FusionConfig, load
from ..data import DatasetError
from .ablation import MODES, run_ablation
from .checkpoint import CheckpointError
from .commands import cmd_eval, cmd_fuse, cmd_phantom, cmd_train_fusion, cmd_train_recon

# exit status per failure class
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_TRAINING = 5
EXIT_OTHER = 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out-dir", help="override [run] out_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dmfuse", description="Diffusion-feature multimodal image fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom", parents=[common], help="render the synthetic phantom dataset")

    p = sub.add_parser("train-recon", parents=[common], help="Stage I: train the reconstructor")
    p.add_argument("--data", help="dataset directory or manifest (default: [data] root)")

    p = sub.add_parser("train-fusion", parents=[common], help="Stage II: train the fusion network")
    p.add_argument("--data")
    p.add_argument("--recon", required=True, help="reconstructor checkpoint")

    p = sub.add_parser("fuse", parents=[common], help="fuse test pairs or a single pair")
    p.add_argument("--data")
    p.add_argument("--recon", required=True)
    p.add_argument("--fusion", required=True, help="fusion checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--pair", nargs=2, metavar=("A_PNG", "B_PNG"), help="fuse one pair instead of a split")

    p = sub.add_parser("eval", parents=[common], help="score fused images against their sources")
    p.add_argument("--data")
    p.add_argument("--fused", required=True, help="directory written by `dmfuse fuse`")
    p.add_argument("--split", default="test")

    p = sub.add_parser("ablate", parents=[common], help="run one ablation study")
    p.add_argument("--mode", required=True, help=f"one of: {', '.join(MODES)}")
    p.add_argument("--data")
    p.add_argument("--recon", help="reuse this Stage I checkpoint instead of training one")
    return parser


def resolve_config(args) -> FusionConfig:
    config = load(args.config) if args.config else FusionConfig()
    run = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.out_dir is not None:
        run["out_dir"] = args.out_dir
    return config.replace(run=run) if run else config


def dispatch(args, config: FusionConfig):
    out = config.run.out_dir
    if args.command == "phantom":
        return cmd_phantom(config, out)
    if args.command == "train-recon":
        return cmd_train_recon(config, out, args.data)
    if args.command == "train-fusion":
        return cmd_train_fusion(config, out, args.recon, args.data)
    if args.command == "fuse":
        return cmd_fuse(config, out, args.recon, args.fusion, args.data, args.split, args.pair)
    if args.command == "eval":
        return cmd_eval(config, out, args.fused, args.data, args.split)
    if args.command == "ablate":
        return run_ablation(config, args.mode, out, args.data, args.recon)
    raise AssertionError(args.command)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
    except (OSError, ValueError) as exc:
        print(f"dmfuse: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "ablate" and args.mode not in MODES:
        print(f"dmfuse: config error: unknown ablation mode {args.mode!r}; expected one of {', '.join(MODES)}",
              file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = dispatch(args, config)
    except DatasetError as exc:
        print(f"dmfuse: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"dmfuse: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FloatingPointError as exc:
        print(f"dmfuse: training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (OSError, ValueError) as exc:
        print(f"dmfuse: error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    if isinstance(result, list):
        print(f"wrote {len(result)} file(s) under {config.run.out_dir}")
    else:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
