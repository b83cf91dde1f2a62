"""Trainer command line: train checkpoints, serve them over PSP/1."""

from __future__ import annotations

import argparse
import json
import sys

from .config import TrainerConfig
from .serve import serve
from .train import train_two_stage


def cmd_train(args) -> int:
    cfg = TrainerConfig(
        epochs=args.epochs,
        stage1_patch=args.stage1_patch,
        stage2_patch=args.stage2_patch,
        steps_per_epoch=args.steps_per_epoch,
        seed=args.seed,
    )
    result = train_two_stage(args.manifest, cfg, args.out)
    summary = {
        "stage1": result["stage1"],
        "stage2": result["stage2"],
        "log": result["log"],
        "elapsed_s": round(result["elapsed_s"], 2),
        "final_gen_total": result["history"][-1]["gen_total"],
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_serve(args) -> int:
    return serve(checkpoint=args.checkpoint, stage=args.stage, echo=args.echo)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesseltrainer")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train", help="train both stages on a phantom cohort")
    p.add_argument("--manifest", required=True,
                   help="cohort manifest; cases need csa_map entries for stage 2")
    p.add_argument("--out", required=True, help="checkpoint/log output directory")
    p.add_argument("--epochs", type=int, default=TrainerConfig.epochs)
    p.add_argument("--stage1-patch", type=int, default=TrainerConfig.stage1_patch)
    p.add_argument("--stage2-patch", type=int, default=TrainerConfig.stage2_patch)
    p.add_argument("--steps-per-epoch", type=int, default=TrainerConfig.steps_per_epoch)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("serve", help="answer PSP/1 patch requests on stdin/stdout")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--stage", type=int, default=None)
    p.add_argument("--echo", action="store_true", help="identity mode for protocol tests")
    p.set_defaults(func=cmd_serve)

    return parser


def main() -> None:
    args = build_parser().parse_args()
    sys.exit(args.func(args))


if __name__ == "__main__":
    main()
