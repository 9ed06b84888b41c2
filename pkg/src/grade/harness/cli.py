"""Command-line entry point: ``grade {gen-data,pretrain,train,eval,ablate}``."""
from __future__ import annotations

import argparse
import logging
import sys

from grade.dirichlet import DegenerateParamsError
from grade.harness import pipeline
from grade.harness.config import ConfigError, RunConfig, load_config
from grade.policy import CheckpointError, CheckpointNotFound, TrainingDivergence
from grade.simenv import DatasetFormatError

EXIT_USAGE, EXIT_MISSING, EXIT_DIVERGED = 2, 3, 4

DEFAULT_SWEEP = "group_size=5,10,20; alpha=C,5,10,15; reward=full"


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration file")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", metavar="DIR", help="override the output directory")
    common.add_argument("--workers", type=int, help="worker threads for group sampling")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="grade", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic train/test sessions")
    sub.add_parser("pretrain", parents=[common], help="Stage 1 LambdaLoss pretraining (SP checkpoint)")
    sub.add_parser("train", parents=[common], help="Stage 2 GRPO fine-tuning (GRADE checkpoint)")
    ev = sub.add_parser("eval", parents=[common], help="NDCG comparison table on held-out sessions")
    ev.add_argument("--checkpoint", action="append", metavar="PATH",
                    help="checkpoint to evaluate (repeatable); default: SP and GRADE")
    ab = sub.add_parser("ablate", parents=[common], help="sweep group size, concentration and reward")
    ab.add_argument("--sweep", default=DEFAULT_SWEEP,
                    help=f'axes as "key=v1,v2; ..." (default: "{DEFAULT_SWEEP}")')
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(seed=args.seed, workers=args.workers, out=args.out)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        if args.command == "gen-data":
            pipeline.run_gen_data(cfg)
        elif args.command == "pretrain":
            pipeline.run_pretrain(cfg)
        elif args.command == "train":
            pipeline.run_train(cfg)
        elif args.command == "eval":
            pipeline.run_eval(cfg, args.checkpoint)
        elif args.command == "ablate":
            pipeline.run_ablate(cfg, args.sweep)
    except ConfigError as exc:
        print(f"grade: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (pipeline.MissingArtifact, CheckpointNotFound) as exc:
        print(f"grade: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CheckpointError, DatasetFormatError) as exc:
        print(f"grade: unreadable input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergence, DegenerateParamsError) as exc:
        print(f"grade: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
