"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 missing dependency,
3 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig
from .errors import CompatibilityError, ConfigError, DependencyError
from .kernels import BACKEND

log = logging.getLogger("hlora_asr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors share exit code 1 with config errors; 2 means a missing dependency
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output root directory")
    common.add_argument("--checkpoint", type=Path, help="checkpoint to read")
    common.add_argument("--strategy", choices=["known", "two-stage", "single-pass"])
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="hlora-asr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate source/target synthetic corpora")
    sub.add_parser("train-base", parents=[common], help="two-phase base training on the source domain")
    sub.add_parser("train-lidlora", parents=[common], help="per-language LoRA adaptation (two-stage baseline)")
    t = sub.add_parser("train-hlora", parents=[common], help="hierarchical shared + expert LoRA adaptation")
    t.add_argument("--k", type=int, help="override the split index")
    e = sub.add_parser("eval", parents=[common], help="decode a manifest and write reports")
    e.add_argument("--manifest", type=Path, help="manifest to score (default: target dev)")
    a = sub.add_parser("ablate-k", parents=[common], help="HLoRA split-index ablation table")
    a.add_argument("--k-list", help="comma-separated split indices (default: config ablation_k)")
    c = sub.add_parser("confusion", parents=[common], help="LID confusion: two-stage vs HLoRA")
    c.add_argument("--hlora-checkpoint", type=Path, help="HLoRA checkpoint (default: <out>/checkpoints/hlora.ckpt)")
    c.add_argument("--manifest", type=Path)
    return p


def _run(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = args.out
    log.info("config %s, kernels=%s", cfg.hash, BACKEND)
    if args.command == "gen-data":
        summary = pipeline.gen_data(cfg, out)
        print(json.dumps(summary, indent=1, sort_keys=True))
    elif args.command == "train-base":
        print(pipeline.train_base_model(cfg, out))
    elif args.command == "train-lidlora":
        print(pipeline.train_adapted(cfg, out, "lidlora", args.checkpoint))
    elif args.command == "train-hlora":
        print(pipeline.train_adapted(cfg, out, "hlora", args.checkpoint, k=args.k))
    elif args.command == "eval":
        if args.checkpoint is None or args.strategy is None:
            raise ConfigError("eval needs --checkpoint and --strategy")
        rep = pipeline.evaluate(cfg, out, args.checkpoint, args.strategy, args.manifest)
        for lang, rate in sorted(rep.per_lang.items()):
            print(f"L{lang}\t{rate:.4f}")
        print(f"avg\t{rep.avg:.4f}\nlid_accuracy\t{rep.lid_accuracy:.4f}")
    elif args.command == "ablate-k":
        ks = [int(k) for k in args.k_list.split(",")] if args.k_list else None
        _, table = pipeline.ablate_k(cfg, out, ks)
        print(table, end="")
    elif args.command == "confusion":
        res = pipeline.confusion_pair(cfg, out, args.checkpoint, args.hlora_checkpoint, args.manifest)
        print(f"two-stage accuracy {res['two_stage'].lid_accuracy:.4f}")
        print(f"hlora accuracy     {res['hlora'].lid_accuracy:.4f}")
        print(f"delta              {res['delta']:+.4f}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, CompatibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
