"""Command-line entry point: ``topreid {train,eval,export,gradcheck}``.

Every command prints one JSON object on stdout. Failures print a single
``topreid: error: ...`` line on stderr and exit nonzero (1 for a failed
gradient check, 2 for everything else).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import RunConfig
from .data import DatasetError
from .evaluation import evaluate, export_embeddings
from .gradcheck import run_gradcheck
from .train import TrainingError, build_datasets, model_from_checkpoint, train
from .vit import ConfigError

EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2


class CliError(Exception):
    pass


def _load_config(path: str) -> RunConfig:
    if not Path(path).is_file():
        raise CliError(f"config file not found: {path}")
    return RunConfig.from_file(path)


def _load_model(cfg: RunConfig, ckpt: str):
    if not Path(ckpt).is_file():
        raise CliError(f"checkpoint not found: {ckpt}")
    return model_from_checkpoint(cfg, ckpt)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out_dir = Path(args.output or cfg.run.output_dir)
    result = train(cfg, out_dir=out_dir, quiet=not args.verbose)
    last = result.history[-1]
    print(json.dumps({
        "checkpoint": str(result.checkpoint_path),
        "metrics": str(out_dir / "metrics.jsonl"),
        "steps": len(result.history),
        "seconds": round(result.seconds, 3),
        "final": last,
    }, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    model = _load_model(cfg, args.checkpoint)
    _, eval_set = build_datasets(cfg)
    report = evaluate(model, eval_set, args.missing, metric=cfg.run.metric, fill=args.fill)
    print(report.to_json())
    return 0


def cmd_export(args) -> int:
    cfg = _load_config(args.config)
    model = _load_model(cfg, args.checkpoint)
    _, eval_set = build_datasets(cfg)
    rows = export_embeddings(model, eval_set, args.output, args.missing)
    print(json.dumps({"output": args.output, "rows": rows}))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config) if args.config else RunConfig()
    report = run_gradcheck(cfg, coords_per_param=args.coords, seed=args.seed)
    print(json.dumps(report.to_dict(), sort_keys=True))
    if not report.passed:
        name, err = report.worst()
        print(f"topreid: error: gradient check failed at {name} (relative error {err:.3g})", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topreid", description="Multi-spectral re-identification toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics plus a checkpoint")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--output", help="output directory (default: run.output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, helptext, func in (
        ("eval", "report mAP and CMC on the evaluation split", cmd_eval),
        ("export", "write evaluation-split embeddings to CSV", cmd_export),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("-c", "--config", required=True)
        p.add_argument("-k", "--checkpoint", required=True)
        p.add_argument("-m", "--missing", default="", help="missing spectra, e.g. N or NIR,TIR")
        if name == "eval":
            p.add_argument("--fill", choices=("crm", "zeros"), default="crm")
        else:
            p.add_argument("-o", "--output", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference check of the full objective")
    p.add_argument("-c", "--config")
    p.add_argument("--coords", type=int, default=32, help="coordinates sampled per parameter tensor")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, DatasetError, TrainingError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"topreid: error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
