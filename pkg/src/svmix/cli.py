"""Command-line entry point.

Exit codes: 0 success, 1 contract violation or failed self-test, 2 invalid
configuration, 3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from . import checks, experiment, formats
from .config import ARMS, TRAIN_MODES, ExperimentConfig
from .errors import ConfigError, ContractError, FormatError, ParameterError, SVMixError

OUT_ENV = "SVMIX_OUT"

EXIT_OK, EXIT_CONTRACT, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

# flag name -> config key
_OVERRIDES = {
    "seed": "seed", "arm": "arm", "alpha_spatial": "alpha_spatial", "alpha_temporal": "alpha_temporal",
    "omega": "omega", "momentum": "momentum", "switch_prob": "switch_prob", "ensemble_mode": "ensemble_mode",
    "train_mode": "train_mode", "epochs": "epochs",
}


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "svmix-runs"))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args) -> ExperimentConfig:
    """Config file (if any), then explicit flags, then ``--set key=value`` pairs."""
    values = {}
    if getattr(args, "config", None):
        values = ExperimentConfig.load(args.config).to_dict()
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError("expected key=value", item)
        key, text = item.split("=", 1)
        values[key.strip()] = _parse_value(text)
    return ExperimentConfig.from_dict(values)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat JSON configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--arm", choices=ARMS)
    p.add_argument("--alpha-spatial", type=float)
    p.add_argument("--alpha-temporal", type=float)
    p.add_argument("--omega", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--switch-prob", type=float)
    p.add_argument("--ensemble-mode", choices=("probabilistic", "average"))
    p.add_argument("--train-mode", choices=TRAIN_MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other configuration key")


def cmd_run(args) -> int:
    cfg = build_config(args)
    out = Path(args.out) if args.out else default_out() / experiment.run_dir_name(cfg)

    def progress(rec):
        print(f"epoch {rec['epoch']:4d}  train_acc {rec['train_acc']:.3f}  val_acc {rec['val_acc']:.3f}", flush=True)

    record = experiment.run(cfg, out, data_cache=args.data, on_epoch=progress)
    print(f"final val_acc {record.final_val_acc:.4f}  config {record.config_hash}  code {record.code_version}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = build_config(args)
    if args.matrix_file:
        matrix = experiment.MatrixSpec.load(args.matrix_file)
        if args.seeds is not None:
            matrix.seeds = tuple(args.seeds)
    else:
        matrix = experiment.MatrixSpec.named(args.matrix, tuple(args.seeds) if args.seeds is not None else (0, 1, 2, 3, 4))
    out = Path(args.out) if args.out else default_out() / f"ablate-{args.matrix or Path(args.matrix_file).stem}"

    def progress(cell, rec):
        acc = "failed: " + rec.error if rec.status != "ok" else f"val_acc {rec.final_val_acc:.4f}"
        print(f"{cell}  seed {rec.config['seed']}  {acc}", flush=True)

    result = experiment.ablate(base, matrix, out, data_cache=args.data, on_run=progress)
    sys.stdout.write(result.table())
    print(f"wrote {out / 'table.tsv'}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    summary = experiment.inspect(args.dump, args.images)
    for line in summary.lines():
        print(line)
    if args.images:
        print(f"wrote {Path(args.images) / (Path(args.dump).stem + '.pgm')}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    names = args.only or (list(checks.QUICK) if args.quick else list(checks.CHECKS))
    unknown = [n for n in names if n not in checks.CHECKS]
    if unknown:
        raise ConfigError(f"unknown check; choose from {', '.join(checks.CHECKS)}", unknown[0])
    results = checks.run_checks(names, report=lambda line: print(line, flush=True))
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_CONTRACT


def cmd_generate_data(args) -> int:
    cfg = build_config(args)
    spec = cfg.dataset_spec()
    out = Path(args.out) if args.out else default_out() / f"data-{spec.split_seed}.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    train, val = formats.load_or_generate(out, spec)
    print(f"train {len(train)} clips, val {len(val)} clips, digest {experiment.data_digest(train, val)}")
    print(f"wrote {out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svmix", description="Selective volume mixing for video clips.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration")
    _add_config_flags(p)
    p.add_argument("--out", help=f"run directory (default ${OUT_ENV}/<arm>-s<seed>-<hash>)")
    p.add_argument("--data", help="dataset cache file, created if missing")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run an ablation matrix over seeds")
    _add_config_flags(p)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--matrix", choices=sorted(experiment.MATRICES), default="modules")
    group.add_argument("--matrix-file", help="JSON with 'cells', optional 'seeds' and 'base'")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out")
    p.add_argument("--data", help="directory for dataset caches")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="summarise a mask dump")
    p.add_argument("dump")
    p.add_argument("--images", help="directory for a PGM grid of the mask frames")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("selftest", help="run the acceptance checks")
    p.add_argument("--quick", action="store_true", help="skip the training-based checks")
    p.add_argument("--only", nargs="+", metavar="CHECK", help=f"subset of: {', '.join(checks.CHECKS)}")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("generate-data", help="write the synthetic dataset cache")
    _add_config_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, SVMixError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
