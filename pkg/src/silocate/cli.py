"""Command-line driver.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .datagen import export_synthetic, make_synthetic
from .experiment import emit_report, run_alpha_sweep, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

log = logging.getLogger("silocate")


def _out_dir(args, cfg) -> Path:
    return Path(args.out) if args.out else Path(cfg.out_dir)


def cmd_generate(args) -> int:
    cfg = parse_config(args.config)
    if cfg.mode != "synthetic":
        raise ConfigError("mode: generate needs mode = 'synthetic'")
    sc = cfg.synth_config(cfg.seed)
    schema, datasets = make_synthetic(sc)
    paths = export_synthetic(datasets, sc, schema, _out_dir(args, cfg))
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    report = run_experiment(cfg, jobs=args.jobs)
    for p in emit_report(report, _out_dir(args, cfg)):
        log.info("wrote %s", p)
    _print_aggregate(report["aggregate"])
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    report = run_alpha_sweep(cfg, jobs=args.jobs)
    for p in emit_report(report, _out_dir(args, cfg)):
        log.info("wrote %s", p)
    for row in report["sweep_rows"]:
        print(f"alpha={row['alpha']:<5} {row['method']:<11} pehe={_fmt(row['pehe_mean'])} ate={_fmt(row['ate_mean'])}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.out:
        directory = Path(args.out)
    elif args.config:
        directory = Path(parse_config(args.config).out_dir)
    else:
        raise ConfigError("out: pass --out <dir> or --config <path>")
    path = directory / "report.json"
    report = json.loads(path.read_text(encoding="utf-8"))
    if "aggregate" in report:
        _print_aggregate(report["aggregate"])
        for r in report["seeds"]:
            conv = r["methods"]["federated"]
            print(
                f"seed {r['seed']}: theorem1 satisfied={conv['theorem1']['satisfied']} "
                f"theorem2 satisfied={conv['theorem2']['satisfied']}"
            )
    for point in report.get("sweep", []):
        print(f"alpha={point['alpha']}")
        _print_aggregate(point["aggregate"])
    return EXIT_OK


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def _print_aggregate(agg: dict) -> None:
    for method, m in agg.items():
        print(
            f"{method:<11} pehe {_fmt(m['pehe_mean'])} (+/- {_fmt(m['pehe_std'])})  "
            f"ate {_fmt(m['ate_mean'])} (+/- {_fmt(m['ate_std'])})"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="silocate", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (
        ("generate", cmd_generate, "export a synthetic multi-silo dataset"),
        ("train", cmd_train, "run federated and local-only training over all seeds"),
        ("sweep", cmd_sweep, "repeat the experiment over a grid of alpha values"),
        ("report", cmd_report, "summarise an existing report.json"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=name != "report")
        p.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        p.add_argument("--jobs", type=int, default=1, help="parallel seeds / sweep points")
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.jobs < 1:
        print("error: jobs: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level guard maps failures to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
