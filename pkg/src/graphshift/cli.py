"""Command-line entry point: ``graphshift <subcommand> [--config F] [--set k=v] [--seed S] [--out DIR]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, load_config, parse_overrides
from .federation import write_rounds
from .graphs import TUFormatError, dataset_summary, load_tu_dataset, write_tu_dataset
from .models import save_params

log = logging.getLogger("graphshift")

RUN_COMMANDS = ("train", "attack", "q1", "q2", "q3", "ablation")


def format_summary(summary: dict) -> str:
    ratio = summary["class_ratio"].replace(" ", "")
    return (f"graphs={summary['graphs']} classes={summary['classes']} class_ratio={ratio} "
            f"avg_nodes={summary['avg_nodes']:.2f} avg_edges={summary['avg_edges']:.2f} "
            f"feature_dim={summary['feature_dim']}")


def cmd_ingest(args) -> int:
    path = Path(args.path)
    if not path.exists():
        print(f"error: {path} does not exist", file=sys.stderr)
        return 2
    if args.format != "tu":
        print(f"error: unsupported format {args.format!r}", file=sys.stderr)
        return 2
    ds = load_tu_dataset(path)
    print(format_summary(dataset_summary(ds)))
    if args.out:
        out = write_tu_dataset(ds, Path(args.out) / "dataset", ds.name)
        print(f"normalized copy written to {out}")
    return 0


def _write_rows(out: Path, name: str, rows) -> Path:
    path = ex.write_results(rows, out / f"{name}.csv")
    s = ex.summarize(rows) if rows else None
    if s:
        print(f"{name}: asr={s['asr_mean']:.3f}±{s['asr_std']:.3f} oa={s['oa_mean']:.3f}±{s['oa_std']:.3f} "
              f"aas={s['aas_mean']:.3f}±{s['aas_std']:.3f} ({len(rows)} runs)")
    return path


def run_command(command: str, cfg: ExperimentConfig, out: Path) -> list[Path]:
    """Execute one experiment subcommand, returning the artifacts written."""
    out.mkdir(parents=True, exist_ok=True)
    written = [ex.write_manifest(cfg, command, out / "manifest.json")]
    cache: dict = {}
    if command == "train":
        for seed in cfg.seeds:
            res = ex.train_federation(cfg, seed, "none", ex._dataset_for(cfg, seed, cache))
            written.append(write_rounds(res.records, out / f"rounds_seed{seed}.csv"))
            written.append(save_params(res.model, out / f"model_seed{seed}.txt"))
            print(f"seed={seed} oa={res.oa:.3f}")
    elif command == "attack":
        rows = ex.run_cells(cfg, [cfg], cfg.attack, cache)
        written.append(_write_rows(out, f"results_{cfg.attack}", rows))
    elif command == "q1":
        for attack, rows in ex.run_q1_style(cfg, cache=cache).items():
            written.append(_write_rows(out, f"results_q1_{attack}", rows))
    elif command == "q2":
        for attack, rows in ex.run_q2_style(cfg, cache=cache).items():
            written.append(_write_rows(out, f"results_q2_{attack}", rows))
    elif command == "q3":
        runs = [ex.run_q3_style(cfg, seed, ex._dataset_for(cfg, seed, cache)) for seed in cfg.seeds]
        for variant in ex.Q3_VARIANTS:
            curves = np.array([[(a, l) for _, a, l in r.curves[variant]] for r in runs])
            mean = curves.mean(axis=0) if len(curves) else np.zeros((0, 2))
            rows = [(variant, e + 1, a, l) for e, (a, l) in enumerate(mean)]
            written.append(ex.write_convergence(rows, out / f"convergence_{variant}.csv"))
        for r in runs:
            hits = {v: ex.epochs_to_target(r.asr_curve(v), cfg.asr_target) for v in ex.Q3_VARIANTS}
            print(f"seed={r.seed} epochs to ASR {cfg.asr_target}: " +
                  " ".join(f"{v}={hits[v] if hits[v] is not None else 'never'}" for v in ex.Q3_VARIANTS))
    elif command == "ablation":
        for variant, rows in ex.run_ablation(cfg, cache).items():
            written.append(_write_rows(out, f"results_ablation_{variant}", rows))
    else:
        raise ValueError(f"unknown command {command!r}")
    return written


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphshift", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="parse a TU-format dataset and print its statistics")
    ingest.add_argument("path", help="directory holding the <NAME>_*.txt files")
    ingest.add_argument("--format", default="tu", help="input format (only 'tu')")
    ingest.add_argument("--out", help="write a normalized copy under this directory")

    for name in RUN_COMMANDS:
        p = sub.add_parser(name, help=f"run the '{name}' experiment")
        p.add_argument("--config", help="key = value config file or a run manifest (manifest.json)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, help="base seed (overrides the config)")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "ingest":
            return cmd_ingest(args)
        overrides = parse_overrides(args.set)
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        cfg = load_config(args.config, overrides)
        written = run_command(args.command, cfg, Path(args.out))
        for path in written:
            print(f"wrote {path}")
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TUFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
