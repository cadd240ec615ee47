"""Command-line entry point: ``dualct {simulate,reconstruct,evaluate,run,compare,sensitivity}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiment import PRESETS, ConfigError, Run, StageError, compare, resolve_config
from .sensitivity import format_material_table, material_table
from .spectra import default_spectra, load_spectrum

log = logging.getLogger("dualct")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"preset ({', '.join(sorted(PRESETS))}), config JSON or run manifest")
    p.add_argument("--seed", type=int, help="noise seed override")
    p.add_argument("--scale", help="'desk' (64x64), 'paper' (100x100, 150 detectors) or a grid size")
    p.add_argument("--out", help="run directory (default runs/<experiment name>)")
    p.add_argument("--methods", help="comma-separated subset of proposed, proposed-noR2, defbp")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualct", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("simulate", "write ground truth and measurements"),
                            ("reconstruct", "reconstruct from the run's measurements"),
                            ("evaluate", "score reconstructions against ground truth"),
                            ("run", "simulate, reconstruct, evaluate and write a manifest")):
        _add_common(sub.add_parser(name, help=help_text))
    cmp_ = sub.add_parser("compare", help="merge metrics of completed runs")
    cmp_.add_argument("runs", nargs="+", help="run directories")
    cmp_.add_argument("--out", help="directory for compare.csv and compare.txt")
    sens = sub.add_parser("sensitivity", help="d_max^-2 table for water, plexiglass and aluminium")
    sens.add_argument("--spectrum", help="low-energy spectrum CSV (default: shipped)")
    sens.add_argument("--out", help="directory for sensitivity.csv")
    return parser


def _run_for(args) -> Run:
    overrides = {"methods": args.methods.split(",")} if args.methods else None
    cfg = resolve_config(args.config, args.seed, args.scale, overrides)
    out = Path(args.out) if args.out else Path("runs") / cfg["name"]
    return Run(cfg, out)


def _print_metrics(path: Path) -> None:
    sys.stdout.write(path.read_text(encoding="utf-8"))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            csv, text = compare(args.runs)
            if args.out:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                (out / "compare.csv").write_text(csv, encoding="utf-8", newline="\n")
                (out / "compare.txt").write_text(text, encoding="utf-8")
            sys.stdout.write(text)
            return EXIT_OK
        if args.command == "sensitivity":
            spectrum = load_spectrum(args.spectrum) if args.spectrum else default_spectra()[0]
            table = format_material_table(material_table(spectrum))
            if args.out:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                (out / "sensitivity.csv").write_text(table, encoding="utf-8", newline="\n")
            sys.stdout.write(table)
            return EXIT_OK
        run = _run_for(args)
        if args.command == "simulate":
            run.simulate()
        elif args.command == "reconstruct":
            run.reconstruct()
        elif args.command == "evaluate":
            run.evaluate()
            _print_metrics(run.out / "metrics.csv")
        else:
            run.run_all()
            _print_metrics(run.out / "metrics.csv")
        return EXIT_OK
    except ConfigError as err:
        print(f"dualct: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as err:
        print(f"dualct: {err}", file=sys.stderr)
        return EXIT_STAGE
    except FileNotFoundError as err:
        print(f"dualct: {err}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    raise SystemExit(main())
