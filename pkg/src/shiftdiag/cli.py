"""Command-line front end: ``shiftdiag diagnose | simulate | report``.

Exit codes are 0 on success, 2 for input problems (missing files or columns,
bad configuration, malformed report JSON) and 3 for failures during a run.
The commands only move data between files and the library; every number they
print or write comes from library results.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, format_config_text, parse_config_text
from .data import SOURCE, TARGET, FeatureSubset, Schema, load_dataset, write_dataset
from .errors import InputError, ShiftDiagError, ValidationError
from .inference import run_hierarchy
from .report import read_report, render_svg, report_json, summary_text
from .simlab import (attach_predictions, generate_setup, run_power_study, setup_spec,
                     train_study_model)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3

# Flag name -> RunConfig field, for options shared by diagnose and simulate.
_CONFIG_FLAGS = {
    "tau": "tau", "epsilon": "epsilon", "alpha": "alpha", "bins": "bins",
    "bootstrap_reps": "bootstrap_reps", "split_fraction": "split_fraction",
    "seed": "seed", "corr_alpha": "corr_alpha",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key = value configuration file")
    p.add_argument("--tau", type=float, help="smallest decay of interest (default 0)")
    p.add_argument("--epsilon", type=float, help="smallest subgroup prevalence (default 0.05)")
    p.add_argument("--alpha", type=float, help="significance level (default 0.05)")
    p.add_argument("--bins", type=int, help="bins for the source outcome probability")
    p.add_argument("--bootstrap-reps", dest="bootstrap_reps", type=int,
                   help="multiplier bootstrap replicates (default 1000)")
    p.add_argument("--split-fraction", dest="split_fraction", type=float,
                   help="fraction of rows used for fitting (default 0.5)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--corr-alpha", dest="corr_alpha", type=float,
                   help="level of the loss-association feature filter")
    p.add_argument("--no-loss-filter", dest="loss_filter", action="store_false", default=None,
                   help="let covariate tests use every feature")
    p.add_argument("--force-detailed", dest="force_detailed", action="store_true", default=None,
                   help="run detailed tests even when the aggregate test does not reject")


def _read_text(path, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"{what} {path}: {exc.strerror}") from None


def build_config(args, base: RunConfig | None = None) -> RunConfig:
    """Defaults, then the configuration file, then command-line flags."""
    values = (base or RunConfig()).to_dict()
    if getattr(args, "config", None):
        values.update(parse_config_text(_read_text(args.config, "config file")))
    for flag, key in list(_CONFIG_FLAGS.items()) + [("loss_filter", "loss_filter"),
                                                    ("force_detailed", "force_detailed")]:
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    return RunConfig.from_dict(values)


def read_subsets(path, column_names) -> list[FeatureSubset]:
    """Subset file: a JSON object or ``name = ["col", ...]`` lines."""
    text = _read_text(path, "subsets file")
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"subsets file {path}: malformed JSON ({exc.msg})") from None
    else:
        raw = parse_config_text(text)
    if not raw:
        raise ValidationError(f"subsets file {path}: no subsets defined")
    out = []
    for name, cols in raw.items():
        if isinstance(cols, str):
            cols = [cols]
        if not isinstance(cols, list) or not all(isinstance(c, str) for c in cols):
            raise ValidationError(f"subsets file {path}: subset {name!r} must list column names")
        out.append(FeatureSubset.from_names(name, cols, column_names))
    return out


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"output directory {out}: {exc.strerror}") from None
    return out


def cmd_diagnose(args) -> int:
    config = build_config(args)
    schema = Schema(args.outcome, args.pred, tuple(args.features or ()))
    source = load_dataset(args.source, schema, SOURCE)
    target = load_dataset(args.target, schema, TARGET)
    if source.column_names != target.column_names:
        raise ValidationError("source and target files have different feature columns")
    subsets = read_subsets(args.subsets, source.column_names) if args.subsets else None
    out = _out_dir(args.out)
    try:
        report = run_hierarchy(source, target, subsets, config)
    except InputError:
        raise
    except Exception as exc:
        raise RuntimeFailure(f"diagnosis failed: {type(exc).__name__}: {exc}") from exc
    d = json.loads(report_json(report))
    (out / "report.json").write_text(report_json(d), encoding="utf-8")
    (out / "hierarchy.svg").write_text(render_svg(d), encoding="utf-8")
    text = summary_text(d)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.reps < 1:
        raise ValidationError("--reps must be at least 1")
    spec = setup_spec(args.setup, fast=args.fast)
    config = build_config(args, spec.run_config())
    out = _out_dir(args.out)
    if args.export_data:
        src, tgt = generate_setup(spec, config.seed)
        model = train_study_model(spec, seed=config.seed)
        write_dataset(attach_predictions(src, model), out / "source.csv")
        write_dataset(attach_predictions(tgt, model), out / "target.csv")

    def progress(r, rec):
        if not args.quiet:
            ps = ", ".join(f"{k} p={v:.3f}" for k, v in sorted(rec["p"].items()))
            print(f"rep {r + 1}/{args.reps}: {ps}", file=sys.stderr)

    study = run_power_study(spec, args.reps, config, seed=config.seed,
                            detailed=tuple(args.detailed or ()), progress=progress)
    if not study.records:
        raise RuntimeFailure(f"all {args.reps} replicates failed; first error: "
                             f"{study.failures[0]['error'] if study.failures else 'unknown'}")
    (out / "study.json").write_text(study.to_json(), encoding="utf-8")
    (out / "replicates.csv").write_text(study.to_csv(), encoding="utf-8")
    (out / "config.txt").write_text(format_config_text(config), encoding="utf-8")
    print(f"{spec.id}: {len(study.records)} replicates, {len(study.failures)} failed, "
          f"{study.seconds:.1f} s")
    for key in study.keys:
        rate, lo, hi = study.rejection_rate(key)
        print(f"  {key}: rejection rate {rate:.3f} [{lo:.3f}, {hi:.3f}], "
              f"median p {study.median_p(key):.3f}")
    return EXIT_OK


def cmd_report(args) -> int:
    d = read_report(args.input)
    svg = render_svg(d)
    if args.svg:
        Path(args.svg).write_text(svg, encoding="utf-8")
    else:
        sys.stdout.write(svg)
    if args.summary:
        sys.stderr.write(summary_text(d))
    return EXIT_OK


class RuntimeFailure(ShiftDiagError):
    """A run started but could not finish."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftdiag",
        description="Hierarchical tests for subgroup performance decay between a source "
                    "and a target domain.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("diagnose", help="test two CSV files and write a report")
    p.add_argument("--source", required=True, metavar="CSV", help="source-domain rows")
    p.add_argument("--target", required=True, metavar="CSV", help="target-domain rows")
    p.add_argument("--outcome", default="y", help="binary outcome column (default y)")
    p.add_argument("--pred", default="pred", help="model score column (default pred)")
    p.add_argument("--features", nargs="+", metavar="COL",
                   help="feature columns (default: every other column)")
    p.add_argument("--subsets", metavar="FILE", help="candidate feature subsets")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="repeat a synthetic setup and report rejection rates")
    p.add_argument("--setup", required=True,
                   help="setup id: 1a, 1b, 2, 3 or null (or setup_1a ... null_variant)")
    p.add_argument("--reps", type=int, required=True, help="number of replicates")
    p.add_argument("--detailed", nargs="+", choices=("covariate", "outcome"),
                   help="also run detailed tests on every single-feature subset")
    p.add_argument("--fast", action="store_true", help="quarter-size samples")
    p.add_argument("--export-data", action="store_true",
                   help="also write one draw as source.csv and target.csv")
    p.add_argument("--quiet", action="store_true", help="no per-replicate progress")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="draw the hierarchy diagram from a report.json")
    p.add_argument("--in", dest="input", required=True, metavar="JSON", help="report file")
    p.add_argument("--svg", metavar="FILE", help="output SVG (default: standard output)")
    p.add_argument("--summary", action="store_true", help="print the text summary to stderr")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
