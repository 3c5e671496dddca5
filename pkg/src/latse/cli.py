"""Command line interface.

    latse curves     write target-logit curves for the standard specs
    latse audit      audit margin specs against both design principles
    latse gradcheck  run the finite-difference suites
    latse gen-data   materialize the synthetic catalog as PGMs + manifest
    latse train      run one experiment into a directory
    latse eval       evaluate a finished run
    latse compare    run and tabulate the ablation grid

Every command accepts --config FILE, repeated --set key=value overrides,
and --out / --seed shortcuts.  Exit codes: 0 success, 1 configuration
error, 2 training divergence, 3 failed gradient check."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from latse.config import ConfigError, ExperimentConfig, default_config

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_GRADCHECK = 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file of key = value lines")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int, help="experiment seed override")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable")


def _build_config(args) -> ExperimentConfig:
    config = (ExperimentConfig.load(args.config) if args.config
              else default_config())
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out_dir"] = args.out
    return config.with_overrides(overrides)


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _specs_under_audit(config: ExperimentConfig):
    from latse.margins import standard_specs

    specs = standard_specs(s=config.loss.s)
    specs["config"] = config.loss
    return specs


def cmd_curves(args) -> int:
    from latse.margins import emit_curves, make_grid

    config = _build_config(args)
    out = _out_dir(config)
    grid = make_grid(0.0, math.pi, args.grid_step)
    table = emit_curves(list(_specs_under_audit(config).values()), grid)
    path = out / "curves.csv"
    table.write_csv(path, config_hash=config.config_hash())
    print(f"wrote {path} ({len(grid)} grid points, {len(table.labels)} specs)")
    return EXIT_OK


def cmd_audit(args) -> int:
    from latse.margins import check_principles

    config = _build_config(args)
    out = _out_dir(config)
    chash = config.config_hash()
    all_ok = True
    for name, spec in _specs_under_audit(config).items():
        report = check_principles(spec, step=args.grid_step)
        report.write(out / f"audit_{name}.txt", config_hash=chash)
        verdict = "PASS" if report.passed else "FAIL"
        detail = []
        if not report.p1_ok:
            detail.append(f"P1 {report.p1_violations}")
        if not report.p2_ok:
            detail.append(f"P2 {report.p2_violations}")
        print(f"{name} [{spec.label()}]: {verdict}"
              + (f"  {'; '.join(detail)}" if detail else ""))
        all_ok &= report.passed
    # failing an audit is a finding, not a malfunction
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from latse.gradcheck import run_all, write_report

    config = _build_config(args)
    out = _out_dir(config)
    results = run_all(cases=args.cases, seed=config.seed)
    write_report(out / "gradcheck.csv", results,
                 config_hash=config.config_hash())
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_GRADCHECK


def cmd_gen_data(args) -> int:
    from latse.data import build_catalog, export_dataset

    config = _build_config(args)
    out = _out_dir(config)
    catalog = build_catalog(config.data)
    manifest = export_dataset(catalog, out / "dataset",
                              config_hash=config.config_hash())
    print(f"wrote {manifest} ({len(catalog.train)} train, "
          f"{len(catalog.eval)} eval samples)")
    return EXIT_OK


def cmd_train(args) -> int:
    from latse.experiments import run_experiment

    config = _build_config(args)
    summary = run_experiment(config)
    final = summary["final"]
    print(f"run {summary['out_dir']}: loss={final['loss']:.4f} "
          f"dloss={final['dloss']:.4f} gloss={final['gloss']:.4f} "
          f"top1={final['train_top1']:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from latse.experiments import evaluate_run

    config = _build_config(args)
    run_dir = args.run if args.run else config.out_dir
    row = evaluate_run(run_dir)
    print(f"eval {run_dir}: verification={row['verification_accuracy']:.4f} "
          f"threshold={row['threshold']:.4f} rank1={row['rank1']:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from latse.experiments import compare_workers_from_env, run_compare

    config = _build_config(args)
    out = _out_dir(config)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    workers = compare_workers_from_env()
    table = run_compare(config, out, seeds=seeds, workers=workers)
    header = f"{'variant':<16} {'seed':>5} {'verif':>8} {'rank1':>8}"
    print(header)
    for row in table:
        print(f"{row['variant']:<16} {str(row['seed']):>5} "
              f"{row['verification_accuracy']:>8.4f} {row['rank1']:>8.4f}")
    print(f"wrote {out / 'compare.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latse", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curves", help="tabulate target-logit curves")
    p.add_argument("--grid-step", type=float, default=1e-3)
    _add_common(p)
    p.set_defaults(fn=cmd_curves)

    p = sub.add_parser("audit", help="audit margin design principles")
    p.add_argument("--grid-step", type=float, default=1e-3)
    _add_common(p)
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--cases", type=int, default=100)
    _add_common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="export the synthetic catalog")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one experiment")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--run", help="run directory (defaults to out_dir)")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare", help="ablation grid over shared data")
    p.add_argument("--seeds", default="0,1,2",
                   help="comma-separated training seeds")
    _add_common(p)
    p.set_defaults(fn=cmd_compare)

    return parser


def main(argv=None) -> int:
    from latse.training import DivergenceError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
