"""``starmoe`` command line: run, ablate, sweep, check, driftmap."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checks, harness, reports
from .config import ConfigError, RunConfig, load_config
from .errors import InvariantViolation

log = logging.getLogger("starmoe")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _variant_name(cfg: RunConfig) -> str:
    for name, flags in harness.VARIANTS.items():
        if flags == (cfg.sara_on, cfg.acr_on):
            return name
    raise AssertionError("unreachable")


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds lists no seed")
    return seeds


def _config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = load_config(path)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.data_seed is not None:
        cfg = replace(cfg, data_seed=args.data_seed)
    if args.init_seed is not None:
        cfg = replace(cfg, init_seed=args.init_seed)
    return cfg.validate()


def _seeds(args, cfg: RunConfig) -> list[int]:
    if args.seeds:
        return _seed_list(args.seeds)
    return [cfg.init_seed if args.seed is None else args.seed]


class Output:
    """Collects files and writes them only after the whole command succeeded."""

    def __init__(self, root: Path, force: bool):
        self.root, self.force = root, force
        self.files: dict[Path, str] = {}

    def guard(self, *names: str) -> None:
        if self.force:
            return
        for name in names:
            target = self.root / name
            if target.exists() and (target.is_file() or any(target.iterdir())):
                raise UsageError(f"{target} exists; pass --force to overwrite")

    def add(self, name: str, text: str) -> None:
        self.files[self.root / name] = text

    def flush(self) -> None:
        for path, text in self.files.items():
            reports.write_text(path, text)


def _bound_failures(runs) -> list[str]:
    return [f"{v} seed {s} task {t}" for v, s, m in runs
            for t, rep in enumerate(m.drift, start=1) if not rep.bound_holds]


def cmd_run(args) -> int:
    cfg = _config(args)
    out = Output(Path(args.out), args.force)
    out.guard("metrics.csv", "summary.json", "drift")
    variant = _variant_name(cfg)
    metrics = harness.run_experiment(cfg)
    runs = [(variant, cfg.init_seed, metrics)]
    out.add("metrics.csv", reports.metrics_csv(runs))
    out.add("summary.json", _json(reports.summary(runs, cfg)))
    for t, rep in enumerate(metrics.drift, start=1):
        out.add(f"drift/task_{t}.json", rep.to_json() + "\n")
    out.flush()
    print(f"{variant} seed {cfg.init_seed}: avg acc {metrics.average:.2f}, last acc {metrics.last:.2f}")
    return _report_bounds(runs)


def _json(obj) -> str:
    import json
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _report_bounds(runs) -> int:
    failures = _bound_failures(runs)
    if failures:
        print("internal invariant failure: drift bound violated at " + "; ".join(failures), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = _seeds(args, cfg)
    out = Output(Path(args.out), args.force)
    out.guard("ablation.csv", "metrics.csv", "summary.json")
    weightings = args.weightings.split(",") if args.weightings else None
    rows = harness.run_ablation(cfg, seeds=seeds, weightings=weightings, workers=args.workers)
    runs = [(r.label if r.weighting == cfg.weighting else f"{r.label}/{r.weighting}", r.seed, r.metrics)
            for r in rows]
    ok, line = reports.directional_verdict(rows, cfg.weighting)
    out.add("ablation.csv", reports.ablation_csv(rows))
    out.add("metrics.csv", reports.metrics_csv(runs))
    doc = reports.summary(runs, cfg)
    doc["directional"] = line
    out.add("summary.json", _json(doc))
    out.flush()
    print(reports.ablation_csv(rows), end="")
    print(line)
    return _report_bounds(runs)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.param not in harness.SWEEP_PARAMS:
        raise UsageError(f"unknown sweep parameter {args.param!r}; valid: {', '.join(harness.SWEEP_PARAMS)}")
    if not args.values:
        raise UsageError("--values is required")
    seeds = _seeds(args, cfg)
    out = Output(Path(args.out), args.force)
    out.guard("sweep.csv")
    try:
        rows = harness.run_sweep(cfg, args.param, args.values.split(","), seeds=seeds, workers=args.workers)
    except (ValueError, ConfigError) as exc:
        raise UsageError(str(exc)) from None
    text = reports.sweep_csv(args.param, rows)
    out.add("sweep.csv", text)
    out.flush()
    print(text, end="")
    return _report_bounds([(r.label, r.seed, r.metrics) for r in rows])


def cmd_check(args) -> int:
    out = Output(Path(args.out), args.force)
    out.guard("check_report.txt")
    results = []
    for name, suite in checks.SUITES.items():
        result = suite()
        print(result.line(), flush=True)
        results.append(result)
    passed = all(r.passed for r in results)
    lines = [r.line() for r in results]
    lines.append("ALL PASS" if passed else "FAILED: " + ", ".join(r.name for r in results if not r.passed))
    out.add("check_report.txt", "\n".join(lines) + "\n")
    out.flush()
    if not passed:
        print(lines[-1], file=sys.stderr)
    return EXIT_OK if passed else EXIT_FAIL


def cmd_driftmap(args) -> int:
    cfg = _config(args)
    out = Output(Path(args.out), args.force)
    out.guard("heatmap_on.csv", "heatmap_off.csv", "driftmap.txt")
    on = harness.run_experiment(replace(cfg, sara_on=True))
    off = harness.run_experiment(replace(cfg, sara_on=False))
    m_on, m_off = harness.later_expert_mass(on.routing_mass), harness.later_expert_mass(off.routing_mass)
    lower = "sara_on" if m_on < m_off else "sara_off" if m_off < m_on else "tie"
    line = (f"old-task mass on later experts: sara_on {m_on:.4f}, sara_off {m_off:.4f}; lower: {lower}")
    out.add("heatmap_on.csv", reports.heatmap_csv(on.routing_mass))
    out.add("heatmap_off.csv", reports.heatmap_csv(off.routing_mass))
    out.add("driftmap.txt", line + "\n")
    out.flush()
    print(line)
    return _report_bounds([("sara_on", cfg.init_seed, on), ("sara_off", cfg.init_seed, off)])


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "sweep": cmd_sweep, "check": cmd_check, "driftmap": cmd_driftmap}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (defaults are used when omitted)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="sets both data and init seed")
    common.add_argument("--data-seed", type=int)
    common.add_argument("--init-seed", type=int)
    common.add_argument("--workers", type=int, default=1, help="parallel runs across seeds (default 1)")
    common.add_argument("--force", action="store_true", help="overwrite existing output files")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="starmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="one run, metrics + drift reports")
    p = sub.add_parser("ablate", parents=[common], help="baseline / sara_only / acr_only / full over seeds")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 1993,1994,1995")
    p.add_argument("--weightings", help="comma-separated: sensitivity,uniform")
    p = sub.add_parser("sweep", parents=[common], help="one hyperparameter over values and seeds")
    p.add_argument("--param", required=True, help=f"one of {', '.join(harness.SWEEP_PARAMS)}")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds")
    sub.add_parser("check", parents=[common], help="property suites, writes check_report.txt")
    sub.add_parser("driftmap", parents=[common], help="routing-mass heatmaps with SARA on and off")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as exc:
        print(f"internal invariant failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
