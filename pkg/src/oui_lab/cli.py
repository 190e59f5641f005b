"""``oui-lab`` command line: probe, train, sweep, theory, screen, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 the trained run diverged.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from oui_lab import envs, screening, sweep, theory_lab
from oui_lab.nn_core import ConfigurationError
from oui_lab.ppo_engine import EARLY_FRACTION, PpoConfig, train_run
from oui_lab.sweep import LogWriter, SweepSpec, aggregate, execute_sweep, read_log

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
REPORT_METRICS = ("return", "oui_actor", "oui_critic")
REPORT_FRACTIONS = (EARLY_FRACTION, 1.0)

log = logging.getLogger("oui_lab")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from exc


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from exc


def _config_overrides(args) -> dict:
    out = {}
    for name in ("total_steps", "rollout_len"):
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


# ---------------------------------------------------------------- subcommands


def cmd_probe(args) -> int:
    if args.size is not None and args.size <= 0:
        raise UsageError("--size must be positive")
    probe = envs.make_probe_batch(args.env, args.size, args.seed)
    out = Path(args.out)
    if out.exists() and not args.force:
        try:
            existing = envs.read_probe(out).digest()
        except (ValueError, OSError):
            existing = None
        if existing != probe.digest():
            raise DataError(f"{out} exists with different contents; pass --force to overwrite")
    digest = envs.write_probe(probe, out)
    print(digest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = PpoConfig.for_env(args.env, args.lr, args.seed, **_config_overrides(args))
    probe = envs.read_probe(args.probe) if args.probe else None
    rec = train_run(args.env, cfg, probe=probe)
    if args.out:
        LogWriter(args.out).append(rec)
    else:
        print(rec.to_line())
    final = "null" if rec.final_return is None else f"{rec.final_return:.2f}"
    print(f"run {rec.run_id}: diverged={rec.diverged} final_return={final}", file=sys.stderr)
    return EXIT_DIVERGED if rec.diverged else EXIT_OK


def cmd_sweep(args) -> int:
    spec = SweepSpec(
        args.env,
        args.lrs if args.lrs else sweep.lr_grid(),
        args.seeds if args.seeds else list(sweep.DEFAULT_SEEDS),
        _config_overrides(args),
    )

    def progress(rec):
        final = "null" if rec.final_return is None else f"{rec.final_return:.2f}"
        print(f"lr={rec.lr:.3g} seed={rec.seed} diverged={rec.diverged} final={final}", file=sys.stderr)

    records = execute_sweep(spec, args.out, args.parallelism, progress)
    print(f"{len(records)} runs in {args.out}")
    return EXIT_OK


def cmd_theory(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic is not None:
        u = args.synthetic
        grid = np.linspace(0.02, 0.2, args.n_eta) / u
        exp = theory_lab.linear_uniform_experiment(u, grid, trials=args.trials, seed=args.seed)
    else:
        cfg = PpoConfig.for_env(args.env, args.lr, args.seed, **_config_overrides(args))
        probe = envs.load_probe_batch(args.env)
        actor = theory_lab.trained_agent(args.env, cfg).actor
        sampler = theory_lab.gaussian_directions()
        eta_top = theory_lab.calibrate_eta(actor, probe, sampler, args.target_rate, seed=args.seed)
        grid = np.linspace(eta_top / 10, eta_top, args.n_eta)
        exp = theory_lab.FlipExperiment(actor, probe, sampler, list(grid), args.trials, args.seed + 1)
    curve = theory_lab.estimate_flip_rate(exp)
    theory_lab.write_flip_rate_csv(curve, out / "flip_rate.csv")
    line = theory_lab.fit_summary_line(curve)
    (out / "fit.json").write_text(line + "\n")
    print(line)
    return EXIT_OK


def _load_records(path) -> list:
    if not Path(path).exists():
        raise DataError(f"log {path} does not exist")
    result = read_log(path)
    for lineno, reason in result.bad_lines:
        print(f"warning: {path}:{lineno}: skipped corrupt record ({reason})", file=sys.stderr)
    if not result.records:
        raise UsageError(f"log {path} contains no valid run records")
    return result.records


def _write_screen(records, out: Path, stem: str, min_support: int, title: str) -> screening.RecallBinTable:
    feats = screening.extract_features(records)
    table = screening.screen(feats, min_support=min_support)
    screening.write_table_csv(table, out / f"{stem}.csv")
    (out / f"{stem}.md").write_text(screening.render_markdown(table, title))
    return table


def cmd_screen(args) -> int:
    records = _load_records(args.log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = _write_screen(records, out, "table", args.min_support, "Recall-matched early screening")
    env_ids = sorted({r.env_id for r in records})
    if len(env_ids) > 1:
        for env_id in env_ids:
            subset = [r for r in records if r.env_id == env_id]
            _write_screen(subset, out, f"table_{env_id}", args.min_support, f"Recall-matched early screening ({env_id})")
    print(f"{table.n_runs} runs, {table.n_success} successes, {len(table.cells)} table cells -> {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    records = _load_records(args.log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    env_ids = sorted({r.env_id for r in records})
    with open(out / "regimes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["lr", "metric", "at_fraction", "median", "q25", "q75", "n"]
        if len(env_ids) > 1:
            header = ["env_id", *header]
        w.writerow(header)
        for env_id in env_ids:
            for metric in REPORT_METRICS:
                for frac in REPORT_FRACTIONS:
                    for row in aggregate(records, metric, frac, env_id):
                        cells = [repr(row.lr), metric, repr(frac)]
                        cells += ["" if v is None else repr(v) for v in (row.median, row.q25, row.q75)]
                        cells.append(row.n)
                        w.writerow([env_id, *cells] if len(env_ids) > 1 else cells)
    print(f"wrote {out / 'regimes.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oui-lab", description="PPO structural-diagnostics lab.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def env_arg(p, required=True):
        p.add_argument("--env", required=required, default=envs.CARTPOLE, choices=envs.ENV_IDS)

    def run_overrides(p):
        p.add_argument("--total-steps", dest="total_steps", type=int)
        p.add_argument("--rollout-len", dest="rollout_len", type=int)

    p = sub.add_parser("probe", help="build and write a probe batch")
    env_arg(p)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("train", help="train one run")
    env_arg(p)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe", help="probe file (default: cached batch)")
    p.add_argument("--out", help="append the record to this JSONL log (default: stdout)")
    run_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="learning-rate x seed sweep")
    env_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--lrs", type=_csv_floats)
    p.add_argument("--seeds", type=_csv_ints)
    run_overrides(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("theory", help="flip-rate linearity bench")
    env_arg(p, required=False)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=300)
    p.add_argument("--n-eta", dest="n_eta", type=int, default=8)
    p.add_argument("--target-rate", dest="target_rate", type=float, default=0.02)
    p.add_argument("--synthetic", type=float, metavar="U", help="use the one-unit uniform model with |U| = U")
    run_overrides(p)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("screen", help="recall-matched screening tables")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-support", dest="min_support", type=int, default=10)
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("report", help="per-LR regime summary")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"oui-lab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError) as exc:
        print(f"oui-lab {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
