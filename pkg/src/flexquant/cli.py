"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 solver error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import envelope as env_mod
from . import experiment as ex
from . import market, provision
from .errors import ConfigError, InfeasibleBand, SolverFailure

log = logging.getLogger("flexquant")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4


def _header(cfg, seed=None):
    h = {"config_hash": ex.config_hash(cfg)}
    h["seed"] = seed if seed is not None else ",".join(str(s) for s in cfg["seeds"])
    return h


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if abs(v) < 5e-13:
            v = 0.0
        return f"{v:.10g}"
    return str(v)


def _write_table(path, header, columns, rows):
    with open(path, "w", newline="") as fh:
        for key, val in header.items():
            fh.write(f"# {key}: {val}\n")
        wr = csv.writer(fh)
        wr.writerow(columns)
        for row in rows:
            wr.writerow([_fmt(v) for v in row])


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=env_mod._json_default) + "\n")


def _out(cfg, sub=None) -> Path:
    p = Path(cfg["out"]) if sub is None else Path(cfg["out"]) / sub
    p.mkdir(parents=True, exist_ok=True)
    return p


def _needs_library(cfg):
    return "UAF-fixed" in cfg["formulations"]


# --- subcommands -------------------------------------------------------------

def cmd_envelope(cfg, jobs):
    library = ex.load_or_train_library(cfg, jobs=jobs) if _needs_library(cfg) else None
    out = _out(cfg, "envelope")
    results = ex.run_envelopes(cfg, library, jobs)
    summary_rows, by_label, solver_err = [], {}, False
    for seed, envs, errors in results:
        for label, env in envs:
            name = f"{_safe(label)}_seed{seed}"
            env_mod.write_envelope_csv(out / f"{name}.csv", env, _header(cfg, seed))
            doc = dict(env_mod.envelope_summary(env), seed=seed, label=label, config_hash=ex.config_hash(cfg))
            _write_json(out / f"{name}.json", doc)
            by_label.setdefault(label, []).append(env)
            for metric in ("objective_up", "objective_down", "fea", "mfph"):
                summary_rows.append((seed, label, metric, doc[metric]))
        for label, msg, is_solver in errors:
            log.error("seed %d %s: %s", seed, label, msg)
            summary_rows.append((seed, label, "error", msg))
            solver_err |= is_solver
    for label, envs in by_label.items():
        mean_up = np.mean([e.E_up for e in envs], axis=0)
        mean_dn = np.mean([e.E_down for e in envs], axis=0)
        _write_table(out / f"{_safe(label)}_mean.csv", _header(cfg), ["k", "E_up", "E_down"],
                     [(k, mean_up[k], mean_dn[k]) for k in range(mean_up.size)])
    _write_table(out / "summary.csv", _header(cfg), ["seed", "formulation", "metric", "value"], summary_rows)
    return EXIT_SOLVER if solver_err else EXIT_OK


def cmd_train_policies(cfg, jobs):
    art = ex.build_building(cfg)
    lib, rows = ex.train_library(cfg, art, jobs)
    out = _out(cfg)
    lib.metadata["config_hash"] = ex.config_hash(cfg)
    lib.save(out / "policies.json")
    _write_table(out / "policy_distance.csv", _header(cfg), ["samples", "direction", "mean_distance", "max_distance"],
                 [(r["samples"], r["direction"], r["mean_distance"], r["max_distance"]) for r in rows])
    return EXIT_OK


def _bid_for(cfg, seed, library):
    art = ex.build_building(cfg)
    prices = ex.day_prices(cfg, seed)
    out = []
    for width, eps, suffix in ex.variants(cfg):
        inp = ex.day_instance(cfg, art, seed, width, eps)
        for name in cfg["formulations"]:
            env, _ = ex.envelope_for(cfg, name, inp, library)
            base = market.compute_baseline(inp, prices, env=env)
            out.append((name + suffix, inp, env, prices, market.bid_reserves(env, base, prices, inp.limits)))
    return out


def cmd_bid(cfg, jobs):
    library = ex.load_or_train_library(cfg, jobs=jobs) if _needs_library(cfg) else None
    out = _out(cfg, "bids")
    rows = []
    for seed in cfg["seeds"]:
        for label, inp, env, prices, bid in _bid_for(cfg, seed, library):
            market.write_bid_csv(out / f"{_safe(label)}_seed{seed}.csv", bid, _header(cfg, seed), inp.hour)
            rows.append((seed, label, bid.revenue, bid.certificate["worst"]))
    _write_table(out / "summary.csv", _header(cfg), ["seed", "formulation", "reserve_revenue", "certificate_worst"], rows)
    return EXIT_OK


def cmd_simulate(cfg, jobs):
    library = ex.load_or_train_library(cfg, jobs=jobs) if _needs_library(cfg) else None
    rows, failures, artifacts = ex.run_batch(cfg, library, jobs, keep=True)
    out = _out(cfg, "traces")
    for (seed, label, sc_label), a in sorted(artifacts.items(), key=lambda kv: kv[0]):
        provision.write_trace_csv(out / f"{_safe(label)}_{sc_label}_seed{seed}.csv", a["trace"], _header(cfg, seed))
    _write_results(cfg, rows)
    return _failure_code(failures)


def cmd_montecarlo(cfg, jobs):
    art = ex.build_building(cfg)
    out = _out(cfg, "montecarlo")
    rows = []
    n = int(cfg["montecarlo"]["samples"])
    for seed in cfg["seeds"]:
        for width, eps, suffix in ex.variants(cfg):
            inp = ex.day_instance(cfg, art, seed, width, eps)
            env = env_mod.envelope_ua(inp)
            freq, _ = ex.montecarlo_validation(inp, env.p_up, n, seed)
            for k in range(freq.shape[0]):
                for j in range(freq.shape[1]):
                    rows.append((seed, "UA" + suffix, k, j, freq[k, j]))
    _write_table(out / "violation_frequency.csv", _header(cfg), ["seed", "formulation", "k", "room", "frequency"], rows)
    return EXIT_OK


def cmd_sweep(cfg, jobs):
    library = ex.load_or_train_library(cfg, jobs=jobs) if _needs_library(cfg) else None
    table, failures = ex.sweep_batch(cfg, library, jobs)
    cols = ["scenario", "formulation", "multiplier", "net", "adaptation_cost", "adaptation_volume",
            "penalty_cost", "reserve_revenue"]
    _write_table(_out(cfg) / "sweep.csv", _header(cfg), cols, [[r[c] for c in cols] for r in table])
    cross = []
    for sc in sorted({r["scenario"] for r in table}):
        sub = [r for r in table if r["scenario"] == sc]
        m, f = provision.crossover_multiplier(sub, "UI")
        cross.append((sc, "" if m is None else m, "" if f is None else f))
    _write_table(_out(cfg) / "crossover.csv", _header(cfg), ["scenario", "multiplier", "formulation"], cross)
    return _failure_code(failures)


def cmd_run(cfg, jobs):
    library = ex.load_or_train_library(cfg, jobs=jobs) if _needs_library(cfg) else None
    rows, failures, _ = ex.run_batch(cfg, library, jobs)
    _write_results(cfg, rows)
    if failures:
        _write_table(_out(cfg) / "failures.csv", _header(cfg), ["seed", "formulation", "message"], failures)
    return _failure_code(failures)


def _write_results(cfg, rows):
    rows = sorted(rows, key=lambda r: (r[0], r[1], r[2], r[3]))
    _write_table(_out(cfg) / "results.csv", _header(cfg), ["seed", "formulation", "scenario", "metric", "value"], rows)


def _failure_code(failures):
    return EXIT_SOLVER if failures else EXIT_OK


def _safe(label):
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in label)


COMMANDS = {
    "envelope": cmd_envelope,
    "train-policies": cmd_train_policies,
    "bid": cmd_bid,
    "simulate": cmd_simulate,
    "montecarlo": cmd_montecarlo,
    "sweep": cmd_sweep,
    "run": cmd_run,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="flexquant", description="Building flexibility envelopes and reserve provision.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON configuration file")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    common.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {"out": args.out, "jobs": args.jobs, "seeds": None if args.seed is None else [args.seed]}
        cfg = ex.load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        sys.stdout.write(ex.dump_config(cfg))
        return EXIT_OK
    jobs = cfg["jobs"]
    try:
        return COMMANDS[args.command](cfg, jobs)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverFailure, InfeasibleBand) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
