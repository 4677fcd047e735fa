"""Experiment configuration and batch orchestration used by the command line."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import envelope as env_mod
from . import market, provision
from .envelope import ComfortSpec, EnvelopeInputs, EnvelopeProblemSpec, PowerLimits, build_artifacts
from .errors import ConfigError, FlexQuantError, InfeasibleBand, SolverFailure
from .instances import synth_weather
from .model import generate_synthetic_building, load_model, steady_state_point
from .policies import PolicyLibrary, policy_distance, select_policy, weather_features
from .provision import TruthSampleFactory
from .uncertainty import WeatherErrorModel

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "model": {"source": "synthetic", "seed": 0, "Ny": 3, "path": None, "noise_scale": 1.0},
    "horizon": 24,
    "hour": 0,
    "comfort": {"center": 21.5, "widths": [2.0], "eps_T": 0.05},
    "eps_C": [0.2],
    "power": {"p_min": 0.0, "p_max": 2.0},
    "lambda": 1e3,
    "formulations": ["UI", "UA", "UAF-opt"],
    "scenarios": [
        {"mode": "IntraDay", "priority": "FlexibilityFirst"},
        {"mode": "Rebound", "priority": "FlexibilityFirst"},
        {"mode": "Rebound", "priority": "ComfortFirst"},
    ],
    "prices": {"source": "synthetic", "path": None, "reserve_scale": 3.0, "id_fee": 0.2,
               "imbalance_factor": 10.0},
    "activation": {"enabled": True, "p_act": 0.15, "max_fraction": 0.4},
    "truth": {"noise": True},
    "cop": 1.0,
    "policies": {"path": None, "mode": "average", "train_seeds": list(range(1000, 1010)),
                 "heldout_seeds": list(range(2000, 2005)), "clusters": 3,
                 "sample_counts": [1, 2, 5, 10]},
    "montecarlo": {"samples": 500},
    "sweep": {"multipliers": [1, 2, 3, 4, 5]},
    "seeds": [0],
    "jobs": None,
    "out": "out",
}

RUNTIME_KEYS = ("jobs", "out")
SCENARIO_LABELS = {("IntraDay", "FlexibilityFirst"): "S1-flex", ("IntraDay", "ComfortFirst"): "S1-comfort",
                   ("Rebound", "FlexibilityFirst"): "S2-flex", ("Rebound", "ComfortFirst"): "S2-comfort",
                   ("ReboundStrict", "FlexibilityFirst"): "S2strict-flex",
                   ("ReboundStrict", "ComfortFirst"): "S2strict-comfort"}


# --- configuration -----------------------------------------------------------

def _merge(base, user, path=""):
    out = copy.deepcopy(base)
    for key, val in user.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key '{where}'")
        if isinstance(base[key], dict) and base[key] and isinstance(val, dict):
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def load_config(path=None, overrides=None) -> dict:
    user = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration file {path}: {exc}") from exc
        try:
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"configuration file {path} is not valid YAML/JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("configuration document must be a mapping")
    cfg = _merge(DEFAULT_CONFIG, user)
    for key, val in (overrides or {}).items():
        if val is not None:
            cfg[key] = val
    return validate_config(cfg)


def _as_list(cfg, key):
    val = cfg[key]
    if not isinstance(val, list):
        val = [val]
    if not val:
        raise ConfigError(f"'{key}' must be a non-empty list")
    return val


def validate_config(cfg: dict) -> dict:
    cfg["eps_C"] = [float(e) for e in _as_list(cfg, "eps_C")]
    for e in cfg["eps_C"]:
        if not 0.0 < e < 1.0:
            raise ConfigError(f"eps_C must lie in (0, 1), got {e}")
    eps_T = float(cfg["comfort"]["eps_T"])
    if not 0.0 < eps_T < 1.0:
        raise ConfigError(f"comfort.eps_T must lie in (0, 1), got {eps_T}")
    widths = cfg["comfort"]["widths"]
    widths = widths if isinstance(widths, list) else [widths]
    if not widths or any(float(w) <= 0 for w in widths):
        raise ConfigError("comfort.widths must be a non-empty list of positive numbers")
    cfg["comfort"]["widths"] = [float(w) for w in widths]
    if int(cfg["horizon"]) < 1:
        raise ConfigError("horizon must be >= 1")
    forms = _as_list(cfg, "formulations")
    for f in forms:
        if f not in env_mod.FORMULATIONS:
            raise ConfigError(f"formulations: unknown formulation {f!r}")
    seeds = _as_list(cfg, "seeds")
    cfg["seeds"] = [int(s) for s in seeds]
    for sc in _as_list(cfg, "scenarios"):
        try:
            provision.ScenarioConfig(mode=sc.get("mode", "IntraDay"), priority=sc.get("priority", "FlexibilityFirst"))
        except (ValueError, AttributeError) as exc:
            raise ConfigError(f"scenarios: {exc}") from exc
    p = cfg["power"]
    if not 0.0 <= float(p["p_min"]) <= float(p["p_max"]):
        raise ConfigError("power: need 0 <= p_min <= p_max")
    if cfg["model"]["source"] not in ("synthetic", "file"):
        raise ConfigError("model.source must be 'synthetic' or 'file'")
    if cfg["model"]["source"] == "file" and not (cfg["model"]["path"] and Path(cfg["model"]["path"]).exists()):
        raise ConfigError(f"model.path {cfg['model']['path']!r} does not exist")
    if cfg["prices"]["source"] not in ("synthetic", "file"):
        raise ConfigError("prices.source must be 'synthetic' or 'file'")
    if cfg["prices"]["source"] == "file" and not (cfg["prices"]["path"] and Path(cfg["prices"]["path"]).exists()):
        raise ConfigError(f"prices.path {cfg['prices']['path']!r} does not exist")
    if cfg["policies"]["path"] and not Path(cfg["policies"]["path"]).exists():
        raise ConfigError(f"policies.path {cfg['policies']['path']!r} does not exist")
    if cfg["jobs"] is not None and int(cfg["jobs"]) < 1:
        raise ConfigError("jobs must be >= 1")
    if any(float(m) <= 0 for m in cfg["sweep"]["multipliers"]):
        raise ConfigError("sweep.multipliers must be positive")
    if int(cfg["montecarlo"]["samples"]) < 1:
        raise ConfigError("montecarlo.samples must be >= 1")
    return cfg


def config_hash(cfg: dict) -> str:
    doc = {k: v for k, v in cfg.items() if k not in RUNTIME_KEYS}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


# --- building blocks -----------------------------------------------------------

def build_building(cfg):
    N = int(cfg["horizon"])
    m = cfg["model"]
    if m["source"] == "file":
        model, noise = load_model(m["path"])
        if noise is None:
            raise ConfigError("model file must include a noise section")
    else:
        model, noise = generate_synthetic_building(int(m["seed"]), int(m["Ny"]))
    wem = WeatherErrorModel.default(model.nd)
    scale = float(m["noise_scale"])
    if scale != 1.0:
        from .instances import scale_noise
        noise, wem = scale_noise(noise, wem, scale)
    return build_artifacts(model, noise, wem, N)


def day_instance(cfg, art, seed: int, width: float, eps_C: float) -> EnvelopeInputs:
    N, hour = int(cfg["horizon"]), int(cfg["hour"])
    mdl = art.model
    rng = np.random.default_rng([seed, 7])
    forecast = synth_weather(int(rng.integers(2**31)), N + 2, hour, mdl.dt)
    center = float(cfg["comfort"]["center"])
    start = center + rng.uniform(-0.3, 0.3, mdl.ny)
    x0, _ = steady_state_point(mdl, forecast[0], start)
    comfort = ComfortSpec.band(center, width, mdl.ny, eps_C=eps_C, eps_T=float(cfg["comfort"]["eps_T"]))
    p = cfg["power"]
    limits = PowerLimits(np.full(mdl.np_, float(p["p_min"])), np.full(mdl.np_, float(p["p_max"])))
    return EnvelopeInputs(art, x0, forecast, comfort, limits, EnvelopeProblemSpec(N, float(cfg["lambda"])), hour)


def day_prices(cfg, seed: int) -> market.PriceSeries:
    N, hour = int(cfg["horizon"]), int(cfg["hour"])
    pc = cfg["prices"]
    if pc["source"] == "file":
        return market.load_prices(pc["path"]).window(hour, N + 1)
    return market.synth_prices(seed, N + 1, hour, reserve_scale=float(pc["reserve_scale"]),
                               id_fee=float(pc["id_fee"]), imbalance_factor=float(pc["imbalance_factor"]))


def variants(cfg):
    """(width, eps_C, label suffix) for every comfort setting in the grid."""
    widths, epss = cfg["comfort"]["widths"], cfg["eps_C"]
    multi = len(widths) * len(epss) > 1
    for w in widths:
        for e in epss:
            yield w, e, (f"[w={w:g},eps={e:g}]" if multi else "")


def scenario_configs(cfg):
    out = []
    for sc in cfg["scenarios"]:
        sc_cfg = provision.ScenarioConfig(mode=sc.get("mode", "IntraDay"),
                                          priority=sc.get("priority", "FlexibilityFirst"),
                                          cop=float(cfg["cop"]))
        out.append((SCENARIO_LABELS[(sc_cfg.mode, sc_cfg.priority)], sc_cfg))
    return out


def load_or_train_library(cfg, art=None, jobs=1):
    path = cfg["policies"]["path"]
    if path:
        return PolicyLibrary.load(path)
    art = build_building(cfg) if art is None else art
    lib, _ = train_library(cfg, art, jobs=jobs)
    return lib


def envelope_for(cfg, name, inp, library=None):
    """Returns (envelope, policies) or raises."""
    if name == "UAF-fixed":
        if library is None:
            raise ConfigError("UAF-fixed needs a policy library")
        feats = weather_features(inp.forecast)
        pu = select_policy(library, inp.hour, feats, "up")
        pd = select_policy(library, inp.hour, feats, "down")
        return env_mod.envelope_uaf_fixed(inp, pu, pd), (pu, pd)
    return env_mod.compute_envelope(name, inp)


# --- workers (top level so they pickle) ----------------------------------------

def _pool_map(fn, items, jobs):
    items = list(items)
    jobs = min(int(jobs or os.cpu_count() or 1), max(len(items), 1))
    if jobs <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _envelope_task(args):
    cfg, seed, library = args
    art = build_building(cfg)
    out, errors = [], []
    for width, eps, suffix in variants(cfg):
        inp = day_instance(cfg, art, seed, width, eps)
        for name in cfg["formulations"]:
            try:
                env, _ = envelope_for(cfg, name, inp, library)
                out.append((name + suffix, env))
            except (SolverFailure, InfeasibleBand) as exc:
                errors.append((name + suffix, str(exc), isinstance(exc, SolverFailure)))
    return seed, out, errors


def run_envelopes(cfg, library=None, jobs=1):
    return _pool_map(_envelope_task, [(cfg, s, library) for s in cfg["seeds"]], jobs)


def _optimum_task(args):
    cfg, seed = args
    art = build_building(cfg)
    width, eps, _ = next(variants(cfg))
    inp = day_instance(cfg, art, seed, width, eps)
    _, pu, pd = env_mod.envelope_uaf_opt(inp)
    return seed, pu, pd, weather_features(inp.forecast)


def train_library(cfg, art=None, jobs=1):
    """Trains the policy library and the distance-vs-sample-count table."""
    pc = cfg["policies"]
    train = [int(s) for s in pc["train_seeds"]]
    held = [int(s) for s in pc["heldout_seeds"]]
    results = _pool_map(_optimum_task, [(cfg, s) for s in train + held], jobs)
    by_seed = {seed: (pu, pd, f) for seed, pu, pd, f in results}
    hour = int(cfg["hour"])
    if pc["mode"] == "cluster":
        from .policies import train_cluster_policies
        feats = np.array([by_seed[s][2] for s in train])
        opt = {i: by_seed[s] for i, s in enumerate(train)}
        lib = train_cluster_policies(list(range(len(train))), feats, int(pc["clusters"]), seed=train[0] if train else 0,
                                     hour=hour, solve=lambda i, d: opt[i][0] if d == "up" else opt[i][1])
    else:
        from .policies import average_policy
        lib = PolicyLibrary("average", metadata={"samples": len(train), "train_seeds": train})
        for j, direction in enumerate(("up", "down")):
            lib.add(hour, direction, average_policy([by_seed[s][j] for s in train], hour, direction))
    rows = []
    from .policies import average_policy
    for n in pc["sample_counts"]:
        n = int(n)
        if n < 1 or n > len(train) or not held:
            continue
        for j, direction in enumerate(("up", "down")):
            avg = average_policy([by_seed[s][j] for s in train[:n]], hour, direction)
            dists = [policy_distance(avg, by_seed[s][j]) for s in held]
            rows.append({"samples": n, "direction": direction,
                         "mean_distance": float(np.mean([d[0] for d in dists])),
                         "max_distance": float(np.max([d[1] for d in dists]))})
    return lib, rows


def _run_task(args):
    cfg, seed, library, keep = args
    return run_day(cfg, seed, library, keep)


def run_day(cfg, seed: int, library=None, keep=False):
    """Full pipeline for one day: envelope, baseline, bid, activation, provision.

    Returns (rows, failures, artifacts) where rows are
    (seed, formulation, scenario, metric, value) tuples.
    """
    art = build_building(cfg)
    prices = day_prices(cfg, seed)
    scen = scenario_configs(cfg)
    act = cfg["activation"]
    params = market.ActivationParams(float(act["p_act"]), float(act["max_fraction"]))
    truth_factory = TruthSampleFactory(art, int(cfg["horizon"]), seed, bool(cfg["truth"]["noise"]))
    rows, failures, artifacts = [], [], {}
    for width, eps, suffix in variants(cfg):
        inp = day_instance(cfg, art, seed, width, eps)
        for name in cfg["formulations"]:
            label = name + suffix
            try:
                env, _ = envelope_for(cfg, name, inp, library)
                base = market.compute_baseline(inp, prices, env=env)
                bid = market.bid_reserves(env, base, prices, inp.limits)
            except (SolverFailure, InfeasibleBand, FlexQuantError) as exc:
                log.warning("seed %d %s: %s", seed, label, exc)
                failures.append((seed, label, str(exc)))
                continue
            signal = (market.generate_activation(bid, params, seed) if act["enabled"]
                      else market.ActivationSignal.none(bid.N, art.model.np_))
            rows.append((seed, label, "-", "fea", env_mod.compute_fea(env)))
            rows.append((seed, label, "-", "mfph", float(env.mfph)))
            rows.append((seed, label, "-", "bid_revenue", bid.revenue))
            rows.append((seed, label, "-", "utilization", market.utilization_rate(signal, bid)))
            for sc_label, sc_cfg in scen:
                trace = provision.simulate_closed_loop(seed, inp, bid, signal, sc_cfg, prices,
                                                       truth=truth_factory())
                rb = provision.settle(trace, bid, signal, prices, sc_cfg)
                avg, mx, vh = provision.discomfort_metrics(trace, inp.comfort)
                for metric, value in rb.as_dict().items():
                    rows.append((seed, label, sc_label, metric, value))
                rows += [(seed, label, sc_label, "discomfort_avg", avg),
                         (seed, label, sc_label, "discomfort_max", mx),
                         (seed, label, sc_label, "violation_hours", vh),
                         (seed, label, sc_label, "controller_failures", float(trace.failures))]
                if keep:
                    artifacts[(label, sc_label)] = {"trace": trace, "bid": bid, "signal": signal, "env": env,
                                                    "inp": inp, "prices": prices, "config": sc_cfg,
                                                    "breakdown": rb}
    return rows, failures, artifacts


def run_batch(cfg, library=None, jobs=1, keep=False):
    results = _pool_map(_run_task, [(cfg, s, library, keep) for s in cfg["seeds"]], jobs)
    rows, failures, artifacts = [], [], {}
    for seed, (r, f, a) in zip(cfg["seeds"], results):
        rows += r
        failures += f
        for key, val in a.items():
            artifacts[(seed,) + key] = val
    return rows, failures, artifacts


def sweep_batch(cfg, library=None, jobs=1):
    """Price-sensitivity rows per scenario: re-simulates with scaled intra-day prices."""
    _, failures, artifacts = run_batch(cfg, library, jobs, keep=True)
    by_scenario = {}
    for (seed, label, sc_label), a in artifacts.items():
        run = provision.ProvisionRun(label, seed, a["inp"], a["bid"], a["signal"], a["prices"], a["config"])
        by_scenario.setdefault(sc_label, []).append(run)
    out = []
    for sc_label, runs in sorted(by_scenario.items()):
        table = provision.price_sensitivity_sweep(runs, cfg["sweep"]["multipliers"])
        for row in table:
            out.append(dict(row, scenario=sc_label))
    return out, failures


def montecarlo_validation(inp: EnvelopeInputs, powers, samples: int, seed: int):
    """Open-loop application of ``powers``: per-(step, room) violation frequency.

    Returns (frequency (N+2, Ny), temperatures (samples, N+2, Ny)).
    """
    art = inp.art
    mdl = art.model
    K = inp.spec.N + 2
    factory = TruthSampleFactory(art, K - 1, seed, True)
    temps = np.zeros((samples, K, mdl.ny))
    for i in range(samples):
        t = factory.draw(K)
        weather = inp.forecast + t.weather_error
        x = np.array(inp.x0, float)
        for k in range(K):
            temps[i, k] = mdl.C @ x + mdl.D_d @ weather[k] + mdl.D_p @ powers[k] + t.v[k]
            x = mdl.A @ x + mdl.B_d @ weather[k] + mdl.B_p @ powers[k] + t.w[k]
    viol = provision.band_violation(temps, inp.comfort) > 0
    return viol.mean(axis=0), temps
