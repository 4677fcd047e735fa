"""Acceptance criteria; each test prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

from flexquant import cli
from flexquant import experiment as ex
from flexquant.envelope import (
    envelope_ua,
    envelope_uaf_fixed,
    envelope_uaf_opt,
    envelope_ui,
    compute_mfph,
)
from flexquant.instances import InstanceConfig, make_instance
from flexquant.market import bid_certificate, bid_reserves, compute_baseline, generate_activation, synth_prices
from flexquant.market import utilization_rate
from flexquant.policies import AffinePolicy
from flexquant.provision import crossover_multiplier
from flexquant.uncertainty import gaussian_quantile

import test_envelope as toy
import test_market as bidgrid
from test_uncertainty import _monte_carlo_outputs, erfinv_quantile, synthetic_basis

SEEDS = list(range(20))


@pytest.fixture
def report(capsys):
    def _report(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, detail
    return _report


@pytest.fixture(scope="module")
def batch():
    """Envelopes of the 20-instance batch, shared by criteria 3, 4 and 8."""
    out = []
    t0 = time.perf_counter()
    for seed in SEEDS:
        inp = make_instance(seed)
        uaf, pu, pd = envelope_uaf_opt(inp)
        zero = AffinePolicy.zeros(inp.spec.N, inp.art.model.np_, inp.art.model.nd + inp.art.model.ny)
        out.append({"inp": inp, "UI": envelope_ui(inp), "UA": envelope_ua(inp), "UAF-opt": uaf,
                    "UAF-fixed0": envelope_uaf_fixed(inp, zero), "policies": (pu, pd)})
    out[0]["elapsed"] = time.perf_counter() - t0
    return out


def test_01_covariance_oracle(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10, 15):
        m, noise, wem, op, basis = synthetic_basis(seed, N=24, Ny=3)
        ys = _monte_carlo_outputs(m, noise, wem, 24, 100_000, np.random.default_rng(seed))
        for k in (1, 6, 12, 24):
            ana = np.diag(basis.output_covariance(k))
            emp = np.var(ys[k], axis=0)
            worst = max(worst, float(np.max(np.abs(emp - ana) / ana)))
    elapsed = time.perf_counter() - t0
    report(1, "analytic output variance matches Monte Carlo", worst <= 0.05 and elapsed < 120,
           f"worst rel err {worst:.4f}, {elapsed:.0f} s")


def test_02_quantile(report):
    anchors = {0.8: 0.841621, 0.9: 1.281552, 0.95: 1.644854}
    err = max(abs(gaussian_quantile(p) - erfinv_quantile(p)) for p in anchors)
    anchor = max(abs(gaussian_quantile(p) - q) for p, q in anchors.items())
    report(2, "Gaussian quantile vs erf-inverse", err <= 1e-6 and anchor <= 1e-6,
           f"oracle err {err:.1e}, anchor err {anchor:.1e}")


def test_03_formulation_nesting(report, batch):
    bad = []
    for seed, b in zip(SEEDS, batch):
        ui, ua, uaf, fixed0 = b["UI"], b["UA"], b["UAF-opt"], b["UAF-fixed0"]
        if not (ua.objective_up <= ui.objective_up + 1e-7 and ua.objective_down >= ui.objective_down - 1e-7):
            bad.append((seed, "UA vs UI"))
        if not (uaf.objective_up >= ua.objective_up - 1e-7 and uaf.objective_down <= ua.objective_down + 1e-7):
            bad.append((seed, "UAF-opt vs UA"))
        if (abs(fixed0.objective_up - ua.objective_up) > 1e-8
                or abs(fixed0.objective_down - ua.objective_down) > 1e-8):
            bad.append((seed, "UAF-fixed(0) vs UA"))
    elapsed = batch[0]["elapsed"]
    report(3, "UA inside UI, UAF-opt outside UA, UAF-fixed(0) = UA on 20 instances",
           not bad and elapsed < 300, f"violations {bad}, {elapsed:.0f} s")


def test_04_mfph_monotone(report, batch):
    worse = [s for s, b in zip(SEEDS, batch) if b["UAF-opt"].mfph < b["UA"].mfph]
    inp = make_instance(2, InstanceConfig(noise_scale=2.5))
    uaf, _, _ = envelope_uaf_opt(inp)
    ua_mfph = compute_mfph(inp.art.basis, inp.comfort)
    ok = not worse and ua_mfph < inp.spec.N and uaf.mfph >= ua_mfph
    report(4, "MFPH(UAF-opt) >= MFPH(UA), finite-MFPH regime reached", ok,
           f"batch violations {worse}, noisy instance UA {ua_mfph} / UAF-opt {uaf.mfph}")


def test_05_brute_force(report):
    fails = []
    T_ui = toy.toy_band(0.0, sw=0.0)
    T0 = toy.toy_band(0.0)
    TS = toy.toy_band(toy.M_STAR)
    gains = np.zeros((2, 1, 2))
    gains[1, 0, 1] = toy.M_STAR
    uaf, pu, pd = envelope_uaf_opt(toy.toy_inputs(TS))
    cases = [
        ("UI", lambda: toy._check_against_grid(envelope_ui(toy.toy_inputs(T_ui, sw=0.0)), T_ui, [0.0], sw=0.0)),
        ("UA", lambda: toy._check_against_grid(envelope_ua(toy.toy_inputs(T0)), T0, [0.0])),
        ("UAF-fixed", lambda: toy._check_against_grid(envelope_uaf_fixed(toy.toy_inputs(TS), AffinePolicy(gains)),
                                                      TS, [toy.M_STAR])),
        ("UAF-opt", lambda: toy._check_against_grid(uaf, TS, toy.M_GRID, gains={"up": pu.gains, "down": pd.gains})),
    ]
    cases += [(f"bid case {c}", lambda c=c: bidgrid.test_two_step_bid_matches_grid(c)) for c in range(6)]
    for name, check in cases:
        try:
            check()
        except AssertionError as exc:
            fails.append(f"{name}: {exc}")
    report(5, "2-step formulations and bidding LP match grid search to 1% of the grid step", not fails,
           "; ".join(fails) or f"{len(cases)} cases")


def test_06_chance_constraint_validity(report):
    t0 = time.perf_counter()
    inp = make_instance(0)
    env = envelope_ua(inp)
    freq, _ = ex.montecarlo_validation(inp, env.p_up, 500, 0)
    worst = float(freq[1:inp.spec.N + 1].max())
    elapsed = time.perf_counter() - t0
    report(6, "open-loop UA upper profile violation frequency <= 0.24", worst <= 0.24 and elapsed < 180,
           f"worst {worst:.3f}, {elapsed:.0f} s")


def test_07_utilization(report):
    bid = bidgrid._uniform_bid(10_000)
    u = utilization_rate(generate_activation(bid, seed=0), bid)
    report(7, "activation utilization over 10,000 steps in [0.02, 0.04]", 0.02 <= u <= 0.04, f"{u:.4f}")


def test_08_bid_certificate(report, batch):
    worst, bids = 0.0, 0
    for seed, b in zip(SEEDS, batch):
        inp = b["inp"]
        N = inp.spec.N
        prices = synth_prices(seed, N + 1, reserve_scale=3.0)
        for name in ("UI", "UA", "UAF-opt"):
            env = b[name]
            base = compute_baseline(inp, prices, env=env)
            bid = bid_reserves(env, base, prices, inp.limits)
            worst = max(worst, bid_certificate(bid.p_plus, bid.p_minus, base, env, inp.limits)["worst"])
            for sign, res in ((1, bid.p_plus), (-1, bid.p_minus)):
                p = base[:N] + sign * res
                E = np.concatenate([[0.0], np.cumsum(p.sum(axis=1)) * inp.art.model.dt])
                worst = max(worst, float(np.max(E[1:] - env.E_up[1:N + 1])),
                            float(np.max(env.E_down[1:N + 1] - E[1:])),
                            float(np.max(p - inp.limits.p_max)), float(np.max(inp.limits.p_min - p)))
            bids += 1
    report(8, "full-activation paths stay inside the envelope and power limits", worst <= 1e-6,
           f"{bids} bids, worst excess {worst:.1e}")


def _means(rows):
    acc = {}
    for _, label, scenario, metric, value in rows:
        acc.setdefault((label, scenario, metric), []).append(value)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def test_09_scenario_ordering(report):
    cfg = ex.load_config(None, {"seeds": SEEDS, "jobs": 1})
    rows, failures, _ = ex.run_batch(cfg, None, 1)
    m = _means(rows)
    checks = []
    for f in cfg["formulations"]:
        checks.append((f"{f} net S1 >= S2", m[(f, "S1-flex", "net")] >= m[(f, "S2-flex", "net")]))
        checks.append((f"{f} comfort-first discomfort", m[(f, "S2-comfort", "discomfort_avg")]
                       <= m[(f, "S2-flex", "discomfort_avg")]))
    checks.append(("UI discomfort S2 >= S1", m[("UI", "S2-flex", "discomfort_avg")]
                   >= m[("UI", "S1-flex", "discomfort_avg")]))
    bad = [name for name, ok in checks if not ok]
    report(9, "scenario ordering over 20 matched seeds", not bad and not failures,
           f"failed {bad}" if bad else f"UI discomfort S1 {m[('UI', 'S1-flex', 'discomfort_avg')]:.4f} "
           f"S2 {m[('UI', 'S2-flex', 'discomfort_avg')]:.4f}")


def test_10_price_crossover(report):
    cfg = ex.load_config(None, {"seeds": list(range(10)), "jobs": 1, "formulations": ["UI", "UA"],
                                "scenarios": [{"mode": "IntraDay", "priority": "FlexibilityFirst"}]})
    table, failures = ex.sweep_batch(cfg)
    mult, form = crossover_multiplier(table, "UI")
    monotone = True
    for f in ("UI", "UA"):
        cost = [r["adaptation_cost"] for r in sorted(table, key=lambda r: r["multiplier"]) if r["formulation"] == f]
        monotone &= all(b >= a - 1e-9 for a, b in zip(cost, cost[1:]))
    report(10, "finite intra-day price crossover, monotone adaptation cost",
           mult is not None and monotone and not failures, f"crossover at x{mult} by {form}")


def test_11_determinism(report, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["run", "--seed", "0", "--out", str(out), "--jobs", "1"]) == 0
        outs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    report(11, "two identical run invocations give byte-identical files", outs[0] == outs[1] and outs[0],
           f"{len(outs[0])} files")


def test_12_performance(report):
    inp = make_instance(0)
    t0 = time.perf_counter()
    envelope_ua(inp)
    t_ua = time.perf_counter() - t0
    t0 = time.perf_counter()
    envelope_uaf_opt(inp)
    t_uaf = time.perf_counter() - t0
    t0 = time.perf_counter()
    ex.run_day(ex.load_config(None, {}), 0)
    t_day = time.perf_counter() - t0
    report(12, "UA LP < 1 s, UAF-opt SOCP < 60 s, single-seed pipeline < 3 min",
           t_ua < 1 and t_uaf < 60 and t_day < 180, f"{t_ua:.2f} s / {t_uaf:.1f} s / {t_day:.0f} s")
