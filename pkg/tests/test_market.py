import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexquant.envelope import FlexibilityEnvelope, PowerLimits, cumulative_energy, envelope_ua
from flexquant.errors import InfeasibleBaseline, ParseError, SchemaError
from flexquant.market import (
    PRICE_COLUMNS,
    ActivationParams,
    ActivationSignal,
    PriceSeries,
    ReserveBid,
    bid_certificate,
    bid_reserves,
    compute_baseline,
    generate_activation,
    load_prices,
    synth_prices,
    utilization_rate,
    write_bid_csv,
    write_prices,
)


def flat_prices(N, r_plus=0.01, r_minus=0.01, da=0.1):
    one = np.ones(N)
    return PriceSeries(r_plus * one, r_minus * one, 0.15 * one, 0.05 * one, da * one,
                       1.2 * da * one, 1.2 * da * one, 10 * da * one)


def envelope_from_energy(E_up, E_down):
    E_up, E_down = np.asarray(E_up, float), np.asarray(E_down, float)
    z = np.zeros((E_up.size, 1))
    return FlexibilityEnvelope("UI", E_up, E_down, z, z, z, z, 0.0, 0.0)


# --- prices ------------------------------------------------------------------

def test_price_round_trip(tmp_path):
    p = synth_prices(3)
    write_prices(tmp_path / "p.csv", p)
    back = load_prices(tmp_path / "p.csv")
    assert len(back) == 24
    np.testing.assert_allclose(back.r_minus, p.r_minus, rtol=1e-9)


def test_price_columns_any_order(tmp_path):
    cols = list(reversed(PRICE_COLUMNS))
    rows = [",".join(cols)] + [",".join("3" if c == "hour" else "0.1" for c in cols)]
    rows += [",".join(str(h) if c == "hour" else "0.1" for c in cols) for h in (0, 1, 2)]
    (tmp_path / "p.csv").write_text("\n".join(rows) + "\n")
    assert len(load_prices(tmp_path / "p.csv")) == 4


def test_missing_column_named(tmp_path):
    cols = [c for c in PRICE_COLUMNS if c != "r_minus"]
    (tmp_path / "p.csv").write_text(",".join(cols) + "\n" + ",".join(["0"] + ["0.1"] * (len(cols) - 1)) + "\n")
    with pytest.raises(SchemaError, match="r_minus"):
        load_prices(tmp_path / "p.csv")


def test_decimal_comma_rejected(tmp_path):
    header = ";".join(PRICE_COLUMNS)
    good = ",".join(["0"] + ["0.1"] * 8)
    bad = ",".join(["1", '"0,1"'] + ["0.1"] * 7)
    (tmp_path / "p.csv").write_text(",".join(PRICE_COLUMNS) + "\n" + good + "\n" + bad + "\n")
    with pytest.raises(ParseError, match="row 3"):
        load_prices(tmp_path / "p.csv")


def test_synth_prices_rules():
    a, b = synth_prices(5), synth_prices(5)
    for c in PRICE_COLUMNS[1:]:
        np.testing.assert_array_equal(getattr(a, c), getattr(b, c))
    np.testing.assert_allclose(a.id_plus, 1.2 * a.da)
    np.testing.assert_allclose(a.id_minus, 1.2 * a.da)
    np.testing.assert_allclose(a.imbalance, 10 * a.da)
    assert a.r_plus[7:10].mean() > a.r_plus[12:16].mean()
    assert a.r_plus[17:21].mean() > a.r_plus[12:16].mean()
    assert a.r_minus[0:6].mean() > a.r_minus[8:24].mean()
    assert not np.array_equal(synth_prices(6).da, a.da)


def test_price_window_and_scaling():
    p = synth_prices(0)
    w = p.window(22, 4)
    np.testing.assert_array_equal(w.da, p.da[[22, 23, 0, 1]])
    s = p.scale_intraday(3.0)
    np.testing.assert_allclose(s.id_plus, 3 * p.id_plus)
    np.testing.assert_array_equal(s.da, p.da)


# --- bidding -----------------------------------------------------------------

def test_bid_without_energy_room_is_zero(instance):
    prices = synth_prices(0, 25)
    base = compute_baseline(instance, prices)
    E = cumulative_energy(base)
    env = envelope_from_energy(E, E)
    bid = bid_reserves(env, base, prices, instance.limits)
    assert not bid.p_plus.any() and not bid.p_minus.any()
    assert bid.revenue == 0.0


def test_baseline_at_max_blocks_upward_reserve():
    N = 4
    base = np.vstack([np.full((N + 1, 1), 1.0), [[0.0]]])
    E_b = cumulative_energy(base)
    env = envelope_from_energy(E_b + 10, E_b - 10)
    bid = bid_reserves(env, base, flat_prices(N), PowerLimits([0.0], [1.0]))
    assert not bid.p_plus.any()
    np.testing.assert_allclose(bid.p_minus, 1.0, atol=1e-7)


def test_infeasible_baseline():
    N = 3
    base = np.vstack([np.full((N + 1, 1), 0.5), [[0.0]]])
    env = envelope_from_energy(np.zeros(N + 2), np.zeros(N + 2))
    with pytest.raises(InfeasibleBaseline):
        bid_reserves(env, base, flat_prices(N), PowerLimits([0.0], [1.0]))


GRID = np.round(np.arange(101) * 0.01, 10)


def _grid_bid(r, lo_cap, hi_cap, room):
    """Best (x0, x1) on the 0.01 kW grid with x <= cap and x0 <= room[0], x0 + x1 <= room[1]."""
    X0, X1 = np.meshgrid(GRID, GRID, indexing="ij")
    ok = (X0 <= hi_cap[0] + 1e-12) & (X1 <= hi_cap[1] + 1e-12)
    ok &= (X0 <= room[0] + 1e-12) & (X0 + X1 <= room[1] + 1e-12)
    val = np.where(ok, r[0] * X0 + r[1] * X1, -np.inf)
    i = np.unravel_index(np.argmax(val), val.shape)
    return val[i], np.array([X0[i], X1[i]])


@pytest.mark.parametrize("case", range(6))
def test_two_step_bid_matches_grid(case):
    rng = np.random.default_rng(case)
    base = np.array([[0.4], [0.7], [0.0], [0.0]])
    E_b = cumulative_energy(base)
    up_room = np.round(rng.uniform(0.0, 1.0, 2), 2)
    up_room[1] = max(up_room[1], up_room[0])
    dn_room = np.round(rng.uniform(0.0, 1.0, 2), 2)
    dn_room[1] = max(dn_room[1], dn_room[0])
    E_up = E_b + np.concatenate([[0.0], up_room, [up_room[1]]])
    E_dn = E_b - np.concatenate([[0.0], dn_room, [dn_room[1]]])
    env = envelope_from_energy(E_up, E_dn)
    prices = flat_prices(2)
    prices = PriceSeries(rng.uniform(0.01, 0.05, 2), rng.uniform(0.01, 0.05, 2), prices.e_plus, prices.e_minus,
                         prices.da, prices.id_plus, prices.id_minus, prices.imbalance)
    bid = bid_reserves(env, base, prices, PowerLimits([0.0], [1.0]))
    best_up, x_up = _grid_bid(prices.r_plus, 0, 1.0 - base[:2, 0], up_room)
    best_dn, x_dn = _grid_bid(prices.r_minus, 0, base[:2, 0], dn_room)
    h = 0.01
    assert abs(bid.revenue - (best_up + best_dn)) <= 0.01 * h * (prices.r_plus.sum() + prices.r_minus.sum())
    np.testing.assert_allclose(bid.p_plus[:, 0], x_up, atol=0.01 * h)
    np.testing.assert_allclose(bid.p_minus[:, 0], x_dn, atol=0.01 * h)


@pytest.fixture(scope="module")
def ua_bid(instance):
    prices = synth_prices(0, 25, reserve_scale=3.0)
    env = envelope_ua(instance)
    base = compute_baseline(instance, prices, env=env)
    return env, base, prices, bid_reserves(env, base, prices, instance.limits)


def test_certificate_holds(instance, ua_bid):
    env, base, prices, bid = ua_bid
    assert bid.revenue > 0
    cert = bid_certificate(bid.p_plus, bid.p_minus, base, env, instance.limits)
    assert cert["worst"] <= 1e-6
    # simulate the two full-activation paths directly
    for sign, res in ((1, bid.p_plus), (-1, bid.p_minus)):
        p = base[:24] + sign * res
        E = np.concatenate([[0.0], np.cumsum(p.sum(axis=1))])
        assert np.all(E[1:] <= env.E_up[1:25] + 1e-6) and np.all(E[1:] >= env.E_down[1:25] - 1e-6)
        assert np.all(p <= instance.limits.p_max + 1e-6) and np.all(p >= instance.limits.p_min - 1e-6)


def test_wider_envelope_never_lowers_revenue(instance, ua_bid):
    env, base, prices, bid = ua_bid
    wide = envelope_from_energy(env.E_up + np.linspace(0, 3, 26), env.E_down - np.linspace(0, 2, 26))
    assert bid_reserves(wide, base, prices, instance.limits).revenue >= bid.revenue - 1e-9


def test_zero_price_steps_carry_no_value(instance, ua_bid):
    env, base, prices, bid = ua_bid
    r_plus = prices.r_plus.copy()
    r_plus[3:6] = 0.0
    zeroed = PriceSeries(r_plus, prices.r_minus, prices.e_plus, prices.e_minus, prices.da,
                         prices.id_plus, prices.id_minus, prices.imbalance)
    free = bid_reserves(env, base, zeroed, instance.limits)
    forced = ReserveBid(free.p_plus.copy(), free.p_minus, free.baseline, 0.0)
    forced.p_plus[3:6] = 0.0
    revenue = float(r_plus[:24] @ forced.p_plus.sum(axis=1) + prices.r_minus[:24] @ forced.p_minus.sum(axis=1))
    assert revenue == pytest.approx(free.revenue, abs=1e-9)
    assert bid_certificate(forced.p_plus, forced.p_minus, base, env, instance.limits)["worst"] <= 1e-6


def test_bid_csv(tmp_path, ua_bid):
    bid = ua_bid[3]
    write_bid_csv(tmp_path / "b.csv", bid, {"seed": 0})
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[1] == "hour,input,p_plus_kw,p_minus_kw"
    assert len(lines) == 2 + 24 * 3


# --- activation ----------------------------------------------------------------

def _uniform_bid(N=10_000, npw=3, up=1.0, down=1.0):
    return ReserveBid(np.full((N, npw), up), np.full((N, npw), down), np.zeros((N + 2, npw)), 0.0)


def test_zero_bid_gives_no_activation():
    sig = generate_activation(ReserveBid.zero(np.zeros((26, 3)), 24), seed=1)
    assert not sig.direction.any() and not sig.request.any()
    assert utilization_rate(sig, ReserveBid.zero(np.zeros((26, 3)), 24)) == 0.0


def test_long_run_utilization():
    bid = _uniform_bid()
    sig = generate_activation(bid, seed=0)
    assert 0.02 <= utilization_rate(sig, bid) <= 0.04
    assert sig.fraction.max() <= 0.4
    assert np.all(np.abs(sig.request) <= 0.4 * bid.p_plus + 1e-12)


def test_activation_deterministic_and_direction_rule():
    bid = _uniform_bid(N=2000, down=0.0)
    a, b = generate_activation(bid, seed=4), generate_activation(bid, seed=4)
    np.testing.assert_array_equal(a.request, b.request)
    assert np.all(a.direction >= 0) and (a.direction > 0).any()
    both = generate_activation(_uniform_bid(N=4000), seed=4)
    up, dn = (both.direction > 0).sum(), (both.direction < 0).sum()
    assert abs(up - dn) < 0.2 * (up + dn)


def test_utilization_arithmetic():
    bid = _uniform_bid(N=4, npw=2)
    full = ActivationSignal.from_directions(bid, [1, -1, 1, 1], [1.0] * 4)
    assert utilization_rate(full, bid) == pytest.approx(1.0)
    half = ActivationSignal.from_directions(bid, [1, 0, -1, 0], [0.5, 0.0, 0.5, 0.0])
    assert utilization_rate(half, bid) == pytest.approx(0.25)
    assert utilization_rate(ActivationSignal.none(4, 2), bid) == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), p_act=st.floats(0, 1), frac=st.floats(0, 1))
def test_request_within_reserve(seed, p_act, frac):
    rng = np.random.default_rng(seed % 1000)
    bid = ReserveBid(rng.uniform(0, 1, (24, 3)) * (rng.random((24, 1)) > 0.3),
                     rng.uniform(0, 1, (24, 3)) * (rng.random((24, 1)) > 0.3), np.zeros((26, 3)), 0.0)
    sig = generate_activation(bid, ActivationParams(p_act, frac), seed)
    up = np.clip(sig.request, 0, None)
    dn = np.clip(-sig.request, 0, None)
    assert np.all(up <= frac * bid.p_plus + 1e-12) and np.all(dn <= frac * bid.p_minus + 1e-12)
