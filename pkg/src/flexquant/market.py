"""Prices, day-ahead baseline, robust reserve bidding and activation signals.

Direction convention: ``plus``/``up`` reserves increase heating consumption
above the baseline, ``minus``/``down`` reserves decrease it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import solver
from .errors import InfeasibleBaseline, LengthMismatch, ParseError, SchemaError, SolverFailure

PRICE_COLUMNS = ("hour", "r_plus", "r_minus", "e_plus", "e_minus", "da", "id_plus", "id_minus", "imbalance")
CERT_TOL = 1e-6


@dataclass(frozen=True)
class PriceSeries:
    r_plus: np.ndarray      # EUR per kW reserved per hour
    r_minus: np.ndarray
    e_plus: np.ndarray      # EUR per kWh activated
    e_minus: np.ndarray
    da: np.ndarray          # EUR per kWh
    id_plus: np.ndarray
    id_minus: np.ndarray
    imbalance: np.ndarray

    def __post_init__(self):
        n = None
        for name in PRICE_COLUMNS[1:]:
            arr = np.array(getattr(self, name), dtype=float).ravel()
            if n is None:
                n = arr.size
            if arr.size != n:
                raise LengthMismatch(f"price column {name} has {arr.size} entries, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"price column {name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.id_plus < 0) or np.any(self.id_minus < 0):
            raise ValueError("intra-day prices must be non-negative")

    def __len__(self):
        return self.da.size

    def window(self, start: int, n: int) -> "PriceSeries":
        """``n`` consecutive steps from ``start``, wrapping around the day."""
        if len(self) < 1:
            raise LengthMismatch("empty price series")
        idx = (start + np.arange(n)) % len(self)
        return PriceSeries(**{k: getattr(self, k)[idx] for k in PRICE_COLUMNS[1:]})

    def scale_intraday(self, factor: float) -> "PriceSeries":
        if not factor > 0:
            raise ValueError("price multiplier must be positive")
        return replace(self, id_plus=self.id_plus * factor, id_minus=self.id_minus * factor)

    def to_rows(self):
        for k in range(len(self)):
            yield [k] + [float(getattr(self, c)[k]) for c in PRICE_COLUMNS[1:]]


def load_prices(path) -> PriceSeries:
    """Read the hourly price CSV; numbers must use a dot as decimal separator."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise SchemaError(f"{path}: no header row")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in PRICE_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    pos = {c: header.index(c) for c in PRICE_COLUMNS}
    data = {c: [] for c in PRICE_COLUMNS}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
        for c in PRICE_COLUMNS:
            cell = row[pos[c]].strip()
            try:
                val = int(cell) if c == "hour" else float(cell)
            except ValueError:
                raise ParseError(f"{path}: row {lineno}, column {c}: cannot parse {cell!r}") from None
            data[c].append(val)
    hours = np.array(data["hour"])
    if hours.size == 0:
        raise SchemaError(f"{path}: no data rows")
    order = np.argsort(hours, kind="stable")
    if not np.array_equal(hours[order], np.arange(hours.size)):
        raise SchemaError(f"{path}: hours must be 0..{hours.size - 1} without gaps or duplicates")
    return PriceSeries(**{c: np.array(data[c], float)[order] for c in PRICE_COLUMNS[1:]})


def write_prices(path, prices: PriceSeries):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(PRICE_COLUMNS)
        for row in prices.to_rows():
            wr.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])


def synth_prices(seed: int, N: int = 24, hour: int = 0, reserve_scale: float = 1.0,
                 id_fee: float = 0.2, imbalance_factor: float = 10.0, noise: float = 0.1) -> PriceSeries:
    """Hourly synthetic prices with morning/evening peaks for upward reserve and
    night peaks for downward reserve."""
    rng = np.random.default_rng([seed, 11])
    h = (hour + np.arange(N)) % 24

    def jitter():
        return np.exp(noise * rng.standard_normal(N) - noise**2 / 2)

    morning = np.isin(h, (7, 8, 9))
    evening = np.isin(h, (17, 18, 19, 20))
    night = h <= 5
    da = (0.08 + 0.035 * morning + 0.05 * evening + 0.01 * (~night)) * jitter()
    r_plus = reserve_scale * (0.006 + 0.02 * morning + 0.018 * evening) * jitter()
    r_minus = reserve_scale * (0.006 + 0.018 * night) * jitter()
    e_plus = 0.15 * jitter()
    e_minus = 0.05 * jitter()
    return PriceSeries(r_plus, r_minus, e_plus, e_minus, da,
                       (1 + id_fee) * da, (1 + id_fee) * da, imbalance_factor * da)


# --- baseline ----------------------------------------------------------------

def compute_baseline(inp, prices: PriceSeries, margins=None, env=None, lam: float | None = None):
    """Cheapest day-ahead schedule over steps 0..N (with p[N+1] = 0).

    Comfort is soft with the given margins (defaults to the open-loop
    margins).  If ``env`` is given its cumulative energy must stay within
    [E_down, E_up] for k = 1..N so that a zero bid is always feasible.
    Returns powers with shape (N+2, Np).
    """
    from .uncertainty import compute_margins

    N, K = inp.spec.N, inp.spec.N + 2
    ny, npw = inp.art.model.ny, inp.art.model.np_
    dt = inp.art.model.dt
    lam = inp.spec.lam if lam is None else lam
    if margins is None:
        margins = compute_margins(inp.art.basis, inp.art.op, inp.comfort.eps_C, inp.comfort.eps_T).s_ua
    if len(prices) < N + 1:
        raise LengthMismatch("baseline needs day-ahead prices for N+1 steps")
    lo = np.tile(inp.limits.p_min, (K, 1))
    hi = np.tile(inp.limits.p_max, (K, 1))
    lo[N + 1] = hi[N + 1] = 0.0

    prog = solver.ConicProgram("min")
    p = prog.add_variables((K, npw), lb=lo, ub=hi)
    g_hi = prog.add_variables((K, ny), lb=0.0)
    g_lo = prog.add_variables((K, ny), lb=0.0)
    prog.add_objective(p[:N + 1], np.repeat(prices.da[:N + 1] * dt, npw))
    prog.add_objective(g_hi, lam)
    prog.add_objective(g_lo, lam)

    Lp = inp.art.op.stacked_p()
    offset = inp.nominal_offset().ravel()
    eye = np.eye(K * ny)
    prog.add_le_matrix(np.hstack([Lp, -eye]), np.concatenate([p.ravel(), g_hi.ravel()]),
                       (inp.comfort.T_max - margins).ravel() - offset)
    prog.add_le_matrix(np.hstack([-Lp, -eye]), np.concatenate([p.ravel(), g_lo.ravel()]),
                       offset - (inp.comfort.T_min + margins).ravel())
    if env is not None:
        cum = _cumulative_operator(N, npw, dt)             # (N, N*npw): E[1..N]
        prog.add_le_matrix(cum, p[:N], env.E_up[1:N + 1])
        prog.add_le_matrix(-cum, p[:N], -env.E_down[1:N + 1])
    sol = solver.solve_or_raise(prog, "baseline schedule")
    base = sol.value(p)
    base[N + 1] = 0.0
    return np.clip(base, lo, hi)


def _cumulative_operator(N, npw, dt):
    """Row k-1 maps p[0..N-1] to dt * sum_{i<k} sum_l p[i, l], k = 1..N."""
    return np.kron(np.tril(np.ones((N, N))), np.ones((1, npw))) * dt


# --- bidding -------------------------------------------------------------------

@dataclass(frozen=True)
class ReserveBid:
    p_plus: np.ndarray      # (N, Np)
    p_minus: np.ndarray     # (N, Np)
    baseline: np.ndarray    # (N+2, Np)
    revenue: float
    dt: float = 1.0
    certificate: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.p_plus.shape[0]

    @property
    def reserved_steps(self) -> np.ndarray:
        return (self.p_plus.sum(axis=1) > 0) | (self.p_minus.sum(axis=1) > 0)

    @classmethod
    def zero(cls, baseline, N, dt=1.0):
        npw = baseline.shape[1]
        return cls(np.zeros((N, npw)), np.zeros((N, npw)), np.asarray(baseline, float), 0.0, dt)


def bid_certificate(p_plus, p_minus, baseline, env, limits, dt=1.0) -> dict:
    """Worst violations of the full-up and full-down activation paths."""
    N = p_plus.shape[0]
    pb = np.asarray(baseline, float)[:N]
    e_b = np.concatenate([[0.0], np.cumsum(pb.sum(axis=1))]) * dt
    e_up = e_b + np.concatenate([[0.0], np.cumsum(p_plus.sum(axis=1))]) * dt
    e_dn = e_b - np.concatenate([[0.0], np.cumsum(p_minus.sum(axis=1))]) * dt
    E_up, E_down = env.E_up[:N + 1], env.E_down[:N + 1]
    out = {
        "power_up": float(np.max(pb + p_plus - limits.p_max, initial=0.0)),
        "power_down": float(np.max(limits.p_min - (pb - p_minus), initial=0.0)),
        "energy_up": float(max(np.max(e_up[1:] - E_up[1:], initial=0.0),
                               np.max(E_down[1:] - e_up[1:], initial=0.0))),
        "energy_down": float(max(np.max(e_dn[1:] - E_up[1:], initial=0.0),
                                 np.max(E_down[1:] - e_dn[1:], initial=0.0))),
        "negative": float(max(np.max(-p_plus, initial=0.0), np.max(-p_minus, initial=0.0))),
    }
    out["worst"] = max(out.values())
    return out


def bid_reserves(env, baseline, prices: PriceSeries, limits, dt: float | None = None) -> ReserveBid:
    """Revenue-maximizing reserves whose full activation stays inside the envelope."""
    dt = env.dt if dt is None else dt
    N = env.N
    baseline = np.asarray(baseline, float)
    npw = baseline.shape[1]
    if len(prices) < N:
        raise LengthMismatch(f"bid needs {N} price steps, got {len(prices)}")
    zero = np.zeros((N, npw))
    base_cert = bid_certificate(zero, zero, baseline, env, limits, dt)
    if base_cert["worst"] > CERT_TOL:
        raise InfeasibleBaseline(f"baseline violates the envelope or power limits by {base_cert['worst']:.3g}")

    pb = baseline[:N]
    prog = solver.ConicProgram("max")
    up = prog.add_variables((N, npw), lb=0.0, ub=np.maximum(limits.p_max - pb, 0.0))
    dn = prog.add_variables((N, npw), lb=0.0, ub=np.maximum(pb - limits.p_min, 0.0))
    prog.add_objective(up, np.repeat(prices.r_plus[:N] * dt, npw))
    prog.add_objective(dn, np.repeat(prices.r_minus[:N] * dt, npw))
    cum = _cumulative_operator(N, npw, dt)
    e_b = cum @ pb.ravel()
    prog.add_le_matrix(cum, up, env.E_up[1:N + 1] - e_b)
    prog.add_le_matrix(cum, dn, e_b - env.E_down[1:N + 1])
    sol = solver.solve_or_raise(prog, "reserve bid")
    p_plus = np.clip(sol.value(up), 0.0, None)
    p_minus = np.clip(sol.value(dn), 0.0, None)
    # interior-point noise on empty reserves
    p_plus[p_plus < 1e-9] = 0.0
    p_minus[p_minus < 1e-9] = 0.0
    cert = bid_certificate(p_plus, p_minus, baseline, env, limits, dt)
    if cert["worst"] > CERT_TOL:
        raise SolverFailure(f"reserve bid certificate violated by {cert['worst']:.3g}")
    revenue = float(dt * (prices.r_plus[:N] @ p_plus.sum(axis=1) + prices.r_minus[:N] @ p_minus.sum(axis=1)))
    return ReserveBid(p_plus, p_minus, baseline, revenue, dt, cert)


def write_bid_csv(path, bid: ReserveBid, header: dict | None = None, hour: int = 0):
    with open(path, "w", newline="") as fh:
        for key, val in (header or {}).items():
            fh.write(f"# {key}: {val}\n")
        wr = csv.writer(fh)
        wr.writerow(["hour", "input", "p_plus_kw", "p_minus_kw"])
        for k in range(bid.N):
            for l in range(bid.p_plus.shape[1]):
                wr.writerow([(hour + k) % 24, l, f"{bid.p_plus[k, l]:.10g}", f"{bid.p_minus[k, l]:.10g}"])


# --- activation ------------------------------------------------------------

@dataclass(frozen=True)
class ActivationParams:
    p_act: float = 0.15
    max_fraction: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.p_act <= 1.0:
            raise ValueError("activation probability must lie in [0, 1]")
        if not 0.0 <= self.max_fraction <= 1.0:
            raise ValueError("maximum activation fraction must lie in [0, 1]")


@dataclass(frozen=True)
class ActivationSignal:
    direction: np.ndarray   # (N,) +1 up, -1 down, 0 none
    fraction: np.ndarray    # (N,) share of the reserve in that direction
    request: np.ndarray     # (N, Np) signed requested power change, kW

    @property
    def N(self) -> int:
        return self.direction.size

    @classmethod
    def none(cls, N, npw):
        return cls(np.zeros(N, dtype=int), np.zeros(N), np.zeros((N, npw)))

    @classmethod
    def from_directions(cls, bid: ReserveBid, direction, fraction):
        direction = np.asarray(direction, dtype=int)
        fraction = np.asarray(fraction, float)
        req = np.where((direction > 0)[:, None], bid.p_plus, 0.0) - np.where((direction < 0)[:, None], bid.p_minus, 0.0)
        return cls(direction, np.where(direction != 0, fraction, 0.0), req * fraction[:, None])


def generate_activation(bid: ReserveBid, params: ActivationParams = ActivationParams(), seed: int = 0) -> ActivationSignal:
    rng = np.random.default_rng([seed, 13])
    N = bid.N
    direction = np.zeros(N, dtype=int)
    fraction = np.zeros(N)
    for k in range(N):
        # draws are taken every step so the stream does not depend on the bid
        act, pick, frac = rng.random(), rng.random(), rng.uniform(0.0, params.max_fraction)
        options = [d for d, r in ((1, bid.p_plus[k]), (-1, bid.p_minus[k])) if r.sum() > 0]
        if not options or act >= params.p_act:
            continue
        direction[k] = options[min(int(pick * len(options)), len(options) - 1)]
        fraction[k] = frac
    return ActivationSignal.from_directions(bid, direction, fraction)


def utilization_rate(signal: ActivationSignal, bid: ReserveBid) -> float:
    """Mean requested/reserved power ratio over steps carrying any reserve."""
    if signal.N != bid.N:
        raise LengthMismatch("signal and bid lengths differ")
    reserved = bid.reserved_steps
    if not reserved.any():
        return 0.0
    ratios = []
    for k in np.flatnonzero(reserved):
        d = signal.direction[k]
        cap = bid.p_plus[k].sum() if d > 0 else bid.p_minus[k].sum() if d < 0 else 0.0
        ratios.append(np.abs(signal.request[k]).sum() / cap if cap > 0 else 0.0)
    return float(np.mean(ratios))
