"""Closed-loop flexibility provision, settlement and discomfort metrics.

Two adaptation regimes are simulated:

* intra-day (scenario 1): the baseline may be re-traded at any step;
* rebound (scenario 2): deviations at steps carrying reserve count as a
  provision default; the strict variant forbids them.

At every step a shrinking-horizon LP keeps both full-activation paths
(all reserves up, all reserves down) comfort- and power-feasible.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import solver
from .errors import LengthMismatch, SolverFailure
from .market import ActivationSignal, PriceSeries, ReserveBid
from .uncertainty import psd_sqrt

log = logging.getLogger(__name__)

MODES = ("IntraDay", "Rebound", "ReboundStrict")
PRIORITIES = ("FlexibilityFirst", "ComfortFirst")
DEFAULT_WEIGHTS = {"FlexibilityFirst": (1e3, 1e4), "ComfortFirst": (1e4, 1e3)}
VIOLATION_EPS = 0.01


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str = "IntraDay"
    priority: str = "FlexibilityFirst"
    lambda_comfort: float | None = None
    alpha_flex: float | None = None
    slack_fraction: float = 0.05
    cop: float = 1.0
    margin_mode: str = "none"       # "none" or "ua": tighten controller comfort bounds

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.priority not in PRIORITIES:
            raise ValueError(f"priority must be one of {PRIORITIES}, got {self.priority!r}")
        lam, alpha = DEFAULT_WEIGHTS[self.priority]
        if self.lambda_comfort is None:
            object.__setattr__(self, "lambda_comfort", lam)
        if self.alpha_flex is None:
            object.__setattr__(self, "alpha_flex", alpha)
        if not (self.lambda_comfort > 0 and self.alpha_flex > 0):
            raise ValueError("controller weights must be positive")
        if self.priority == "FlexibilityFirst" and self.alpha_flex < 10 * self.lambda_comfort:
            raise ValueError("FlexibilityFirst needs alpha_flex >= 10 * lambda_comfort")
        if self.priority == "ComfortFirst" and self.lambda_comfort < 10 * self.alpha_flex:
            raise ValueError("ComfortFirst needs lambda_comfort >= 10 * alpha_flex")
        if not 0 <= self.slack_fraction < 1:
            raise ValueError("slack_fraction must lie in [0, 1)")
        if not self.cop > 0:
            raise ValueError("cop must be positive")
        if self.margin_mode not in ("none", "ua"):
            raise ValueError("margin_mode must be 'none' or 'ua'")

    @property
    def scenario(self) -> int:
        return 1 if self.mode == "IntraDay" else 2


@dataclass
class ControllerContext:
    """Fixed data shared by every controller call of one closed-loop run."""

    inp: object                 # EnvelopeInputs
    bid: ReserveBid
    prices: PriceSeries
    config: ScenarioConfig
    margins: np.ndarray | None = None   # (N+2, Ny) by prediction lag

    @property
    def N(self) -> int:
        return self.bid.N


@dataclass
class ControllerResult:
    delta: np.ndarray           # committed deviation for the current step (Np)
    plus: np.ndarray
    minus: np.ndarray
    beta: np.ndarray
    slack: float
    status: str = "optimal"
    objective: float = 0.0
    plan_plus: np.ndarray | None = None     # (N_r, Np) planned increases, step s first
    plan_minus: np.ndarray | None = None


def _adaptation_lp(ctx: ControllerContext, s: int, x_hat, weather, rebound: bool, strict: bool):
    inp, bid, cfg = ctx.inp, ctx.bid, ctx.config
    mdl, op = inp.art.model, inp.art.op
    N, dt = ctx.N, mdl.dt
    n = N - s
    if n < 1:
        raise ValueError("no remaining steps to control")
    ny, npw = mdl.ny, mdl.np_
    pb = bid.baseline
    r_up, r_dn = bid.p_plus[s:], bid.p_minus[s:]
    reserved = bid.reserved_steps[s:]
    weather = np.asarray(weather, float)          # rows for steps s..N

    # lag-indexed prediction over outputs k = s+1..N
    Lp = op.Lambda_p[1:n + 1, :n + 1]             # (n, n+1, ny, np)
    Ld = op.Lambda_d[1:n + 1, :n + 1]
    free = np.einsum("yx,kxz,z->ky", op.C, op.A_powers[1:n + 1], x_hat)
    nominal = free + np.einsum("kiyp,ip->ky", Lp, pb[s:N + 1]) + np.einsum("kiyd,id->ky", Ld, weather[:n + 1])
    L = Lp[:, :n].transpose(0, 2, 1, 3).reshape(n * ny, n * npw)
    y_up = nominal.ravel() + L @ r_up.ravel()
    y_dn = nominal.ravel() - L @ r_dn.ravel()
    m = np.zeros((n, ny)) if ctx.margins is None else ctx.margins[1:n + 1]
    hi = (inp.comfort.T_max - m).ravel()
    lo = (inp.comfort.T_min + m).ravel()

    prog = solver.ConicProgram("min")
    ub = np.full((n, npw), np.inf)
    if strict:
        ub[reserved] = 0.0
    dp = prog.add_variables((n, npw), lb=0.0, ub=ub)
    dm = prog.add_variables((n, npw), lb=0.0, ub=ub)
    prog.add_objective(dp, np.repeat(ctx.prices.id_plus[s:N] * dt, npw))
    prog.add_objective(dm, np.repeat(ctx.prices.id_minus[s:N] * dt, npw))
    slacks = [prog.add_variables(n * ny, lb=0.0) for _ in range(4)]
    for g in slacks:
        prog.add_objective(g, cfg.lambda_comfort)

    # power feasibility of both full-activation paths
    plim_hi = (inp.limits.p_max - pb[s:N] - r_up).ravel()
    plim_lo = (pb[s:N] - r_dn - inp.limits.p_min).ravel()
    eye_p = np.eye(n * npw)
    prog.add_le_matrix(np.hstack([eye_p, -eye_p]), np.concatenate([dp.ravel(), dm.ravel()]), plim_hi)
    prog.add_le_matrix(np.hstack([-eye_p, eye_p]), np.concatenate([dp.ravel(), dm.ravel()]), plim_lo)

    # comfort of both paths, softened
    eye_y = np.eye(n * ny)
    pair = np.concatenate([dp.ravel(), dm.ravel()])
    LL = np.hstack([L, -L])
    for y0, g_hi, g_lo in ((y_up, slacks[0], slacks[1]), (y_dn, slacks[2], slacks[3])):
        prog.add_le_matrix(np.hstack([LL, -eye_y]), np.concatenate([pair, g_hi]), hi - y0)
        prog.add_le_matrix(np.hstack([-LL, -eye_y]), np.concatenate([pair, g_lo]), y0 - lo)

    beta = None
    if rebound and not strict and reserved.any():
        rows = np.flatnonzero(reserved)
        beta = prog.add_variables((rows.size, npw), lb=0.0)
        prog.add_objective(beta, cfg.alpha_flex)
        for j, k in enumerate(rows):
            for l in range(npw):
                prog.add_le([0, 0, 0], [dp[k, l], dm[k, l], beta[j, l]], [1.0, 1.0, -1.0], [0.0])

    sol = solver.solve_or_raise(prog, f"adaptation step {s}")
    # buying and selling the same step is never optimal with positive prices; net out solver noise
    net = sol.value(dp)[0] - sol.value(dm)[0]
    net[np.abs(net) < 1e-6] = 0.0
    plus, minus = np.maximum(net, 0.0), np.maximum(-net, 0.0)
    b = np.zeros(npw)
    if beta is not None and reserved[0]:
        b = np.clip(sol.value(beta)[0], 0.0, None)
    slack = float(sum(sol.value(g).sum() for g in slacks))
    plan = sol.value(dp) - sol.value(dm)
    plan[np.abs(plan) < 1e-6] = 0.0
    return ControllerResult(plus - minus, plus, minus, b, slack, "optimal", sol.objective,
                            np.maximum(plan, 0.0), np.maximum(-plan, 0.0))


def controller_scenario1(ctx: ControllerContext, s: int, x_hat, weather) -> ControllerResult:
    """Intra-day re-trade of the baseline for step ``s``."""
    return _adaptation_lp(ctx, s, x_hat, weather, rebound=False, strict=False)


def controller_scenario2(ctx: ControllerContext, s: int, x_hat, weather) -> ControllerResult:
    """Rebound adaptation; deviations at reserved steps are penalized or forbidden."""
    strict = ctx.config.mode == "ReboundStrict"
    return _adaptation_lp(ctx, s, x_hat, weather, rebound=True, strict=strict)


def controller_for(config: ScenarioConfig):
    return controller_scenario1 if config.scenario == 1 else controller_scenario2


# --- closed loop -------------------------------------------------------------

@dataclass
class TruthSample:
    weather_error: np.ndarray   # (N+1, Nd)
    w: np.ndarray               # (N+1, Nx)
    v: np.ndarray               # (N+1, Ny)

    @classmethod
    def draw(cls, art, N, seed):
        return cls.sample(art, N + 1, np.random.default_rng([seed, 17]))

    @classmethod
    def sample(cls, art, steps, rng):
        from .instances import sample_weather_error

        mdl = art.model
        e = sample_weather_error(art.wem, steps, rng)
        w = rng.standard_normal((steps, mdl.nx)) @ psd_sqrt(art.noise.Sigma_w).T
        v = rng.standard_normal((steps, mdl.ny)) @ psd_sqrt(art.noise.Sigma_v).T
        return cls(e, w, v)

    @classmethod
    def zero(cls, art, N):
        mdl = art.model
        return cls(np.zeros((N + 1, mdl.nd)), np.zeros((N + 1, mdl.nx)), np.zeros((N + 1, mdl.ny)))


class TruthSampleFactory:
    """Truth disturbances for one seed.

    Calling the factory returns the same day sample every time, so all
    formulations and scenarios of a seed face identical disturbances;
    ``draw`` yields fresh independent samples for Monte Carlo use.
    """

    def __init__(self, art, N, seed, noise=True):
        self.art, self.N, self.seed, self.noise = art, N, seed, noise
        self._rng = np.random.default_rng([seed, 23])

    def __call__(self) -> TruthSample:
        if not self.noise:
            return TruthSample.zero(self.art, self.N)
        return TruthSample.draw(self.art, self.N, self.seed)

    def draw(self, steps) -> TruthSample:
        return TruthSample.sample(self.art, steps, self._rng)


@dataclass
class SimulationTrace:
    applied: np.ndarray         # (N, Np)
    temperatures: np.ndarray    # (N, Ny) measured at the end of each step
    baseline: np.ndarray        # (N, Np) before adaptation
    adapted: np.ndarray         # (N, Np) baseline plus committed deviation
    delta_plus: np.ndarray      # (N, Np)
    delta_minus: np.ndarray
    beta: np.ndarray
    requested: np.ndarray       # (N, Np) signed
    delivered: np.ndarray       # (N, Np) signed
    violations: np.ndarray      # (N, Ny) degC outside the band
    x_hat: np.ndarray           # (N, Nx) estimate used by the controller
    status: list = field(default_factory=list)
    dt: float = 1.0
    scenario: int = 1

    @property
    def N(self) -> int:
        return self.applied.shape[0]

    @property
    def delta(self) -> np.ndarray:
        return self.delta_plus - self.delta_minus

    @property
    def failures(self) -> int:
        return sum(1 for st in self.status if st != "optimal")


def band_violation(y, comfort) -> np.ndarray:
    y = np.asarray(y, float)
    return np.maximum(0.0, y - comfort.T_max) + np.maximum(0.0, comfort.T_min - y)


def simulate_closed_loop(seed, inp, bid: ReserveBid, signal: ActivationSignal, config: ScenarioConfig,
                         prices: PriceSeries, truth: TruthSample | None = None,
                         margins=None) -> SimulationTrace:
    """Run one day of provision against a sampled truth plant.

    The truth plant is the planning model driven by sampled process and
    measurement noise and realized weather (forecast plus AR error).  The
    estimator is a steady-state Kalman filter on the realized weather.
    """
    from .model import steady_state_gain

    art = inp.art
    mdl = art.model
    N, npw = bid.N, mdl.np_
    if signal.N != N:
        raise LengthMismatch("activation signal and bid lengths differ")
    truth = TruthSample.draw(art, N, seed) if truth is None else truth
    weather = inp.forecast[:N + 1] + truth.weather_error
    gain, _ = steady_state_gain(mdl, art.noise) if np.any(art.noise.Sigma_w) or np.any(art.noise.Sigma_v) \
        else (np.zeros((mdl.nx, mdl.ny)), None)
    ctx = ControllerContext(inp, bid, prices, config, margins)
    controller = controller_for(config)
    phi = art.wem.phi
    pb = bid.baseline
    lo, hi = inp.limits.p_min, inp.limits.p_max

    x = np.array(inp.x0, float)
    x_hat = x.copy()
    out = {k: np.zeros((N, npw)) for k in ("applied", "adapted", "dplus", "dminus", "beta", "delivered")}
    temps = np.zeros((N, mdl.ny))
    xh = np.zeros((N, mdl.nx))
    status = []
    last_err = np.zeros(mdl.nd)
    for s in range(N + 1):
        if s < N:
            # forecast correction from the last observed weather error
            decay = np.array([np.linalg.matrix_power(phi, j + 1) @ last_err for j in range(N + 1 - s)]) if s else 0.0
            w_pred = inp.forecast[s:N + 1] + decay
            xh[s] = x_hat
            try:
                res = controller(ctx, s, x_hat, w_pred)
                status.append(res.status)
            except SolverFailure as exc:
                log.warning("controller failed at step %d: %s", s, exc)
                res = ControllerResult(np.zeros(npw), np.zeros(npw), np.zeros(npw), np.zeros(npw), 0.0, "failed")
                status.append("failed")
            adapted = pb[s] + res.delta
            p = np.clip(adapted + signal.request[s], lo, hi)
            out["applied"][s] = p
            out["adapted"][s] = adapted
            out["dplus"][s], out["dminus"][s], out["beta"][s] = res.plus, res.minus, res.beta
            out["delivered"][s] = p - (adapted if config.scenario == 1 else pb[s])
        else:
            p = np.clip(pb[N], lo, hi)
        d = weather[s]
        y = mdl.C @ x + mdl.D_d @ d + mdl.D_p @ p + truth.v[s]
        if s >= 1:
            temps[s - 1] = y
        if s == N:
            break
        # filter: correct the prior with y_s, then predict to s+1
        innov = y - mdl.C @ x_hat - mdl.D_d @ d - mdl.D_p @ p
        x_post = x_hat + gain @ innov
        x_hat = mdl.A @ x_post + mdl.B_d @ d + mdl.B_p @ p
        x = mdl.A @ x + mdl.B_d @ d + mdl.B_p @ p + truth.w[s]
        last_err = d - inp.forecast[s]
    return SimulationTrace(
        applied=out["applied"], temperatures=temps, baseline=pb[:N].copy(), adapted=out["adapted"],
        delta_plus=out["dplus"], delta_minus=out["dminus"], beta=out["beta"],
        requested=signal.request.copy(), delivered=out["delivered"],
        violations=band_violation(temps, inp.comfort), x_hat=xh, status=status,
        dt=mdl.dt, scenario=config.scenario,
    )


# --- settlement ------------------------------------------------------------

@dataclass(frozen=True)
class RevenueBreakdown:
    reserve_revenue: float
    energy_revenue: float
    adaptation_cost: float
    penalty_cost: float
    adaptation_volume: float = 0.0
    reference: float | None = None

    @property
    def net(self) -> float:
        return self.reserve_revenue + self.energy_revenue - self.adaptation_cost - self.penalty_cost

    def normalized(self, reference: float) -> dict:
        ref = reference if reference else 1.0
        return {k: v / ref for k, v in self.as_dict().items() if k != "adaptation_volume"}

    def as_dict(self) -> dict:
        return {"reserve_revenue": self.reserve_revenue, "energy_revenue": self.energy_revenue,
                "adaptation_cost": self.adaptation_cost, "penalty_cost": self.penalty_cost,
                "net": self.net, "adaptation_volume": self.adaptation_volume}


def settle(trace: SimulationTrace, bid: ReserveBid, signal: ActivationSignal, prices: PriceSeries,
           config: ScenarioConfig) -> RevenueBreakdown:
    N, dt = bid.N, trace.dt
    if trace.N != N or signal.N != N or len(prices) < N:
        raise LengthMismatch("trace, bid, signal and prices must cover the same steps")
    conv = dt / config.cop
    reserve = conv * float(prices.r_plus[:N] @ bid.p_plus.sum(axis=1) + prices.r_minus[:N] @ bid.p_minus.sum(axis=1))
    reserved = bid.reserved_steps
    energy = penalty = 0.0
    for k in range(N):
        req = float(signal.request[k].sum())
        got = float(trace.delivered[k].sum())
        dev = abs(got - req)
        tol = config.slack_fraction * abs(req)
        if signal.direction[k] != 0:
            price = prices.e_plus[k] if signal.direction[k] > 0 else prices.e_minus[k]
            sign = 1.0 if signal.direction[k] > 0 else -1.0
            vol = abs(req) if dev <= tol else min(max(sign * got, 0.0), abs(req))
            energy += price * vol * conv
        if reserved[k] and dev > tol:
            penalty += prices.imbalance[k] * (dev - tol) * conv
    adaptation = conv * float(prices.id_plus[:N] @ trace.delta_plus.sum(axis=1)
                              + prices.id_minus[:N] @ trace.delta_minus.sum(axis=1))
    volume = dt * float(trace.delta_plus.sum() + trace.delta_minus.sum())
    return RevenueBreakdown(reserve, energy, adaptation, penalty, volume)


def discomfort_metrics(trace_or_temps, comfort, dt: float = 1.0):
    """(average deviation, maximum deviation, violation-hours) over rooms and steps."""
    temps = trace_or_temps.temperatures if isinstance(trace_or_temps, SimulationTrace) else trace_or_temps
    if isinstance(trace_or_temps, SimulationTrace):
        dt = trace_or_temps.dt
    dev = band_violation(temps, comfort)
    return float(dev.mean()), float(dev.max(initial=0.0)), float((dev > VIOLATION_EPS).sum() * dt)


def write_trace_csv(path, trace: SimulationTrace, header: dict | None = None):
    npw, ny, nx = trace.applied.shape[1], trace.temperatures.shape[1], trace.x_hat.shape[1]
    cols = (["k"] + [f"applied_{l}" for l in range(npw)] + [f"temp_{j}" for j in range(ny)]
            + [f"baseline_{l}" for l in range(npw)] + [f"adapted_{l}" for l in range(npw)]
            + [f"delta_plus_{l}" for l in range(npw)] + [f"delta_minus_{l}" for l in range(npw)]
            + [f"requested_{l}" for l in range(npw)] + [f"delivered_{l}" for l in range(npw)]
            + [f"violation_{j}" for j in range(ny)] + [f"x_hat_{i}" for i in range(nx)] + ["status"])
    with open(path, "w", newline="") as fh:
        for key, val in (header or {}).items():
            fh.write(f"# {key}: {val}\n")
        wr = csv.writer(fh)
        wr.writerow(cols)
        for k in range(trace.N):
            vals = np.concatenate([trace.applied[k], trace.temperatures[k], trace.baseline[k], trace.adapted[k],
                                   trace.delta_plus[k], trace.delta_minus[k], trace.requested[k],
                                   trace.delivered[k], trace.violations[k], trace.x_hat[k]])
            wr.writerow([k] + [_fmt(v) for v in vals] + [trace.status[k]])


def _fmt(v):
    v = float(v)
    if abs(v) < 5e-13:
        v = 0.0
    return f"{v:.10g}"


# --- price sensitivity -----------------------------------------------------

@dataclass
class ProvisionRun:
    """Everything needed to replay one closed-loop day."""

    formulation: str
    seed: int
    inp: object
    bid: ReserveBid
    signal: ActivationSignal
    prices: PriceSeries
    config: ScenarioConfig
    margins: np.ndarray | None = None

    def execute(self, prices: PriceSeries | None = None):
        prices = self.prices if prices is None else prices
        trace = simulate_closed_loop(self.seed, self.inp, self.bid, self.signal, self.config, prices,
                                     margins=self.margins)
        return trace, settle(trace, self.bid, self.signal, prices, self.config)


def price_sensitivity_sweep(runs, multipliers):
    """Net revenue per (formulation, multiplier), averaged over the runs.

    Intra-day prices are scaled and the controllers re-solved; every other
    price is unchanged.  Returns a list of row dicts.
    """
    multipliers = [float(m) for m in multipliers]
    if any(m <= 0 for m in multipliers):
        raise ValueError("multipliers must be positive")
    acc = {}
    for run in runs:
        for m in multipliers:
            _, rb = run.execute(run.prices.scale_intraday(m))
            acc.setdefault((run.formulation, m), []).append(rb)
    rows = []
    for (form, m), rbs in sorted(acc.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        rows.append({
            "formulation": form, "multiplier": m,
            "net": float(np.mean([r.net for r in rbs])),
            "adaptation_cost": float(np.mean([r.adaptation_cost for r in rbs])),
            "adaptation_volume": float(np.mean([r.adaptation_volume for r in rbs])),
            "penalty_cost": float(np.mean([r.penalty_cost for r in rbs])),
            "reserve_revenue": float(np.mean([r.reserve_revenue for r in rbs])),
        })
    return rows


def crossover_multiplier(rows, reference: str = "UI", challengers=None):
    """Smallest multiplier at which a challenger's net revenue exceeds the reference's."""
    table = {(r["formulation"], r["multiplier"]): r["net"] for r in rows}
    mults = sorted({r["multiplier"] for r in rows})
    forms = sorted({r["formulation"] for r in rows} - {reference}) if challengers is None else list(challengers)
    for m in mults:
        if (reference, m) not in table:
            continue
        for f in forms:
            if (f, m) in table and table[(f, m)] > table[(reference, m)]:
                return m, f
    return None, None
