"""Flexibility envelopes: upper/lower cumulative heating energy bounds.

Four formulations share one structure and differ only in how the comfort and
power bounds are tightened:

* ``UI``        nominal prediction, no tightening;
* ``UA``        comfort band tightened by the open-loop output std;
* ``UAF-opt``   affine feedback gains are decision variables (SOCP);
* ``UAF-fixed`` affine feedback gains given, margins precomputed (LP).

Time indexing: powers ``p[k]`` and outputs ``y[k]`` for k = 0..N+1, with
``p[N+1] = 0``.  ``E[k] = dt * sum_{i<k} sum_l p[i, l]``, so ``E[0] = 0`` and
``E[1..N]`` are the hourly cumulative bounds offered to the market.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import solver
from .errors import DimensionMismatch, InfeasibleBand
from .model import (
    NoiseSpec,
    PredictionOperator,
    StateSpaceModel,
    build_prediction_matrices,
    validate_model,
)
from .policies import AffinePolicy
from .uncertainty import (
    SafetyMargins,
    StackedNoiseBasis,
    WeatherErrorModel,
    build_stacked_basis,
    compute_margins,
    gaussian_quantile,
    psd_sqrt,
)

FORMULATIONS = ("UI", "UA", "UAF-opt", "UAF-fixed")


@dataclass(frozen=True)
class ComfortSpec:
    T_min: np.ndarray
    T_max: np.ndarray
    eps_C: float = 0.2
    eps_T: float = 0.05

    def __post_init__(self):
        T_min = np.atleast_1d(np.asarray(self.T_min, float))
        T_max = np.atleast_1d(np.asarray(self.T_max, float))
        if T_min.shape != T_max.shape:
            raise DimensionMismatch("T_min and T_max must have the same shape")
        if np.any(T_max <= T_min):
            raise ValueError("T_max must exceed T_min in every room")
        for name in ("eps_C", "eps_T"):
            val = getattr(self, name)
            if not 0.0 < val < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {val}")
        object.__setattr__(self, "T_min", T_min)
        object.__setattr__(self, "T_max", T_max)

    @classmethod
    def band(cls, center, width, ny, **kwargs):
        c = np.broadcast_to(np.asarray(center, float), (ny,))
        return cls(c - width / 2.0, c + width / 2.0, **kwargs)


@dataclass(frozen=True)
class PowerLimits:
    p_min: np.ndarray
    p_max: np.ndarray

    def __post_init__(self):
        p_min = np.atleast_1d(np.asarray(self.p_min, float))
        p_max = np.atleast_1d(np.asarray(self.p_max, float))
        if p_min.shape != p_max.shape:
            raise DimensionMismatch("p_min and p_max must have the same shape")
        if np.any(p_min < 0) or np.any(p_max < p_min):
            raise ValueError("power limits need p_max >= p_min >= 0")
        object.__setattr__(self, "p_min", p_min)
        object.__setattr__(self, "p_max", p_max)


@dataclass(frozen=True)
class EnvelopeProblemSpec:
    N: int = 24
    lam: float = 1e3

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not self.lam > 0:
            raise ValueError("slack penalty must be positive")

    @property
    def omega(self) -> np.ndarray:
        """Objective weights e^{-k/N} for k = 0..N+1."""
        return np.exp(-np.arange(self.N + 2) / self.N)


@dataclass(frozen=True)
class ModelArtifacts:
    """Everything derived from the model that is reused across days."""

    model: StateSpaceModel
    noise: NoiseSpec
    wem: WeatherErrorModel
    op: PredictionOperator
    basis: StackedNoiseBasis

    @property
    def N(self) -> int:
        return self.op.N


def build_artifacts(model, noise, wem, N) -> ModelArtifacts:
    validate_model(model, noise)
    op = build_prediction_matrices(model, N)
    return ModelArtifacts(model, noise, wem, op, build_stacked_basis(op, noise, wem, N))


@dataclass(frozen=True)
class EnvelopeInputs:
    art: ModelArtifacts
    x0: np.ndarray
    forecast: np.ndarray        # (N+2, Nd)
    comfort: ComfortSpec
    limits: PowerLimits
    spec: EnvelopeProblemSpec
    hour: int = 0

    def __post_init__(self):
        K = self.spec.N + 2
        if self.art.N != self.spec.N:
            raise DimensionMismatch("artifacts and problem spec disagree on the horizon")
        f = np.atleast_2d(np.asarray(self.forecast, float))
        if f.shape != (K, self.art.model.nd):
            raise DimensionMismatch(f"forecast must have shape {(K, self.art.model.nd)}, got {f.shape}")
        object.__setattr__(self, "forecast", f)
        object.__setattr__(self, "x0", np.asarray(self.x0, float))

    def nominal_offset(self) -> np.ndarray:
        """Output prediction with zero heating, shape (N+2, Ny)."""
        op = self.art.op
        return op.free_response(self.x0) + np.einsum("kiyd,id->ky", op.Lambda_d, self.forecast)


@dataclass
class FlexibilityEnvelope:
    formulation: str
    E_up: np.ndarray
    E_down: np.ndarray
    p_up: np.ndarray
    p_down: np.ndarray
    slack_up: np.ndarray
    slack_down: np.ndarray
    objective_up: float
    objective_down: float
    dt: float = 1.0
    mfph: int | None = None
    margins_up: SafetyMargins | None = None
    margins_down: SafetyMargins | None = None
    params: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.E_up.shape[0] - 2


def cumulative_energy(powers, dt=1.0) -> np.ndarray:
    powers = np.asarray(powers, float)
    return np.concatenate([[0.0], np.cumsum(powers.sum(axis=1))[:-1]]) * dt


# --- linear formulations ---------------------------------------------------

def _solve_bound(inp: EnvelopeInputs, direction: str, s_comfort, s_power):
    """One bound of the envelope as an LP with fixed margins."""
    N, K = inp.spec.N, inp.spec.N + 2
    ny, npw = inp.art.model.ny, inp.art.model.np_
    lo = np.empty((K, npw))
    hi = np.empty((K, npw))
    lo[:N + 1] = inp.limits.p_min + s_power[:N + 1]
    hi[:N + 1] = inp.limits.p_max - s_power[:N + 1]
    lo[N + 1] = hi[N + 1] = 0.0
    bad = np.where(np.any(lo > hi + 1e-12, axis=1))[0]
    if bad.size:
        raise InfeasibleBand(f"power margins empty the power band at steps {bad.tolist()}", bad)
    hi = np.maximum(hi, lo)

    prog = solver.ConicProgram("max" if direction == "up" else "min")
    p = prog.add_variables((K, npw), lb=lo, ub=hi)
    g_hi = prog.add_variables((K, ny), lb=0.0)
    g_lo = prog.add_variables((K, ny), lb=0.0)
    w = inp.spec.omega
    prog.add_objective(p, np.repeat(w, npw))
    pen = -inp.spec.lam if direction == "up" else inp.spec.lam
    prog.add_objective(g_hi, pen)
    prog.add_objective(g_lo, pen)

    Lp = inp.art.op.stacked_p()
    offset = inp.nominal_offset().ravel()
    upper = (inp.comfort.T_max - s_comfort).ravel()
    lower = (inp.comfort.T_min + s_comfort).ravel()
    eye = np.eye(K * ny)
    # Lp p - g_hi <= upper - offset ; -Lp p - g_lo <= offset - lower
    prog.add_le_matrix(np.hstack([Lp, -eye]), np.concatenate([p.ravel(), g_hi.ravel()]), upper - offset)
    prog.add_le_matrix(np.hstack([-Lp, -eye]), np.concatenate([p.ravel(), g_lo.ravel()]), offset - lower)
    sol = solver.solve_or_raise(prog, f"{direction} envelope bound")
    return sol.value(p), sol.value(g_hi) + sol.value(g_lo), sol.objective


def _assemble(name, inp, up, down, margins_up=None, margins_down=None, mfph=None, params=None):
    dt = inp.art.model.dt
    p_up, s_up, obj_up = up
    p_dn, s_dn, obj_dn = down
    return FlexibilityEnvelope(
        formulation=name,
        E_up=cumulative_energy(p_up, dt),
        E_down=cumulative_energy(p_dn, dt),
        p_up=p_up,
        p_down=p_dn,
        slack_up=s_up,
        slack_down=s_dn,
        objective_up=obj_up,
        objective_down=obj_dn,
        dt=dt,
        mfph=mfph,
        margins_up=margins_up,
        margins_down=margins_down,
        params=params or {},
    )


def envelope_ui(inp: EnvelopeInputs) -> FlexibilityEnvelope:
    K, ny, npw = inp.spec.N + 2, inp.art.model.ny, inp.art.model.np_
    zc, zp = np.zeros((K, ny)), np.zeros((K, npw))
    up = _solve_bound(inp, "up", zc, zp)
    down = _solve_bound(inp, "down", zc, zp)
    mfph = mfph_from_margins(zc, inp.comfort, inp.spec.N)
    return _assemble("UI", inp, up, down, mfph=mfph)


def envelope_ua(inp: EnvelopeInputs) -> FlexibilityEnvelope:
    m = compute_margins(inp.art.basis, inp.art.op, inp.comfort.eps_C, inp.comfort.eps_T)
    zp = np.zeros((inp.spec.N + 2, inp.art.model.np_))
    up = _solve_bound(inp, "up", m.s_ua, zp)
    down = _solve_bound(inp, "down", m.s_ua, zp)
    mfph = mfph_from_margins(m.s_ua, inp.comfort, inp.spec.N)
    return _assemble("UA", inp, up, down, m, m, mfph)


def envelope_uaf_fixed(inp: EnvelopeInputs, policy_up: AffinePolicy,
                       policy_down: AffinePolicy | None = None) -> FlexibilityEnvelope:
    policy_down = policy_up if policy_down is None else policy_down
    art, c = inp.art, inp.comfort
    for pol in (policy_up, policy_down):
        pol.check_shape(inp.spec.N, art.model.np_, art.basis.nr)
    mu = compute_margins(art.basis, art.op, c.eps_C, c.eps_T, policy_up.gains)
    md = compute_margins(art.basis, art.op, c.eps_C, c.eps_T, policy_down.gains)
    up = _solve_bound(inp, "up", mu.s_c, mu.s_p)
    down = _solve_bound(inp, "down", md.s_c, md.s_p)
    mfph = min(mfph_from_margins(mu.s_c, c, inp.spec.N), mfph_from_margins(md.s_c, c, inp.spec.N))
    return _assemble("UAF-fixed", inp, up, down, mu, md, mfph)


# --- SOCP with affine feedback -----------------------------------------------

def _nz_cols(M, tol=0.0):
    return np.flatnonzero(np.any(np.abs(M) > tol, axis=0))


def _link(prog, target, t_cols, terms):
    """Equality target[:, t_cols] - sum coef @ src[:, s_cols] = 0.

    ``target`` and each ``src`` are index arrays (rows, len(cols)); columns
    are matched through their global ids; missing columns contribute zero.
    """
    m = target.shape[0]
    rows_all = [np.arange(target.size)]
    cols_all = [target.ravel()]
    vals_all = [np.ones(target.size)]
    row_id = np.arange(target.size).reshape(target.shape)
    for coef, src, s_cols in terms:
        common, pt, ps = np.intersect1d(t_cols, s_cols, return_indices=True)
        if not common.size:
            continue
        a, b = np.nonzero(coef)
        if not a.size:
            continue
        # rows: (nnz_coef, ncommon)
        rows_all.append(row_id[a][:, pt].ravel())
        cols_all.append(src[b][:, ps].ravel())
        vals_all.append(np.repeat(-coef[a, b], common.size))
    prog.add_eq(np.concatenate(rows_all), np.concatenate(cols_all), np.concatenate(vals_all),
                np.zeros(target.size))
    return m


def _solve_bound_feedback(inp: EnvelopeInputs, direction: str, tol: float):
    art = inp.art
    mdl, op, basis = art.model, art.op, art.basis
    N, K = inp.spec.N, inp.spec.N + 2
    ny, npw, nx, nr = mdl.ny, mdl.np_, mdl.nx, basis.nr
    qC = gaussian_quantile(1.0 - inp.comfort.eps_C)
    qT = gaussian_quantile(1.0 - inp.comfort.eps_T)

    prog = solver.ConicProgram("max" if direction == "up" else "min")
    lo = np.tile(inp.limits.p_min, (K, 1))
    hi = np.tile(inp.limits.p_max, (K, 1))
    lo[N + 1] = hi[N + 1] = 0.0
    p = prog.add_variables((K, npw), lb=lo, ub=hi)
    g_hi = prog.add_variables((K, ny), lb=0.0)
    g_lo = prog.add_variables((K, ny), lb=0.0)
    M = prog.add_variables((N, npw, nr))          # M[i-1] = M_i
    prog.add_objective(p, np.repeat(inp.spec.omega, npw))
    pen = -inp.spec.lam if direction == "up" else inp.spec.lam
    prog.add_objective(g_hi, pen)
    prog.add_objective(g_lo, pen)

    # V_i = M_i R_{i-1} Sigma^1/2 on the columns where R_{i-1} is nonzero.
    S, V = {}, {}
    for i in range(1, N + 1):
        Rw = basis.R_white[i - 1]
        cols = _nz_cols(Rw)
        S[i] = cols
        V[i] = prog.add_variables((npw, cols.size))
        if cols.size:
            rows_v = np.arange(V[i].size).reshape(npw, cols.size)
            r_rows = np.repeat(rows_v[:, None, :], nr, axis=1)            # (npw, nr, ncols)
            r_cols = np.repeat(M[i - 1][:, :, None], cols.size, axis=2)
            r_vals = -np.broadcast_to(Rw[:, cols][None], (npw, nr, cols.size))
            prog.add_eq(np.concatenate([rows_v.ravel(), r_rows.ravel()]),
                        np.concatenate([V[i].ravel(), r_cols.ravel()]),
                        np.concatenate([np.ones(V[i].size), r_vals.ravel()]),
                        np.zeros(V[i].size))

    # Feedback part of the whitened state deviation:
    # Z_1 = 0, Z_{k+1} = A Z_k + B_p V_k.
    Z, T = {1: None}, {1: np.zeros(0, dtype=int)}
    for k in range(2, K):
        cols = np.union1d(T[k - 1], S[k - 1])
        T[k] = cols
        Z[k] = prog.add_variables((nx, cols.size))
        terms = [(mdl.B_p, V[k - 1], S[k - 1])]
        if Z[k - 1] is not None:
            terms.append((mdl.A, Z[k - 1], T[k - 1]))
        _link(prog, Z[k], cols, terms)

    # Power margins: t_p[k, l] >= ||M_k[l] F_{k-1}||, F F^T = cov(r_{k-1}).
    t_p = prog.add_variables((N, npw), lb=0.0)
    for k in range(1, N + 1):
        F = psd_sqrt(basis.disturbance_covariance(k - 1))
        a, b = np.nonzero(F.T)        # entry m of the cone: sum_r F[r, m] M[l, r]
        for l in range(npw):
            prog.add_soc(a, M[k - 1][l][b], F.T[a, b], np.zeros(nr), [t_p[k - 1, l]], [1.0], 0.0)
    # p_k +/- qT t_p within [p_min, p_max] for k = 1..N
    for k in range(1, N + 1):
        for l in range(npw):
            prog.add_le([0, 0], [p[k, l], t_p[k - 1, l]], [1.0, qT], [inp.limits.p_max[l]])
            prog.add_le([0, 0], [p[k, l], t_p[k - 1, l]], [-1.0, qT], [-inp.limits.p_min[l]])

    # Comfort margins: t_c[k, j] >= ||Y_k[j] + C[j] Z_k + D_p[j] V_k||.
    offset = inp.nominal_offset()
    Lp = op.Lambda_p
    t_c = prog.add_variables((K, ny), lb=0.0)
    has_dp = np.any(mdl.D_p != 0)
    for k in range(K):
        Yw = basis.Y_white[k]
        var_cols = T.get(k, np.zeros(0, dtype=int)) if k >= 2 else np.zeros(0, dtype=int)
        if has_dp and 1 <= k <= N:
            var_cols = np.union1d(var_cols, S[k])
        rest = np.setdiff1d(np.arange(basis.size), var_cols)
        for j in range(ny):
            h = np.concatenate([Yw[j, var_cols], [np.linalg.norm(Yw[j, rest])]])
            rows, cols, vals = [], [], []
            if k >= 2 and Z[k] is not None:
                _, pv, pz = np.intersect1d(var_cols, T[k], return_indices=True)
                for a in np.flatnonzero(mdl.C[j]):
                    rows.append(pv)
                    cols.append(Z[k][a][pz])
                    vals.append(np.full(pv.size, mdl.C[j, a]))
            if has_dp and 1 <= k <= N:
                _, pv, ps = np.intersect1d(var_cols, S[k], return_indices=True)
                for l in np.flatnonzero(mdl.D_p[j]):
                    rows.append(pv)
                    cols.append(V[k][l][ps])
                    vals.append(np.full(pv.size, mdl.D_p[j, l]))
            cat = (lambda xs, dt_: np.concatenate(xs) if xs else np.zeros(0, dtype=dt_))
            prog.add_soc(cat(rows, int), cat(cols, int), cat(vals, float), h, [t_c[k, j]], [1.0], 0.0)

        # nominal y_k = offset + sum_i Lp[k,i] p_i ; comfort with margin qC t_c
        ii = np.arange(K)
        for j in range(ny):
            coef = Lp[k, :, j, :]                      # (K, npw)
            nzr, nzc = np.nonzero(coef)
            rows = np.zeros(nzr.size + 2, dtype=int)
            cols_u = np.concatenate([p[ii[nzr], nzc], [t_c[k, j], g_hi[k, j]]])
            vals_u = np.concatenate([coef[nzr, nzc], [qC, -1.0]])
            prog.add_le(rows, cols_u, vals_u, [inp.comfort.T_max[j] - offset[k, j]])
            cols_l = np.concatenate([p[ii[nzr], nzc], [t_c[k, j], g_lo[k, j]]])
            vals_l = np.concatenate([-coef[nzr, nzc], [qC, -1.0]])
            prog.add_le(rows, cols_l, vals_l, [offset[k, j] - inp.comfort.T_min[j]])

    sol = solver.solve_or_raise(prog, f"{direction} feedback envelope bound", tol=tol)
    gains = sol.value(M)
    return (sol.value(p), sol.value(g_hi) + sol.value(g_lo), sol.objective), gains, sol


def envelope_uaf_opt(inp: EnvelopeInputs, tol: float = 1e-9):
    """Envelope with optimal affine feedback gains.

    Returns ``(envelope, policy_up, policy_down)``.
    """
    up, g_up, sol_up = _solve_bound_feedback(inp, "up", tol)
    down, g_dn, sol_dn = _solve_bound_feedback(inp, "down", tol)
    pol_up = AffinePolicy(g_up, inp.hour, "up")
    pol_dn = AffinePolicy(g_dn, inp.hour, "down")
    art, c = inp.art, inp.comfort
    mu = compute_margins(art.basis, art.op, c.eps_C, c.eps_T, g_up)
    md = compute_margins(art.basis, art.op, c.eps_C, c.eps_T, g_dn)
    mfph = min(mfph_from_margins(mu.s_c, c, inp.spec.N), mfph_from_margins(md.s_c, c, inp.spec.N))
    params = {"solve_time_up": sol_up.solve_time, "solve_time_down": sol_dn.solve_time,
              "iterations_up": sol_up.iterations, "iterations_down": sol_dn.iterations}
    env = _assemble("UAF-opt", inp, up, down, mu, md, mfph, params)
    return env, pol_up, pol_dn


# --- metrics ---------------------------------------------------------------

def compute_fea(env: FlexibilityEnvelope) -> float:
    N = env.N
    return float(np.sum(env.E_up[1:N + 1] - env.E_down[1:N + 1]) * env.dt)


def mfph_from_margins(margins, comfort: ComfortSpec, N: int) -> int:
    """Largest k such that the tightened band is non-empty at every step 1..k."""
    margins = np.asarray(margins, float)
    for k in range(1, N + 1):
        if np.any(comfort.T_max - margins[k] <= comfort.T_min + margins[k]):
            return k - 1
    return N


def compute_mfph(basis: StackedNoiseBasis, comfort: ComfortSpec, op: PredictionOperator | None = None,
                 policy: AffinePolicy | None = None) -> int:
    gains = None if policy is None else (policy.gains if isinstance(policy, AffinePolicy) else policy)
    if gains is not None and op is None:
        raise ValueError("a prediction operator is needed to evaluate feedback margins")
    m = compute_margins(basis, op, comfort.eps_C, comfort.eps_T, gains) if op is not None else None
    margins = m.s_c if m is not None else np.array(
        [np.sqrt(np.diag(basis.output_covariance(k))) * gaussian_quantile(1 - comfort.eps_C)
         for k in range(basis.N + 2)])
    return mfph_from_margins(margins, comfort, basis.N)


def compute_envelope(name: str, inp: EnvelopeInputs, policy_up=None, policy_down=None):
    """Dispatch by formulation tag; returns (envelope, policies or None)."""
    if name == "UI":
        return envelope_ui(inp), None
    if name == "UA":
        return envelope_ua(inp), None
    if name == "UAF-opt":
        env, pu, pd = envelope_uaf_opt(inp)
        return env, (pu, pd)
    if name == "UAF-fixed":
        if policy_up is None:
            raise ValueError("UAF-fixed needs a policy")
        return envelope_uaf_fixed(inp, policy_up, policy_down), (policy_up, policy_down or policy_up)
    raise ValueError(f"unknown formulation {name!r}; expected one of {FORMULATIONS}")


# --- output ----------------------------------------------------------------

def write_envelope_csv(path, env: FlexibilityEnvelope, header: dict | None = None):
    npw = env.p_up.shape[1]
    with open(path, "w", newline="") as fh:
        for key, val in (header or {}).items():
            fh.write(f"# {key}: {val}\n")
        wr = csv.writer(fh)
        wr.writerow(["k", "E_up", "E_down"]
                    + [f"p_up_{l}" for l in range(npw)]
                    + [f"p_down_{l}" for l in range(npw)]
                    + ["slack_up", "slack_down"])
        for k in range(env.E_up.shape[0]):
            wr.writerow([k, _fmt(env.E_up[k]), _fmt(env.E_down[k])]
                        + [_fmt(v) for v in env.p_up[k]]
                        + [_fmt(v) for v in env.p_down[k]]
                        + [_fmt(env.slack_up[k].sum()), _fmt(env.slack_down[k].sum())])


def envelope_summary(env: FlexibilityEnvelope) -> dict:
    return {
        "formulation": env.formulation,
        "objective_up": env.objective_up,
        "objective_down": env.objective_down,
        "fea": compute_fea(env),
        "mfph": env.mfph,
        "slack_up_total": float(env.slack_up.sum()),
        "slack_down_total": float(env.slack_down.sum()),
    }


def _fmt(v) -> str:
    v = float(v)
    if abs(v) < 5e-13:
        v = 0.0
    return f"{v:.10g}"


def write_summary(path, doc: dict):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
