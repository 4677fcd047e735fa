"""Discrete-time stochastic thermal model and k-step prediction operators.

The building is described by

    x[t+1] = A x[t] + B_d d[t] + B_p p[t] + w[t]
    y[t]   = C x[t] + D_d d[t] + D_p p[t] + v[t]

with weather inputs ``d``, heating powers ``p`` (kW) and room temperatures
``y`` (degC).  ``w ~ N(0, Sigma_w)`` and ``v ~ N(0, Sigma_v)`` are white and
mutually independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .errors import (
    DimensionMismatch,
    LengthMismatch,
    NoConvergence,
    NonPSDCovariance,
    UnstableModel,
)

PSD_TOL = 1e-10


def _frozen(a, ndim=2):
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1 and ndim == 2:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 0)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StateSpaceModel:
    A: np.ndarray
    B_d: np.ndarray
    B_p: np.ndarray
    C: np.ndarray
    D_d: np.ndarray
    D_p: np.ndarray
    dt: float = 1.0
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("A", "B_d", "B_p", "C", "D_d", "D_p"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def ny(self) -> int:
        return self.C.shape[0]

    @property
    def nd(self) -> int:
        return self.B_d.shape[1]

    @property
    def np_(self) -> int:
        return self.B_p.shape[1]

    @property
    def B(self) -> np.ndarray:
        return np.hstack([self.B_d, self.B_p])

    @property
    def D(self) -> np.ndarray:
        return np.hstack([self.D_d, self.D_p])

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))


@dataclass(frozen=True)
class NoiseSpec:
    Sigma_w: np.ndarray
    Sigma_v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Sigma_w", _frozen(self.Sigma_w))
        object.__setattr__(self, "Sigma_v", _frozen(self.Sigma_v))


@dataclass(frozen=True)
class PredictionOperator:
    """k-step prediction matrices for k = 0..N+1.

    ``Lambda_p[k, i]`` is the (Ny, Np) response of the output at step k to the
    heating power at step i; ``Lambda_d`` and ``Lambda_w`` are analogous for
    weather inputs and process noise.
    """

    N: int
    C: np.ndarray
    A_powers: np.ndarray
    Lambda_p: np.ndarray
    Lambda_d: np.ndarray
    Lambda_w: np.ndarray

    @property
    def steps(self) -> int:
        return self.N + 2

    def free_response(self, x0) -> np.ndarray:
        """C A^k x0 for k = 0..N+1, shape (N+2, Ny)."""
        return np.einsum("yx,kxz,z->ky", self.C, self.A_powers, np.asarray(x0, float))

    def stacked_p(self) -> np.ndarray:
        """Lambda_p flattened to ((N+2)*Ny, (N+2)*Np) for use in LPs."""
        K = self.steps
        ny, npw = self.Lambda_p.shape[2:]
        return self.Lambda_p.transpose(0, 2, 1, 3).reshape(K * ny, K * npw)

    def stacked_d(self) -> np.ndarray:
        K = self.steps
        ny, nd = self.Lambda_d.shape[2:]
        return self.Lambda_d.transpose(0, 2, 1, 3).reshape(K * ny, K * nd)


@dataclass(frozen=True)
class StateEstimate:
    x_hat: np.ndarray
    gain: np.ndarray
    P: np.ndarray | None = None


def _check_psd(S, name):
    S = np.asarray(S, float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {S.shape}")
    if not np.allclose(S, S.T, atol=1e-12, rtol=1e-9):
        raise NonPSDCovariance(f"{name} is not symmetric")
    if S.size and np.linalg.eigvalsh(S).min() < -PSD_TOL * max(1.0, np.abs(S).max()):
        raise NonPSDCovariance(f"{name} has a negative eigenvalue")


def validate_model(model: StateSpaceModel, noise: NoiseSpec | None = None) -> StateSpaceModel:
    nx = model.A.shape[0]
    if model.A.shape != (nx, nx) or nx < 1:
        raise DimensionMismatch(f"A must be square and non-empty, got {model.A.shape}")
    ny, nd, npw = model.C.shape[0], model.B_d.shape[1], model.B_p.shape[1]
    if min(ny, nd, npw) < 1:
        raise DimensionMismatch("need at least one output, one weather input and one heating input")
    expected = {
        "B_d": (nx, nd),
        "B_p": (nx, npw),
        "C": (ny, nx),
        "D_d": (ny, nd),
        "D_p": (ny, npw),
    }
    for name, shape in expected.items():
        if getattr(model, name).shape != shape:
            raise DimensionMismatch(f"{name} has shape {getattr(model, name).shape}, expected {shape}")
    if not model.dt > 0:
        raise DimensionMismatch(f"dt must be positive, got {model.dt}")
    for name in ("A", "B_d", "B_p", "C", "D_d", "D_p"):
        if not np.all(np.isfinite(getattr(model, name))):
            raise DimensionMismatch(f"{name} contains non-finite entries")
    rho = model.spectral_radius()
    if rho >= 1.0:
        raise UnstableModel(f"spectral radius of A is {rho:.6g} >= 1")
    if noise is not None:
        if noise.Sigma_w.shape != (nx, nx):
            raise DimensionMismatch(f"Sigma_w has shape {noise.Sigma_w.shape}, expected {(nx, nx)}")
        if noise.Sigma_v.shape != (ny, ny):
            raise DimensionMismatch(f"Sigma_v has shape {noise.Sigma_v.shape}, expected {(ny, ny)}")
        _check_psd(noise.Sigma_w, "Sigma_w")
        _check_psd(noise.Sigma_v, "Sigma_v")
    return model


def build_prediction_matrices(model: StateSpaceModel, N: int) -> PredictionOperator:
    if N < 1:
        raise ValueError(f"horizon must be >= 1, got {N}")
    K = N + 2
    nx, ny, nd, npw = model.nx, model.ny, model.nd, model.np_
    A_powers = np.empty((K, nx, nx))
    A_powers[0] = np.eye(nx)
    for k in range(1, K):
        A_powers[k] = model.A @ A_powers[k - 1]

    # C A^j B depends only on the lag j = k-1-i, so compute each once.
    CA = np.einsum("yx,jxz->jyz", model.C, A_powers)
    CAB_p = CA @ model.B_p
    CAB_d = CA @ model.B_d

    Lp = np.zeros((K, K, ny, npw))
    Ld = np.zeros((K, K, ny, nd))
    Lw = np.zeros((K, K, ny, nx))
    for k in range(K):
        Lp[k, k] = model.D_p
        Ld[k, k] = model.D_d
        for i in range(k):
            lag = k - 1 - i
            Lp[k, i] = CAB_p[lag]
            Ld[k, i] = CAB_d[lag]
            Lw[k, i] = CA[lag]
    for arr in (A_powers, Lp, Ld, Lw):
        arr.setflags(write=False)
    return PredictionOperator(N, model.C, A_powers, Lp, Ld, Lw)


def predict_nominal(op: PredictionOperator, x0, weather, powers) -> np.ndarray:
    """Expected outputs for k = 0..N+1 given full input trajectories."""
    weather = np.atleast_2d(np.asarray(weather, float))
    powers = np.atleast_2d(np.asarray(powers, float))
    K = op.steps
    if weather.shape != (K, op.Lambda_d.shape[3]):
        raise LengthMismatch(f"weather has shape {weather.shape}, expected {(K, op.Lambda_d.shape[3])}")
    if powers.shape != (K, op.Lambda_p.shape[3]):
        raise LengthMismatch(f"powers has shape {powers.shape}, expected {(K, op.Lambda_p.shape[3])}")
    y = op.free_response(x0)
    y += np.einsum("kiyp,ip->ky", op.Lambda_p, powers)
    y += np.einsum("kiyd,id->ky", op.Lambda_d, weather)
    return y


def simulate(model: StateSpaceModel, x0, weather, powers, w=None, v=None):
    """Step the state-space model forward.  Returns (states (K+1, Nx), outputs (K, Ny))."""
    weather = np.atleast_2d(np.asarray(weather, float))
    powers = np.atleast_2d(np.asarray(powers, float))
    K = weather.shape[0]
    x = np.empty((K + 1, model.nx))
    y = np.empty((K, model.ny))
    x[0] = x0
    for k in range(K):
        y[k] = model.C @ x[k] + model.D_d @ weather[k] + model.D_p @ powers[k]
        if v is not None:
            y[k] += v[k]
        x[k + 1] = model.A @ x[k] + model.B_d @ weather[k] + model.B_p @ powers[k]
        if w is not None:
            x[k + 1] += w[k]
    return x, y


def riccati_residual(model: StateSpaceModel, noise: NoiseSpec, P) -> float:
    A, C = model.A, model.C
    S = C @ P @ C.T + noise.Sigma_v
    rhs = A @ (P - P @ C.T @ np.linalg.solve(S, C @ P)) @ A.T + noise.Sigma_w
    return float(np.linalg.norm(rhs - P) / max(np.linalg.norm(P), 1e-300))


def steady_state_gain(model: StateSpaceModel, noise: NoiseSpec, tol: float = 1e-9,
                      max_iter: int = 10_000):
    """Fixed point of the prediction-form Riccati recursion.

    Returns ``(K, P)`` where ``P`` is the prior error covariance and
    ``K = P C^T (C P C^T + Sigma_v)^-1`` the measurement-update gain.
    """
    A, C, Q, R = model.A, model.C, noise.Sigma_w, noise.Sigma_v
    P = Q.copy()
    for _ in range(max_iter):
        S = C @ P @ C.T + R
        K = np.linalg.solve(S, C @ P).T
        P_new = A @ (P - K @ C @ P) @ A.T + Q
        P_new = 0.5 * (P_new + P_new.T)
        scale = max(np.linalg.norm(P_new), 1e-300)
        if np.linalg.norm(P_new - P) <= 0.01 * tol * scale or not np.any(P_new):
            P = P_new
            break
        P = P_new
    else:
        raise NoConvergence(f"Riccati iteration did not converge in {max_iter} iterations")
    if np.any(P) and riccati_residual(model, noise, P) > tol:
        raise NoConvergence("Riccati fixed point residual above tolerance")
    S = C @ P @ C.T + R
    K = np.linalg.solve(S, C @ P).T
    return K, P


def update_state_estimate(est: StateEstimate, model: StateSpaceModel, u_prev, y_meas,
                          u_now=None) -> StateEstimate:
    """Predict with the previous input, correct with the new measurement.

    ``u_prev`` and ``u_now`` are stacked ``[d; p]`` inputs; ``u_now`` feeds the
    direct-feedthrough term of the measurement equation and defaults to zeros.
    """
    u_prev = np.asarray(u_prev, float)
    u_now = np.zeros_like(u_prev) if u_now is None else np.asarray(u_now, float)
    x_pred = model.A @ est.x_hat + model.B @ u_prev
    innovation = np.asarray(y_meas, float) - model.C @ x_pred - model.D @ u_now
    return StateEstimate(x_pred + est.gain @ innovation, est.gain, est.P)


def steady_state_point(model: StateSpaceModel, weather, room_temps):
    """State and constant heating that hold the outputs at ``room_temps``.

    Requires Np == Ny; solves x = A x + B_d d + B_p p, y = C x + D u.
    """
    nx, ny, npw = model.nx, model.ny, model.np_
    if npw != ny:
        raise DimensionMismatch("steady_state_point needs as many heating inputs as rooms")
    d = np.asarray(weather, float)
    M = np.block([
        [np.eye(nx) - model.A, -model.B_p],
        [model.C, model.D_p],
    ])
    rhs = np.concatenate([model.B_d @ d, np.asarray(room_temps, float) - model.D_d @ d])
    sol = np.linalg.solve(M, rhs)
    return sol[:nx], sol[nx:]


def _discretize(Ac, Bc, dt):
    n, m = Bc.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = Ac
    aug[:n, n:] = Bc
    E = expm(aug * dt)
    return E[:n, :n], E[:n, n:]


def _error_std(model, Sigma_w, Sigma_v, k):
    var = np.diag(Sigma_v).copy()
    M = model.C.copy()
    for _ in range(k):
        var += np.einsum("ij,jk,ik->i", M, Sigma_w, M)
        M = M @ model.A
    return var


def generate_synthetic_building(seed: int, Ny: int = 3, coupling: float = 1.0,
                                dt: float = 1.0, one_step_std=None, long_std=None,
                                long_k: int = 24):
    """Random RC building: one air node per room plus a shared thermal mass.

    Weather inputs are outdoor temperature (degC) and global irradiance
    (kW/m2); one heating input (kW) per room.  Noise is scaled so the room
    model error has roughly ``one_step_std`` at one step and ``long_std`` at
    ``long_k`` steps.
    """
    if Ny < 1:
        raise ValueError("Ny must be >= 1")
    rng = np.random.default_rng(seed)
    nx = Ny + 1
    m = Ny
    C_room = rng.uniform(1.0, 1.5, Ny)          # kWh/K
    C_mass = rng.uniform(9.0, 13.0)
    H_rm = rng.uniform(0.18, 0.28, Ny)          # kW/K
    H_ro = rng.uniform(0.025, 0.04, Ny)
    H_mo = rng.uniform(0.05, 0.08)
    solar_gain = rng.uniform(1.0, 3.0, Ny)      # kW per kW/m2
    H_rr = np.zeros((Ny, Ny))
    for i in range(Ny):
        for j in range(i + 1, Ny):
            H_rr[i, j] = H_rr[j, i] = coupling * rng.uniform(0.03, 0.08)

    caps = np.concatenate([C_room, [C_mass]])
    G = np.zeros((nx, nx))
    G[:Ny, :Ny] = H_rr
    G[:Ny, m] = H_rm
    G[m, :Ny] = H_rm
    to_out = np.concatenate([H_ro, [H_mo]])
    Ac = (G - np.diag(G.sum(axis=1) + to_out)) / caps[:, None]
    Bc_d = np.zeros((nx, 2))
    Bc_d[:, 0] = to_out / caps
    Bc_d[:Ny, 1] = solar_gain / C_room
    Bc_p = np.zeros((nx, Ny))
    Bc_p[np.arange(Ny), np.arange(Ny)] = 1.0 / C_room

    A, B = _discretize(Ac, np.hstack([Bc_d, Bc_p]), dt)
    C = np.zeros((Ny, nx))
    C[np.arange(Ny), np.arange(Ny)] = 1.0
    labels = {
        "outputs": [f"room_{i}" for i in range(Ny)],
        "weather": ["outdoor_temp", "irradiance"],
        "heating": [f"heater_{i}" for i in range(Ny)],
        "states": [f"room_{i}" for i in range(Ny)] + ["mass"],
    }
    model = StateSpaceModel(A, B[:, :2], B[:, 2:], C, np.zeros((Ny, 2)), np.zeros((Ny, Ny)),
                            dt=dt, labels=labels)

    one = rng.uniform(0.08, 0.12) if one_step_std is None else one_step_std
    far = rng.uniform(0.42, 0.58) if long_std is None else long_std
    shape_w = np.diag(np.concatenate([np.ones(Ny), [6.0]]))
    a1 = _error_std(model, shape_w, np.zeros((Ny, Ny)), 1).mean()
    aL = _error_std(model, shape_w, np.zeros((Ny, Ny)), long_k).mean()
    scale_w = (far**2 - one**2) / (aL - a1)
    var_v = one**2 - scale_w * a1
    if var_v < 0.25 * one**2:
        var_v = 0.25 * one**2
        scale_w = 0.75 * one**2 / a1
    noise = NoiseSpec(scale_w * shape_w, var_v * np.eye(Ny))
    validate_model(model, noise)
    return model, noise


# --- serialization -------------------------------------------------------

def _mat(a):
    return [[float(x) for x in row] for row in np.atleast_2d(a)]


def model_to_dict(model: StateSpaceModel, noise: NoiseSpec | None = None) -> dict:
    doc = {
        "A": _mat(model.A),
        "B_d": _mat(model.B_d),
        "B_p": _mat(model.B_p),
        "C": _mat(model.C),
        "D_d": _mat(model.D_d),
        "D_p": _mat(model.D_p),
        "dt": model.dt,
        "labels": dict(model.labels),
    }
    if noise is not None:
        doc["Sigma_w"] = _mat(noise.Sigma_w)
        doc["Sigma_v"] = _mat(noise.Sigma_v)
    return doc


def model_from_dict(doc: dict):
    try:
        model = StateSpaceModel(
            np.array(doc["A"], float),
            np.array(doc["B_d"], float),
            np.array(doc["B_p"], float),
            np.array(doc["C"], float),
            np.array(doc["D_d"], float),
            np.array(doc["D_p"], float),
            dt=doc.get("dt", 1.0),
            labels=doc.get("labels", {}),
        )
    except KeyError as exc:
        raise DimensionMismatch(f"model document is missing {exc.args[0]!r}") from None
    noise = None
    if "Sigma_w" in doc and "Sigma_v" in doc:
        noise = NoiseSpec(np.array(doc["Sigma_w"], float), np.array(doc["Sigma_v"], float))
    validate_model(model, noise)
    return model, noise


def save_model(path, model: StateSpaceModel, noise: NoiseSpec | None = None, extra=None):
    doc = model_to_dict(model, noise)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))


def load_model(path):
    doc = json.loads(Path(path).read_text())
    return model_from_dict(doc)
