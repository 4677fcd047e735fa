"""Forecast and model-error propagation, and chance-constraint safety margins.

All noise sources over a horizon are stacked into one Gaussian vector

    xi = [d0; n_1..n_{N+1}; w_0..w_N; v_0..v_{N+1}]

with block-diagonal covariance.  Every disturbance quantity the planners need
(weather error, model error, output deviation) is a fixed linear map of xi,
so variances follow from ``map @ Sigma^{1/2}`` row norms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .errors import DimensionMismatch, DomainError, NonPSDCovariance
from .model import NoiseSpec, PredictionOperator, _check_psd, _frozen

EIG_CLAMP = 1e-12


@dataclass(frozen=True)
class WeatherErrorModel:
    """AR(1) forecast error d_k = phi d_{k-1} + n_k, d_0 ~ N(0, Sigma_d0)."""

    phi: np.ndarray
    Sigma_d: np.ndarray
    Sigma_d0: np.ndarray

    def __post_init__(self):
        for name in ("phi", "Sigma_d", "Sigma_d0"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        nd = self.phi.shape[0]
        if self.phi.shape != (nd, nd) or self.Sigma_d.shape != (nd, nd) or self.Sigma_d0.shape != (nd, nd):
            raise DimensionMismatch("phi, Sigma_d and Sigma_d0 must share one square shape")
        if np.max(np.abs(np.linalg.eigvals(self.phi))) >= 1.0:
            raise DomainError("AR(1) coefficient matrix must have spectral radius < 1")
        _check_psd(self.Sigma_d, "Sigma_d")
        _check_psd(self.Sigma_d0, "Sigma_d0")

    @property
    def nd(self) -> int:
        return self.phi.shape[0]

    @classmethod
    def default(cls, nd: int = 2):
        """Outdoor temperature (degC) and irradiance (kW/m2) error model."""
        if nd == 2:
            return cls(np.diag([0.85, 0.6]), np.diag([0.3**2, 0.03**2]), np.diag([0.2**2, 0.02**2]))
        return cls(0.85 * np.eye(nd), 0.09 * np.eye(nd), 0.04 * np.eye(nd))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("phi", "Sigma_d", "Sigma_d0")}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["phi"], float), np.array(doc["Sigma_d"], float),
                   np.array(doc["Sigma_d0"], float))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def gaussian_quantile(p: float) -> float:
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"quantile probability must lie in (0, 1), got {p}")
    return float(ndtri(p))


def psd_sqrt(S) -> np.ndarray:
    """Symmetric square root; eigenvalues in [-1e-12, 0) are clamped to zero."""
    S = np.asarray(S, float)
    if not S.size:
        return S.copy()
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    tol = EIG_CLAMP * max(1.0, np.abs(vals).max())
    if vals.min() < -tol:
        raise NonPSDCovariance(f"matrix has eigenvalue {vals.min():.3g} < 0")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def model_error_covariance(op: PredictionOperator, noise: NoiseSpec, k: int) -> np.ndarray:
    cov = np.array(noise.Sigma_v, float)
    CAi = op.C.copy()
    for i in range(k):
        cov += CAi @ noise.Sigma_w @ CAi.T
        CAi = CAi @ op.A_powers[1]
    return cov


def weather_error_covariance(wem: WeatherErrorModel, k: int) -> np.ndarray:
    if k < 0:
        raise DomainError("k must be non-negative")
    phi_k = np.linalg.matrix_power(wem.phi, k)
    cov = phi_k @ wem.Sigma_d0 @ phi_k.T
    phi_i = np.eye(wem.nd)
    for _ in range(k):
        cov += phi_i @ wem.Sigma_d @ phi_i.T
        phi_i = phi_i @ wem.phi
    return cov


@dataclass(frozen=True)
class StackedNoiseBasis:
    N: int
    slices: dict
    Sigma: np.ndarray
    Sigma_half: np.ndarray
    D_maps: np.ndarray      # (N+2, Nd, n_xi)
    E_maps: np.ndarray      # (N+2, Ny, n_xi)
    R_maps: np.ndarray      # (N+2, Nd+Ny, n_xi)
    Y_base: np.ndarray      # (N+2, Ny, n_xi)
    Y_white: np.ndarray     # Y_base @ Sigma_half
    R_white: np.ndarray     # R_maps @ Sigma_half

    @property
    def size(self) -> int:
        return self.Sigma.shape[0]

    @property
    def nr(self) -> int:
        return self.R_maps.shape[1]

    def output_covariance(self, k: int) -> np.ndarray:
        return self.Y_white[k] @ self.Y_white[k].T

    def disturbance_covariance(self, k: int) -> np.ndarray:
        return self.R_white[k] @ self.R_white[k].T


def noise_layout(N: int, nd: int, nx: int, ny: int) -> dict:
    """Slices of each block inside the stacked noise vector."""
    out, pos = {}, 0
    for name, width in (("d0", nd), ("n", (N + 1) * nd), ("w", (N + 1) * nx), ("v", (N + 2) * ny)):
        out[name] = slice(pos, pos + width)
        pos += width
    out["size"] = pos
    return out


def build_stacked_basis(op: PredictionOperator, noise: NoiseSpec, wem: WeatherErrorModel,
                        N: int | None = None) -> StackedNoiseBasis:
    N = op.N if N is None else N
    if N != op.N:
        raise DimensionMismatch(f"basis horizon {N} differs from operator horizon {op.N}")
    K = N + 2
    ny, nx = op.C.shape
    nd = wem.nd
    if op.Lambda_d.shape[3] != nd:
        raise DimensionMismatch("weather error model and state-space model disagree on Nd")
    lay = noise_layout(N, nd, nx, ny)
    n_xi = lay["size"]

    def n_col(j):      # columns of n_j, j = 1..N+1
        s = lay["n"].start + (j - 1) * nd
        return slice(s, s + nd)

    def w_col(i):      # columns of w_i, i = 0..N
        s = lay["w"].start + i * nx
        return slice(s, s + nx)

    def v_col(k):      # columns of v_k, k = 0..N+1
        s = lay["v"].start + k * ny
        return slice(s, s + ny)

    phi_pow = [np.eye(nd)]
    for _ in range(K):
        phi_pow.append(phi_pow[-1] @ wem.phi)

    D_maps = np.zeros((K, nd, n_xi))
    E_maps = np.zeros((K, ny, n_xi))
    for k in range(K):
        D_maps[k][:, lay["d0"]] = phi_pow[k]
        for j in range(1, k + 1):
            D_maps[k][:, n_col(j)] = phi_pow[k - j]
        E_maps[k][:, v_col(k)] = np.eye(ny)
        for i in range(k):
            E_maps[k][:, w_col(i)] = op.Lambda_w[k, i]
    R_maps = np.concatenate([D_maps, E_maps], axis=1)
    Y_base = E_maps + np.einsum("kiyd,idx->kyx", op.Lambda_d, D_maps)

    Sigma = np.zeros((n_xi, n_xi))
    Sigma_half = np.zeros((n_xi, n_xi))
    blocks = [(lay["d0"], wem.Sigma_d0)]
    blocks += [(n_col(j), wem.Sigma_d) for j in range(1, N + 2)]
    blocks += [(w_col(i), noise.Sigma_w) for i in range(N + 1)]
    blocks += [(v_col(k), noise.Sigma_v) for k in range(K)]
    roots = {}
    for sl, S in blocks:
        key = id(S)
        if key not in roots:
            roots[key] = psd_sqrt(S)
        Sigma[sl, sl] = S
        Sigma_half[sl, sl] = roots[key]

    Y_white = Y_base @ Sigma_half
    R_white = R_maps @ Sigma_half
    slices = {k: v for k, v in lay.items()}
    arrays = (Sigma, Sigma_half, D_maps, E_maps, R_maps, Y_base, Y_white, R_white)
    for a in arrays:
        a.setflags(write=False)
    return StackedNoiseBasis(N, slices, *arrays)


def _row_norms(M) -> np.ndarray:
    return np.sqrt(np.einsum("...ij,...ij->...i", M, M))


def margin_no_feedback(basis: StackedNoiseBasis, k: int, eps_C: float) -> np.ndarray:
    return _row_norms(basis.Y_white[k]) * gaussian_quantile(1.0 - eps_C)


def margin_power(basis: StackedNoiseBasis, M_k, k: int, eps_T: float) -> np.ndarray:
    """Power margin for the adjustment ``M_k r_{k-1}``; zero at k = 0."""
    M_k = np.atleast_2d(np.asarray(M_k, float))
    if k == 0:
        return np.zeros(M_k.shape[0])
    return _row_norms(M_k @ basis.R_white[k - 1]) * gaussian_quantile(1.0 - eps_T)


def feedback_output_map(basis: StackedNoiseBasis, op: PredictionOperator, gains, k: int) -> np.ndarray:
    """Whitened map xi -> y_k deviation when powers follow p_i + M_i r_{i-1}.

    ``gains[i-1]`` holds M_i for i = 1..N.
    """
    G = basis.Y_white[k].copy()
    for i in range(1, min(k, basis.N) + 1):
        G += op.Lambda_p[k, i] @ gains[i - 1] @ basis.R_white[i - 1]
    return G


def margin_output_with_feedback(basis: StackedNoiseBasis, op: PredictionOperator, gains,
                                k: int, eps_C: float) -> np.ndarray:
    G = feedback_output_map(basis, op, np.asarray(gains, float), k)
    return _row_norms(G) * gaussian_quantile(1.0 - eps_C)


@dataclass(frozen=True)
class SafetyMargins:
    s_ua: np.ndarray    # (N+2, Ny)
    s_p: np.ndarray     # (N+2, Np), zero at k = 0 and k = N+1
    s_c: np.ndarray     # (N+2, Ny)


def compute_margins(basis: StackedNoiseBasis, op: PredictionOperator, eps_C: float,
                    eps_T: float = 0.05, gains=None) -> SafetyMargins:
    K = basis.N + 2
    npw = op.Lambda_p.shape[3]
    s_ua = np.array([margin_no_feedback(basis, k, eps_C) for k in range(K)])
    s_p = np.zeros((K, npw))
    if gains is None:
        s_c = s_ua.copy()
    else:
        gains = np.asarray(gains, float)
        for k in range(1, basis.N + 1):
            s_p[k] = margin_power(basis, gains[k - 1], k, eps_T)
        s_c = np.array([margin_output_with_feedback(basis, op, gains, k, eps_C) for k in range(K)])
    return SafetyMargins(s_ua, s_p, s_c)
