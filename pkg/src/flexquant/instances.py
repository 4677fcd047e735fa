"""Synthetic weather days and ready-to-solve envelope instances."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .envelope import ComfortSpec, EnvelopeInputs, EnvelopeProblemSpec, PowerLimits, build_artifacts
from .model import NoiseSpec, generate_synthetic_building, steady_state_point
from .uncertainty import WeatherErrorModel


def synth_weather(seed: int, steps: int, hour: int = 0, dt: float = 1.0) -> np.ndarray:
    """Forecast rows [outdoor temperature degC, irradiance kW/m2] for ``steps`` steps."""
    rng = np.random.default_rng(seed)
    mean = rng.uniform(-4.0, 6.0)
    amp = rng.uniform(2.0, 5.0)
    peak = rng.uniform(0.1, 0.5)
    t = (hour + np.arange(steps) * dt) % 24.0
    temp = mean + amp * np.cos(2 * np.pi * (t - 15.0) / 24.0)
    sun = np.where((t > 8.0) & (t < 16.0), peak * np.sin(np.pi * (t - 8.0) / 8.0) ** 2, 0.0)
    return np.column_stack([temp, sun])


def sample_weather_error(wem: WeatherErrorModel, steps: int, rng) -> np.ndarray:
    """One AR(1) forecast-error path of length ``steps``."""
    nd = wem.nd
    out = np.zeros((steps, nd))
    L0 = _chol(wem.Sigma_d0)
    L = _chol(wem.Sigma_d)
    out[0] = L0 @ rng.standard_normal(nd)
    for k in range(1, steps):
        out[k] = wem.phi @ out[k - 1] + L @ rng.standard_normal(nd)
    return out


def _chol(S):
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class InstanceConfig:
    N: int = 24
    Ny: int = 3
    comfort_width: float = 2.0
    comfort_center: float = 21.5
    eps_C: float = 0.2
    eps_T: float = 0.05
    p_max: float = 2.0          # kW per heating input
    p_min: float = 0.0
    noise_scale: float = 1.0    # multiplies every noise standard deviation
    lam: float = 1e3
    hour: int = 0


def scale_noise(noise: NoiseSpec, wem: WeatherErrorModel, factor: float):
    f2 = factor ** 2
    return (NoiseSpec(noise.Sigma_w * f2, noise.Sigma_v * f2),
            WeatherErrorModel(wem.phi, wem.Sigma_d * f2, wem.Sigma_d0 * f2))


def make_instance(seed: int, cfg: InstanceConfig = InstanceConfig(), model=None, noise=None,
                  wem=None, art=None) -> EnvelopeInputs:
    """Synthetic building, day and initial state derived from ``seed``.

    Passing ``art`` (or ``model``/``noise``) reuses a fixed building and only
    draws a new day.
    """
    rng = np.random.default_rng([seed, 7])
    if art is None:
        if model is None:
            model, noise = generate_synthetic_building(seed, cfg.Ny)
        wem = WeatherErrorModel.default(model.nd) if wem is None else wem
        if cfg.noise_scale != 1.0:
            noise, wem = scale_noise(noise, wem, cfg.noise_scale)
        art = build_artifacts(model, noise, wem, cfg.N)
    model = art.model
    forecast = synth_weather(int(rng.integers(2**31)), cfg.N + 2, cfg.hour, model.dt)
    start = cfg.comfort_center + rng.uniform(-0.3, 0.3, model.ny)
    x0, _ = steady_state_point(model, forecast[0], start)
    comfort = ComfortSpec.band(cfg.comfort_center, cfg.comfort_width, model.ny,
                               eps_C=cfg.eps_C, eps_T=cfg.eps_T)
    limits = PowerLimits(np.full(model.np_, cfg.p_min), np.full(model.np_, cfg.p_max))
    return EnvelopeInputs(art, x0, forecast, comfort, limits, EnvelopeProblemSpec(cfg.N, cfg.lam), cfg.hour)


def with_comfort(inp: EnvelopeInputs, **changes) -> EnvelopeInputs:
    c = inp.comfort
    fields = {"T_min": c.T_min, "T_max": c.T_max, "eps_C": c.eps_C, "eps_T": c.eps_T}
    fields.update(changes)
    return replace(inp, comfort=ComfortSpec(**fields))
