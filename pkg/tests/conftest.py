import numpy as np
import pytest

from flexquant.envelope import (
    ComfortSpec,
    EnvelopeInputs,
    EnvelopeProblemSpec,
    PowerLimits,
    build_artifacts,
)
from flexquant.instances import InstanceConfig, make_instance
from flexquant.model import NoiseSpec, StateSpaceModel
from flexquant.uncertainty import WeatherErrorModel


def scalar_model(a=0.5, b_d=0.0, b_p=1.0, c=1.0, d_d=0.0, d_p=0.0):
    return StateSpaceModel([[a]], [[b_d]], [[b_p]], [[c]], [[d_d]], [[d_p]])


def scalar_inputs(N=2, a=0.8, b_p=0.5, b_d=0.1, x0=20.0, sw=0.0, sv=0.0, sd=0.0, phi=0.5,
                  T=(19.0, 21.0), p=(0.0, 1.0), eps_C=0.2, eps_T=0.05, lam=1e3, d=0.0):
    model = scalar_model(a=a, b_d=b_d, b_p=b_p)
    noise = NoiseSpec([[sw]], [[sv]])
    wem = WeatherErrorModel([[phi]], [[sd]], [[sd]])
    art = build_artifacts(model, noise, wem, N)
    return EnvelopeInputs(
        art, np.array([x0]), np.full((N + 2, 1), d),
        ComfortSpec([T[0]], [T[1]], eps_C=eps_C, eps_T=eps_T),
        PowerLimits([p[0]], [p[1]]), EnvelopeProblemSpec(N, lam),
    )


@pytest.fixture(scope="session")
def instance():
    return make_instance(0)


@pytest.fixture(scope="session")
def noiseless_instance():
    return make_instance(0, InstanceConfig(noise_scale=0.0))
