"""Uncertainty-aware flexibility envelopes for building heating and their use
in reserve markets."""

from .envelope import (
    ComfortSpec,
    EnvelopeInputs,
    EnvelopeProblemSpec,
    FlexibilityEnvelope,
    PowerLimits,
    build_artifacts,
    compute_fea,
    compute_mfph,
    envelope_ua,
    envelope_uaf_fixed,
    envelope_uaf_opt,
    envelope_ui,
)
from .model import (
    NoiseSpec,
    StateEstimate,
    StateSpaceModel,
    build_prediction_matrices,
    generate_synthetic_building,
    predict_nominal,
    steady_state_gain,
    update_state_estimate,
)
from .policies import AffinePolicy, PolicyLibrary, kmeans, policy_distance, select_policy
from .uncertainty import WeatherErrorModel, build_stacked_basis, compute_margins, gaussian_quantile

__version__ = "0.1.0"
