"""Quantum filtering, effect-operator smoothing and retrodiction for monitored open systems."""

from .errors import (ConfigError, DimensionError, GridError, NonHermitianError,
                     PropagationError, QRetrodictError, ZeroNormalizer,
                     ZeroProbabilityOutcome, ZeroProbabilityRecord)
from .filtering import (FilterState, FilterTrajectory, filter_step, run_filter,
                        run_filter_ensemble, run_zakai, zakai_step)
from .model import (ExperimentSpec, InterventionSpec, OpenSystemModel, Violation,
                    conditioned_update, cp_map, validate)
from .smoother import (EffectTrajectory, PastStatePair, RetrodictionResult,
                       backward_effect_step, effect_trajectory, forward_propagator,
                       past_state_pair, retrodict, retrodict_multi, retrodict_single)
from .trajectory import MeasurementRecord, TrajectoryResult, simulate, simulate_ensemble

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "GridError", "NonHermitianError", "PropagationError",
    "QRetrodictError", "ZeroNormalizer", "ZeroProbabilityOutcome", "ZeroProbabilityRecord",
    "FilterState", "FilterTrajectory", "filter_step", "run_filter", "run_filter_ensemble",
    "run_zakai", "zakai_step", "ExperimentSpec", "InterventionSpec", "OpenSystemModel",
    "Violation", "conditioned_update", "cp_map", "validate", "EffectTrajectory",
    "PastStatePair", "RetrodictionResult", "backward_effect_step", "effect_trajectory",
    "forward_propagator", "past_state_pair", "retrodict", "retrodict_multi",
    "retrodict_single", "MeasurementRecord", "TrajectoryResult", "simulate",
    "simulate_ensemble",
]
