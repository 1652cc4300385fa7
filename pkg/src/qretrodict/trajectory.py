"""Monte Carlo ground truth: diffusive records, true conditioned states, intervention outcomes."""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import qlinalg as ql
from .errors import ConfigError, PropagationError
from .filtering import _apply_intervention, _normalized_step, mean_signal
from .model import ExperimentSpec, cp_map, validate

#: Simulated states whose smallest eigenvalue drops below this abort the run.
POSITIVITY_FLOOR = -1e-6


@dataclass(frozen=True, eq=False)
class MeasurementRecord:
    """Homodyne readout: per-channel increments ``dY_k(t_i)`` on a uniform grid.

    ``increments[k, i]`` is the increment of channel ``k`` over
    ``[i dt, (i + 1) dt)``.
    """

    dt: float
    increments: np.ndarray
    intervention_log: List[Tuple[float, str]] = field(default_factory=list)

    def __post_init__(self):
        inc = np.array(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[None, :]
        if inc.ndim != 2:
            raise ValueError(f"increments must be channels x steps, got shape {inc.shape}")
        if not np.all(np.isfinite(inc)):
            raise ValueError("record increments contain non-finite values")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "intervention_log",
                           [(float(t), str(m)) for t, m in self.intervention_log])

    @property
    def n_channels(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def T(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        """Start time of every increment."""
        return self.dt * np.arange(self.n_steps)


@dataclass(frozen=True, eq=False)
class TrajectoryResult:
    record: MeasurementRecord
    true_states: Optional[np.ndarray]
    hidden_outcomes: List[Tuple[float, str]]
    state_times: Optional[np.ndarray] = None


def derive_rng(seed: int, trajectory_index: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for one trajectory of an ensemble."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(trajectory_index),))
    return np.random.default_rng(ss)


def gaussian_increments(seed, trajectory_index, dt, shape):
    """Wiener increments ``N(0, dt)`` from the trajectory's own stream."""
    return derive_rng(seed, trajectory_index).standard_normal(shape) * np.sqrt(dt)


def _draws(spec, index):
    rng = derive_rng(spec.seed, index)
    noise = rng.standard_normal((spec.model.n_channels, spec.n_steps)) * np.sqrt(spec.dt)
    uniforms = rng.random(len(spec.interventions))
    return noise, uniforms


def _sample_label(iv, rho, u):
    labels = iv.labels
    p = np.array([np.trace(cp_map(iv, rho, m)).real for m in labels])
    cdf = np.cumsum(np.clip(p, 0.0, None))
    idx = int(np.searchsorted(cdf / cdf[-1], u, side="right"))
    return labels[min(idx, len(labels) - 1)]


def _ensure_valid(spec):
    problems = validate(spec)
    if problems:
        raise ConfigError("invalid experiment: " + "; ".join(map(str, problems)), problems)


def _check_positive(rho, step):
    lam = ql.min_eigenvalue(rho)
    worst = float(np.min(lam))
    if worst < POSITIVITY_FLOOR:
        raise PropagationError(
            f"conditioned state lost positivity: min eigenvalue {worst:.3e}", step)


def simulate(spec: ExperimentSpec, trajectory_index: int = 0, reveal: bool = True,
             store_states: bool = True) -> TrajectoryResult:
    """Simulate one monitored trajectory with physical noise.

    Each increment is ``dY_k = sqrt(eta_k) lambda_k dt + dW_k`` with
    ``lambda_k`` from the current conditioned state; the state is then
    advanced by the same normalized step the filter uses, so re-filtering the
    record from the same initial state reproduces the true states exactly.
    Intervention outcomes are sampled from the Born weights ``tr Phi_m``.
    With ``reveal=False`` the outcomes are kept out of the record's log.
    """
    _ensure_valid(spec)
    spec = spec.snapped()
    model, dt, n = spec.model, spec.dt, spec.n_steps
    noise, uniforms = _draws(spec, trajectory_index)
    plan = dict(zip(spec.intervention_steps(), zip(spec.interventions, uniforms)))
    rho = np.array(spec.initial_state, dtype=complex)
    increments = np.empty((model.n_channels, n))
    states = [rho] if store_states else None
    outcomes = []
    for i in range(n):
        if i in plan:
            iv, u = plan[i]
            label = _sample_label(iv, rho, u)
            rho, _ = _apply_intervention(iv, rho, label, i * dt)
            outcomes.append((i * dt, label))
        dY = mean_signal(model, rho) * dt + noise[:, i]
        increments[:, i] = dY
        rho, _ = _normalized_step(model, rho, dY, dt)
        if not np.all(np.isfinite(rho)):
            raise PropagationError("non-finite conditioned state", i)
        _check_positive(rho, i)
        if store_states:
            states.append(rho)
    record = MeasurementRecord(dt, increments, outcomes if reveal else [])
    true_states = np.array(states) if store_states else rho[None]
    times = spec.times if store_states else np.array([spec.T])
    return TrajectoryResult(record, true_states, outcomes, times)


def simulate_ensemble(spec: ExperimentSpec, n_trajectories: int, reveal: bool = True,
                      store_every: Optional[int] = None, start_index: int = 0):
    """Simulate trajectories ``start_index .. start_index + n - 1`` in one vectorized pass.

    Trajectory ``j`` draws from ``derive_rng(spec.seed, j)`` exactly as
    :func:`simulate` does, so results agree with the sequential simulator to
    rounding. ``true_states`` holds the states every ``store_every`` steps
    (default: initial and final only).
    """
    _ensure_valid(spec)
    spec = spec.snapped()
    model, dt, n = spec.model, spec.dt, spec.n_steps
    idx = range(start_index, start_index + n_trajectories)
    draws = [_draws(spec, j) for j in idx]
    noise = np.stack([d[0] for d in draws])  # (B, k, n)
    uniforms = np.stack([d[1] for d in draws])  # (B, r)
    B = n_trajectories
    rho = np.broadcast_to(np.array(spec.initial_state, dtype=complex),
                          (B, model.dim, model.dim)).copy()
    increments = np.empty((B, model.n_channels, n))
    plan = {s: k for k, s in enumerate(spec.intervention_steps())}
    outcomes = [[] for _ in range(B)]
    every = n if store_every is None else int(store_every)
    times, stored = [0.0], [rho.copy()]
    for i in range(n):
        if i in plan:
            k = plan[i]
            iv = spec.interventions[k]
            for b in range(B):
                label = _sample_label(iv, rho[b], uniforms[b, k])
                rho[b], _ = _apply_intervention(iv, rho[b], label, i * dt)
                outcomes[b].append((i * dt, label))
        dY = mean_signal(model, rho) * dt + noise[:, :, i]
        increments[:, :, i] = dY
        rho, _ = _normalized_step(model, rho, dY, dt)
        if not np.all(np.isfinite(rho)):
            raise PropagationError("non-finite conditioned state", i)
        _check_positive(rho, i)
        if (i + 1) % every == 0 or i + 1 == n:
            times.append((i + 1) * dt)
            stored.append(rho.copy())
    stored = np.array(stored)  # (n_samples, B, d, d)
    times = np.array(times)
    return [TrajectoryResult(MeasurementRecord(dt, increments[b], outcomes[b] if reveal else []),
                             stored[:, b], outcomes[b], times)
            for b in range(B)]
