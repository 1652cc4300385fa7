"""Forward quantum filters driven by a diffusive measurement record.

Both the linear (Belavkin-Zakai) and the normalized filter use the same
Kraus-form step

    rho -> M rho M^+ + sum_k (1 - eta_k) dt L_k rho L_k^+,
    M = exp(K dt) + sum_k sqrt(eta_k) L_k dY_k,

which agrees with the Euler-Maruyama step of the stochastic master equation
up to the Ito rule ``dY_k dY_j = delta_kj dt``, keeps states positive, and
makes the normalized filter literally equal to the normalized linear filter.
All kernels broadcast over leading batch axes: ``rho`` may be ``(d, d)`` or
``(B, d, d)`` with ``dY`` of shape ``(n_channels,)`` or ``(B, n_channels)``.
"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np

from . import qlinalg as ql
from .errors import DimensionError, PropagationError, ZeroProbabilityOutcome
from .model import EPS_PROB, ExperimentSpec, OpenSystemModel, cp_map

#: Unnormalized states are rescaled once ``|log tr rho|`` exceeds this.
LOG_SCALE_RANGE = 30.0


@dataclass(frozen=True, eq=False)
class FilterState:
    """Filter state at time ``t``.

    ``log_scale`` accumulates the log of every trace factor removed from
    ``rho``; in normalized mode it is the running record log-likelihood
    (relative to a Wiener reference measure).
    """

    rho: np.ndarray
    log_scale: float = 0.0
    t: float = 0.0
    normalized: bool = True

    @property
    def unnormalized_trace_log(self):
        return np.log(ql.trace(self.rho).real) + self.log_scale


def dissipator(model: OpenSystemModel, rho):
    """``D(rho) = sum_k L rho L^+ - 1/2 {L^+ L, rho}`` (traceless, Hermiticity preserving)."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape[-2:] != (model.dim, model.dim):
        raise DimensionError(f"state shape {rho.shape} vs model dimension {model.dim}")
    out = np.zeros_like(rho)
    for L in model.couplings:
        LdL = L.conj().T @ L
        out = out + L @ rho @ L.conj().T - 0.5 * (LdL @ rho + rho @ LdL)
    return out


def lindblad_rhs(model: OpenSystemModel, rho):
    """Unconditional generator ``-i[H, rho] + D(rho)``."""
    H = model.hamiltonian
    return -1j * (H @ rho - rho @ H) + dissipator(model, rho)


def mean_signal(model: OpenSystemModel, rho):
    """Expected record drift ``sqrt(eta_k) tr{rho (L_k + L_k^+)}``, shape ``(..., n_channels)``."""
    L = model.coupling_stack
    lam = np.einsum("...ij,kji->...k", rho, L + ql.dag(L)).real
    return model.sqrt_eta * lam


def step_operators(model: OpenSystemModel, dY, dt):
    """Record-dependent Kraus operator ``M`` for each increment vector in ``dY``."""
    dY = np.asarray(dY, dtype=float)
    if dY.shape[-1:] != (model.n_channels,):
        raise DimensionError(
            f"increments shape {dY.shape} does not end in {model.n_channels} channels")
    M0 = model.drift_propagator(dt)
    w = dY * model.sqrt_eta
    return M0 + np.einsum("...k,kij->...ij", w, model.coupling_stack)


def unobserved_kraus(model: OpenSystemModel, dt) -> List[np.ndarray]:
    """Fixed Kraus operators carrying the undetected fraction of each channel."""
    return [np.sqrt((1.0 - eta) * dt) * L
            for L, eta in zip(model.couplings, model.efficiencies) if eta < 1.0]


def zakai_map(model: OpenSystemModel, rho, dY, dt):
    """One linear step on raw arrays (no rescaling)."""
    M = step_operators(model, dY, dt)
    out = M @ rho @ ql.dag(M)
    for A in unobserved_kraus(model, dt):
        out = out + A @ rho @ A.conj().T
    return out


def _check_finite(rho, step=None):
    if not np.all(np.isfinite(rho)):
        raise PropagationError("non-finite filter state", step)


def zakai_step(state: FilterState, dY, model: OpenSystemModel, dt: float) -> FilterState:
    """Belavkin-Zakai step; linear in ``rho`` apart from log-scale rebalancing."""
    rho = zakai_map(model, state.rho, dY, dt)
    _check_finite(rho)
    log_scale = state.log_scale
    tr = ql.trace(rho).real
    ltr = np.log(np.abs(tr))
    out_of_range = np.abs(ltr) > LOG_SCALE_RANGE
    if np.any(out_of_range):
        shift = np.where(out_of_range, ltr, 0.0)
        rho = rho * np.exp(-shift)[..., None, None]
        log_scale = log_scale + shift
    return FilterState(rho, log_scale, state.t + dt, normalized=False)


def _normalized_step(model, rho, dY, dt):
    rho = zakai_map(model, rho, dY, dt)
    tr = ql.trace(rho).real
    rho = ql.hermitian_part(rho / tr[..., None, None])
    return rho, np.log(tr)


def filter_step(state: FilterState, dY, model: OpenSystemModel, dt: float) -> FilterState:
    """Normalized filter step: linear step, divide by the trace, symmetrize."""
    if not state.normalized:
        raise ValueError("filter_step needs a normalized FilterState")
    rho, ltr = _normalized_step(model, state.rho, dY, dt)
    _check_finite(rho)
    return FilterState(rho, state.log_scale + ltr, state.t + dt, normalized=True)


def normalize(state: FilterState) -> FilterState:
    tr = ql.trace(state.rho).real
    return FilterState(state.rho / tr[..., None, None], state.log_scale + np.log(tr),
                       state.t, normalized=True)


@dataclass(frozen=True, eq=False)
class FilterTrajectory:
    """Filtered states on the sampled grid times."""

    times: np.ndarray
    states: np.ndarray
    log_likelihood: np.ndarray

    @property
    def final(self):
        return self.states[-1]

    def expectations(self, observables: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        return {name: expectation(self.states, O) for name, O in observables.items()}


def expectation(states, observable):
    return np.einsum("...ij,ji->...", states, np.asarray(observable, dtype=complex)).real


def _revealed_by_step(spec, record, revealed):
    """Map grid index -> (intervention, label or None) for every intervention."""
    steps = spec.intervention_steps()
    if revealed is None:
        logged = {int(round(tau / spec.dt)): lab for tau, lab in
                  (record.intervention_log if record is not None else [])}
        labels = [logged.get(s) for s in steps]
    elif isinstance(revealed, Mapping):
        labels = [revealed.get(k) for k in range(len(steps))]
    else:
        labels = list(revealed)
        if len(labels) != len(steps):
            raise ValueError(f"{len(labels)} revealed outcomes for {len(steps)} interventions")
    return {s: (iv, lab) for s, iv, lab in zip(steps, spec.interventions, labels)}


def _apply_intervention(iv, rho, label, t):
    """Condition ``rho`` (normalized) on ``label``; ``None`` means concealed."""
    out = cp_map(iv, rho, label)
    p = float(np.trace(out).real)
    if label is not None and not p > EPS_PROB:
        raise ZeroProbabilityOutcome(label, p, t)
    return ql.hermitian_part(out / p), np.log(p)


def run_filter(record, spec: ExperimentSpec, revealed_outcomes=None,
               initial_state=None, sample_every: int = 1) -> FilterTrajectory:
    """Propagate the normalized filter over a whole record.

    At every intervention grid point the state is replaced by its
    conditioned update for the revealed label, or by the non-selective
    average ``sum_m Phi_m`` when the outcome is not revealed. The update
    happens at ``tau`` before the increment starting at ``tau`` is consumed.

    ``revealed_outcomes`` is ``None`` (take labels from
    ``record.intervention_log``), a sequence aligned with
    ``spec.interventions``, or a mapping from intervention index to label.
    """
    increments = np.asarray(record.increments, dtype=float)
    rho0 = spec.initial_state if initial_state is None else np.asarray(initial_state, complex)
    rho0 = np.array(rho0, dtype=complex)
    plan = _revealed_by_step(spec, record, revealed_outcomes)
    times, states, loglik = _propagate(spec.model, rho0, increments.T, record.dt,
                                       plan, sample_every)
    return FilterTrajectory(times, states, loglik)


def run_filter_ensemble(records, spec: ExperimentSpec, revealed_outcomes=None,
                        initial_state=None, sample_every: Optional[int] = None):
    """Vectorized :func:`run_filter` over records sharing a grid.

    ``revealed_outcomes`` is ``None`` or one per-record entry as accepted by
    :func:`run_filter`. Returns a :class:`FilterTrajectory` whose arrays carry
    the record index as the second axis of ``states``. Default sampling keeps
    only the initial and final states.
    """
    records = list(records)
    inc = np.stack([np.asarray(r.increments, dtype=float) for r in records])  # (B, k, n)
    n = inc.shape[-1]
    B = len(records)
    rho0 = spec.initial_state if initial_state is None else initial_state
    rho = np.broadcast_to(np.asarray(rho0, dtype=complex), (B,) + np.shape(rho0)).copy()
    revealed = [None] * B if revealed_outcomes is None else list(revealed_outcomes)
    plans = [_revealed_by_step(spec, r, rv) for r, rv in zip(records, revealed)]
    every = n if sample_every is None else sample_every
    dt = records[0].dt
    model = spec.model
    loglik = np.zeros(B)
    times, out = [0.0], [rho.copy()]
    for i in range(n):
        if i in plans[0]:
            for b in range(B):
                iv, lab = plans[b][i]
                rho[b], lp = _apply_intervention(iv, rho[b], lab, i * dt)
                loglik[b] += lp
        rho, ltr = _normalized_step(model, rho, inc[:, :, i], dt)
        loglik += ltr
        if (i + 1) % every == 0 or i + 1 == n:
            _check_finite(rho, i)
            times.append((i + 1) * dt)
            out.append(rho.copy())
    return FilterTrajectory(np.array(times), np.array(out), loglik)


def _propagate(model, rho, increments, dt, plan, sample_every):
    """Sequential single-record loop shared by :func:`run_filter`."""
    n = increments.shape[0]
    loglik = 0.0
    times, out = [0.0], [rho.copy()]
    for i in range(n):
        if i in plan:
            iv, lab = plan[i]
            rho, lp = _apply_intervention(iv, rho, lab, i * dt)
            loglik += lp
        rho, ltr = _normalized_step(model, rho, increments[i], dt)
        loglik += ltr
        if not np.isfinite(ltr):
            raise PropagationError("non-finite filter state", i)
        if (i + 1) % sample_every == 0 or i + 1 == n:
            times.append((i + 1) * dt)
            out.append(rho)
    return np.array(times), np.array(out), np.array(loglik)


def run_zakai(record, spec: ExperimentSpec, initial_state=None):
    """Unnormalized filter over the whole record (no interventions).

    Returns the list of :class:`FilterState` at every grid time.
    """
    if spec.interventions:
        raise ValueError("run_zakai handles records without interventions; "
                         "use smoother.past_state_pair for the general case")
    rho0 = spec.initial_state if initial_state is None else initial_state
    state = FilterState(np.array(rho0, dtype=complex), 0.0, 0.0, normalized=False)
    states = [state]
    for dY in np.asarray(record.increments, dtype=float).T:
        state = zakai_step(state, dY, spec.model, record.dt)
        states.append(state)
    return states


def expectation_table(trajectory: FilterTrajectory, observables: Mapping[str, np.ndarray]):
    """Rows ``(t, <O_1>, ..., <O_n>)`` for CSV export."""
    cols = [expectation(trajectory.states, O) for O in observables.values()]
    return np.column_stack([trajectory.times] + cols)


__all__ = [
    "FilterState", "FilterTrajectory", "dissipator", "lindblad_rhs", "mean_signal",
    "step_operators", "unobserved_kraus", "zakai_map", "zakai_step", "filter_step",
    "normalize", "run_filter", "run_filter_ensemble", "run_zakai", "expectation",
    "expectation_table",
]
