"""Backward effect propagation and retrodiction of concealed intervention outcomes.

Everything here runs on a :class:`KrausSteps` sequence: one record-dependent
Kraus operator per grid step plus optional fixed Kraus operators (the
undetected part of inefficient channels). Continuous records produce
``M_i = exp(K dt) + sum_k sqrt(eta_k) L_k dY_k(t_i)``; the discrete collision
model in :mod:`qretrodict.oracle` produces its exact ancilla-conditioned
operators, so the same code is checked against exact Bayesian inference.

Grid convention: step ``i`` consumes the increment over ``[t_i, t_{i+1})``.
An intervention snapped to grid index ``s`` acts on the state at ``t_s``,
after steps ``0..s-1`` and before step ``s``.
"""

import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import qlinalg as ql
from .errors import GridError, PropagationError, ZeroNormalizer
from .filtering import LOG_SCALE_RANGE, step_operators, unobserved_kraus
from .model import (ExperimentSpec, InterventionSpec, OpenSystemModel, cp_map,
                    cp_map_adjoint, outcome_probabilities)

#: Retrodiction denominators at or below this mean the record is impossible.
MIN_NORMALIZER = 1e-300


@dataclass(frozen=True, eq=False)
class KrausSteps:
    """Per-step CP maps ``X -> M_i X M_i^+ + sum_j A_j X A_j^+``."""

    observed: np.ndarray
    fixed: Tuple[np.ndarray, ...] = ()

    @classmethod
    def from_record(cls, record, model: OpenSystemModel) -> "KrausSteps":
        inc = np.asarray(record.increments, dtype=float)
        if inc.shape[0] != model.n_channels:
            raise ValueError(f"record has {inc.shape[0]} channels, model has {model.n_channels}")
        return cls(step_operators(model, inc.T, record.dt),
                   tuple(unobserved_kraus(model, record.dt)))

    def __len__(self):
        return self.observed.shape[0]

    @property
    def dim(self) -> int:
        return self.observed.shape[-1]

    def forward(self, rho, i):
        M = self.observed[i]
        out = M @ rho @ M.conj().T
        for A in self.fixed:
            out = out + A @ rho @ A.conj().T
        return out

    def adjoint(self, E, i):
        M = self.observed[i]
        out = M.conj().T @ E @ M
        for A in self.fixed:
            out = out + A.conj().T @ E @ A
        return out

    def lifted(self, extra_dim: int) -> "KrausSteps":
        """Same maps acting on ``system (x) C^extra_dim``."""
        if extra_dim == 1:
            return self
        eye = np.eye(extra_dim, dtype=complex)
        n, d = self.observed.shape[0], self.dim
        obs = np.einsum("nij,ab->niajb", self.observed, eye).reshape(
            n, d * extra_dim, d * extra_dim)
        return KrausSteps(obs, tuple(np.kron(A, eye) for A in self.fixed))


def _grid_index(t, dt, n):
    k = t / dt
    j = int(round(k))
    if abs(k - j) > 1e-9 * max(1.0, abs(k)) or not 0 <= j <= n:
        raise GridError(f"time {t} is not a grid point of dt={dt} within [0, {n * dt}]")
    return j


def _rescale(X, log_scale):
    """Pull the trace out of ``X`` once it leaves the safe range."""
    tr = float(np.max(np.abs(ql.trace(X).real)))
    if tr > 0 and abs(np.log(tr)) > LOG_SCALE_RANGE:
        return X / tr, log_scale + np.log(tr)
    return X, log_scale


def backward_effect_step(E, dY, model: OpenSystemModel, dt: float):
    """One backward step ``E(T, t - dt)`` from ``E(T, t)`` and the increment ending at ``t``.

    ``E -> M^+ E M + sum_k (1 - eta_k) dt L_k^+ E L_k``: the exact adjoint of
    the linear filter step, and to first order
    ``E + L(E) dt + sum_k sqrt(eta_k) (E L_k + L_k^+ E) dY_k``.
    """
    M = step_operators(model, dY, dt)
    out = ql.dag(M) @ E @ M
    for A in unobserved_kraus(model, dt):
        out = out + A.conj().T @ E @ A
    if not np.all(np.isfinite(out)):
        raise PropagationError("non-finite effect operator")
    return out


def forward_propagator(record, model: OpenSystemModel, t1: float, t2: float):
    """Ordered product ``F^Y(t2, t1) = M_{j2-1} ... M_{j1}`` on the record's grid."""
    n = record.n_steps
    j1, j2 = _grid_index(t1, record.dt, n), _grid_index(t2, record.dt, n)
    if j1 > j2:
        raise GridError(f"forward_propagator needs t1 <= t2, got {t1} > {t2}")
    F = np.eye(model.dim, dtype=complex)
    if j2 > j1:
        inc = np.asarray(record.increments, dtype=float)[:, j1:j2]
        for M in step_operators(model, inc.T, record.dt):
            F = M @ F
    return F


@dataclass(frozen=True, eq=False)
class EffectTrajectory:
    """Backward effects ``E^Y(T, t_i) = exp(log_scales[i]) * scaled[i]`` at every grid time.

    At an intervention grid point the stored effect already includes the
    intervention's (adjoint) map, i.e. it pairs with the forward state taken
    just before the intervention.
    """

    times: np.ndarray
    scaled: np.ndarray
    log_scales: np.ndarray

    @property
    def T(self):
        return self.times[-1]

    @property
    def effects(self):
        return self.scaled * np.exp(self.log_scales)[:, None, None]


def _labels_by_step(spec, revealed):
    steps = spec.intervention_steps()
    if revealed is None:
        labels = [None] * len(steps)
    elif isinstance(revealed, dict):
        labels = [revealed.get(k) for k in range(len(steps))]
    else:
        labels = list(revealed)
    return {s: (iv, lab) for s, iv, lab in zip(steps, spec.interventions, labels)}


def effect_trajectory(record, spec: ExperimentSpec, revealed_outcomes=None,
                      steps: Optional[KrausSteps] = None) -> EffectTrajectory:
    """Propagate ``E^Y(T, t)`` from ``I`` at ``T`` back to ``t = 0``.

    Interventions after ``t`` enter through ``Phi_m^+`` for a revealed label,
    or ``sum_m Phi_m^+`` when the outcome is concealed.
    """
    steps = KrausSteps.from_record(record, spec.model) if steps is None else steps
    plan = _labels_by_step(spec, revealed_outcomes)
    n = len(steps)
    d = steps.dim
    scaled = np.empty((n + 1, d, d), dtype=complex)
    logs = np.zeros(n + 1)
    E, ls = np.eye(d, dtype=complex), 0.0
    scaled[n] = E
    for i in range(n - 1, -1, -1):
        E = ql.hermitian_part(steps.adjoint(E, i))
        if i in plan:
            iv, lab = plan[i]
            E = ql.hermitian_part(cp_map_adjoint(iv, E, lab))
        if not np.all(np.isfinite(E)):
            raise PropagationError("non-finite effect operator", i)
        E, ls = _rescale(E, ls)
        scaled[i], logs[i] = E, ls
    return EffectTrajectory(record.dt * np.arange(n + 1), scaled, logs)


@dataclass(frozen=True, eq=False)
class PastStatePair:
    """Forward unnormalized state and backward effect at time ``t``.

    ``rho = exp(rho_log_scale) * rho_scaled`` and likewise for the effect.
    """

    t: float
    rho_scaled: np.ndarray
    rho_log_scale: float
    effect_scaled: np.ndarray
    effect_log_scale: float

    @property
    def rho(self):
        return self.rho_scaled * np.exp(self.rho_log_scale)

    @property
    def effect(self):
        return self.effect_scaled * np.exp(self.effect_log_scale)

    @property
    def log_overlap(self):
        """``log tr{rho_t E^Y(T, t)}``: the record log-likelihood, constant in ``t``."""
        return (np.log(np.trace(self.rho_scaled @ self.effect_scaled).real)
                + self.rho_log_scale + self.effect_log_scale)


def _forward_unnormalized(steps, rho0, plan, stop):
    """Linear filter states at grid indices ``0..stop`` (pre-intervention at each index)."""
    rho, ls = np.array(rho0, dtype=complex), 0.0
    out = [(rho, ls)]
    for i in range(stop):
        if i in plan:
            iv, lab = plan[i]
            rho = cp_map(iv, rho, lab)
        rho = ql.hermitian_part(steps.forward(rho, i))
        if not np.all(np.isfinite(rho)):
            raise PropagationError("non-finite filter state", i)
        rho, ls = _rescale(rho, ls)
        out.append((rho, ls))
    return out


def past_state_series(record, spec: ExperimentSpec, revealed_outcomes=None,
                      sample_every: int = 1) -> List[PastStatePair]:
    """:class:`PastStatePair` at every ``sample_every``-th grid time (and ``T``).

    Interventions enter both passes through their revealed label, or the
    non-selective map when concealed, so ``tr{rho_t E_t}`` is the same record
    likelihood at every sampled time.
    """
    steps = KrausSteps.from_record(record, spec.model)
    plan = _labels_by_step(spec, revealed_outcomes)
    n = len(steps)
    fwd = _forward_unnormalized(steps, spec.initial_state, plan, n)
    bwd = effect_trajectory(record, spec, revealed_outcomes, steps)
    idx = sorted(set(range(0, n + 1, max(1, int(sample_every)))) | {n})
    return [PastStatePair(i * record.dt, fwd[i][0], fwd[i][1],
                          bwd.scaled[i], bwd.log_scales[i]) for i in idx]


def past_state_pair(record, spec: ExperimentSpec, t: float,
                    revealed_outcomes=None) -> PastStatePair:
    """The pair ``(rho_t, E^Y(T, t))`` on one record."""
    steps = KrausSteps.from_record(record, spec.model)
    n = len(steps)
    j = _grid_index(t, record.dt, n)
    plan = _labels_by_step(spec, revealed_outcomes)
    rho, rls = _forward_unnormalized(steps, spec.initial_state, plan, j)[-1]
    bwd = effect_trajectory(record, spec, revealed_outcomes, steps)
    return PastStatePair(j * record.dt, rho, rls, bwd.scaled[j], bwd.log_scales[j])


@dataclass(frozen=True, eq=False)
class RetrodictionResult:
    """Probabilities of concealed outcome tuples given the whole record.

    ``normalizer`` is the common denominator evaluated with the trace-rescaled
    forward state and effect; ``log_normalizer`` restores the removed scale
    factors and equals the log-likelihood of the record under the model.
    ``filtered`` (single intervention only) holds the Born weights predicted
    from the record up to ``tau`` alone.
    """

    taus: List[float]
    labels: List[Tuple[str, ...]]
    probabilities: np.ndarray
    normalizer: float
    log_normalizer: float
    filtered: Optional[np.ndarray] = None

    def probability(self, *labels) -> float:
        return float(self.probabilities[self.labels.index(tuple(str(m) for m in labels))])

    def as_dict(self) -> Dict[Tuple[str, ...], float]:
        return dict(zip(self.labels, map(float, self.probabilities)))

    def marginal(self, k: int) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for lab, p in zip(self.labels, self.probabilities):
            out[lab[k]] = out.get(lab[k], 0.0) + float(p)
        return out


def _finish(taus, labels, weights, log_extra, filtered=None):
    weights = np.asarray(weights, dtype=float)
    norm = float(np.sum(weights))
    if not norm > MIN_NORMALIZER:
        raise ZeroNormalizer(
            f"retrodiction denominator {norm:.3e}: record is impossible under the model")
    probs = np.clip(weights, 0.0, None)
    probs = probs / probs.sum()
    return RetrodictionResult(list(taus), labels, probs, norm,
                              float(np.log(norm) + log_extra), filtered)


def _forward_normalized(steps, rho0, stop):
    rho, ll = np.array(rho0, dtype=complex), 0.0
    for i in range(stop):
        rho = steps.forward(rho, i)
        tr = np.trace(rho).real
        if not (tr > 0 and np.isfinite(tr)):
            raise PropagationError("filter trace vanished", i)
        rho = ql.hermitian_part(rho / tr)
        ll += np.log(tr)
    return rho, ll


def retrodict_steps_single(steps: KrausSteps, rho0, iv: InterventionSpec, step: int,
                           tau: Optional[float] = None) -> RetrodictionResult:
    """Single concealed intervention at grid index ``step`` on a generic step sequence.

    ``p(m) ~ tr{ (rho(tau-) (x) rho_probe) V^+ (E(T, tau+) (x) P_m) V }`` with
    ``rho(tau-)`` the filter state without the probe and ``E`` propagated
    back from ``I`` at the final time.
    """
    n = len(steps)
    if not 0 <= step <= n:
        raise GridError(f"intervention step {step} outside [0, {n}]")
    rho, ll_f = _forward_normalized(steps, rho0, step)
    E, ls = np.eye(steps.dim, dtype=complex), 0.0
    for i in range(n - 1, step - 1, -1):
        E = steps.adjoint(E, i)
        tr = np.trace(E).real
        if not (tr > 0 and np.isfinite(tr)):
            raise PropagationError("effect trace vanished", i)
        E = E / tr
        ls += np.log(tr)
    E = ql.hermitian_part(E)
    V = iv.coupling
    joint = np.kron(rho, iv.probe_state)
    weights = [np.trace(joint @ V.conj().T @ np.kron(E, P) @ V).real
               for P in iv.outcomes.values()]
    filtered = np.array([outcome_probabilities(iv, rho)[m] for m in iv.labels])
    return _finish([tau if tau is not None else float("nan")],
                   [(m,) for m in iv.labels], weights, ll_f + ls, filtered)


def retrodict_steps_multi(steps: KrausSteps, rho0,
                          interventions: Sequence[Tuple[int, InterventionSpec]],
                          taus: Optional[Sequence[float]] = None) -> RetrodictionResult:
    """Joint retrodiction of ``r >= 1`` concealed interventions with fresh probes.

    Evaluates the nested segment maps
    ``G_k[A] = V_k^+ (F_k^+ (x) I) A (F_k (x) I) V_k`` on
    ``system (x) probe_1 (x) ... (x) probe_r`` backward from the final time,
    inserting ``P_{m_k}`` on the k-th probe factor at each intervention. All
    outcome tuples sharing a suffix share its backward pass.
    """
    ivs = sorted(((int(s), iv) for s, iv in interventions), key=lambda x: x[0])
    if not ivs:
        raise ValueError("retrodict_steps_multi needs at least one intervention")
    s_list = [s for s, _ in ivs]
    if any(b <= a for a, b in zip(s_list, s_list[1:])):
        raise ValueError(f"intervention steps must be strictly increasing: {s_list}")
    n = len(steps)
    if s_list[0] < 0 or s_list[-1] > n:
        raise GridError(f"intervention steps {s_list} outside [0, {n}]")
    d = steps.dim
    probe_dims = [iv.probe_dim for _, iv in ivs]
    dims = (d,) + tuple(probe_dims)
    P_tot = int(np.prod(probe_dims))
    lifted = steps.lifted(P_tot)
    Vs = [ql.embed_operator(iv.coupling, dims, (0, k + 1)) for k, (_, iv) in enumerate(ivs)]
    projs = [[(m, ql.embed_operator(P, dims, (k + 1,))) for m, P in iv.outcomes.items()]
             for k, (_, iv) in enumerate(ivs)]

    suffixes: List[Tuple[str, ...]] = [()]
    A = np.eye(d * P_tot, dtype=complex)[None]
    log_common = 0.0
    upper = n
    for k in range(len(ivs) - 1, -1, -1):
        for i in range(upper - 1, s_list[k] - 1, -1):
            A = lifted.adjoint(A, i)
            A, log_common = _rescale_branches(A, log_common, i)
        V = Vs[k]
        branches, labels = [], []
        for suffix, Ab in zip(suffixes, A):
            for m, P in projs[k]:
                branches.append(V.conj().T @ (Ab @ P) @ V)
                labels.append((m,) + suffix)
        A = ql.hermitian_part(np.array(branches))
        suffixes = labels
        upper = s_list[k]
    rho, ll_f = _forward_normalized(steps, rho0, s_list[0])
    state = ql.tensor_product(rho, *[iv.probe_state for _, iv in ivs])
    weights = np.einsum("ij,bji->b", state, A).real
    order = sorted(range(len(suffixes)), key=lambda j: _label_order(suffixes[j], ivs))
    taus = [float("nan")] * len(ivs) if taus is None else list(taus)
    return _finish(taus, [suffixes[j] for j in order], weights[order], ll_f + log_common)


def _label_order(labels, ivs):
    return tuple(iv.labels.index(m) for m, (_, iv) in zip(labels, ivs))


def _rescale_branches(A, log_common, step):
    tr = float(np.max(np.abs(ql.trace(A).real)))
    if not np.isfinite(tr):
        raise PropagationError("non-finite effect operator", step)
    if tr > 0 and abs(np.log(tr)) > LOG_SCALE_RANGE:
        return A / tr, log_common + np.log(tr)
    return A, log_common


def retrodict_single(record, spec: ExperimentSpec, initial_state=None) -> RetrodictionResult:
    """Probabilities of the single concealed intervention outcome given the full record."""
    if len(spec.interventions) != 1:
        raise ValueError(f"retrodict_single needs exactly one intervention, "
                         f"spec has {len(spec.interventions)}; use retrodict_multi")
    steps = KrausSteps.from_record(record, spec.model)
    s = spec.intervention_steps()[0]
    rho0 = spec.initial_state if initial_state is None else initial_state
    return retrodict_steps_single(steps, rho0, spec.interventions[0], s, s * record.dt)


def retrodict_multi(record, spec: ExperimentSpec, initial_state=None) -> RetrodictionResult:
    """Joint probabilities of all concealed intervention outcomes given the full record."""
    steps = KrausSteps.from_record(record, spec.model)
    idx = spec.intervention_steps()
    rho0 = spec.initial_state if initial_state is None else initial_state
    return retrodict_steps_multi(steps, rho0, list(zip(idx, spec.interventions)),
                                 [s * record.dt for s in idx])


def retrodict(record, spec: ExperimentSpec, initial_state=None) -> RetrodictionResult:
    """Dispatch to the single- or multi-intervention routine."""
    if len(spec.interventions) == 1:
        return retrodict_single(record, spec, initial_state)
    return retrodict_multi(record, spec, initial_state)


def all_outcome_tuples(spec: ExperimentSpec):
    return list(itertools.product(*[iv.labels for iv in spec.interventions]))
