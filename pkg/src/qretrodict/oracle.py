"""Exact ground truth from a discrete repeated-interaction (collision) model.

Each time step the system meets fresh qubit ancillas (one per channel, all in
``|0>``) through

    U_step = exp( sqrt(dt) sum_k (L_k (x) s+_k - L_k^+ (x) s-_k) - i H dt ),

after which every ancilla is read out in the quadrature basis
``|+-> = (|0> +- |1>)/sqrt(2)`` (outcome ``+1`` / ``-1``, the discrete
surrogate of ``dY = +-sqrt(dt)``). Interventions couple fresh probes through
their unitary ``V``. The global state lives on

    system (x) ancilla(step 0, ch 0) (x) ... (x) ancilla(step n-1, ch c-1) (x) probes

and all conditioning is done there by projecting commuting observables, so
conditional probabilities are exact Bayes.
"""

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm

from . import qlinalg as ql
from .errors import DimensionError, ZeroProbabilityRecord
from .model import InterventionSpec, cp_map
from .smoother import KrausSteps
from .trajectory import MeasurementRecord

#: Largest global Hilbert-space dimension the oracle will build.
MAX_GLOBAL_DIM = 2 ** 14

_PLUS = np.array([1.0, 1.0], dtype=complex) / np.sqrt(2)
_MINUS = np.array([1.0, -1.0], dtype=complex) / np.sqrt(2)
_QUADRATURE = ql.SIGMA_X  # +1 on |+>, -1 on |->


@dataclass(frozen=True, eq=False)
class DiscreteModel:
    hamiltonian: np.ndarray
    couplings: Tuple[np.ndarray, ...]
    dt: float
    n_steps: int
    initial_state: np.ndarray
    interventions: Tuple[Tuple[int, InterventionSpec], ...] = ()
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "hamiltonian", np.array(self.hamiltonian, dtype=complex))
        object.__setattr__(self, "couplings",
                           tuple(np.array(L, dtype=complex) for L in self.couplings))
        object.__setattr__(self, "initial_state", np.array(self.initial_state, dtype=complex))
        ivs = tuple(sorted(((int(s), iv) for s, iv in self.interventions),
                           key=lambda x: x[0]))
        steps = [s for s, _ in ivs]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"intervention steps must be strictly increasing: {steps}")
        if steps and not (0 <= steps[0] and steps[-1] <= self.n_steps):
            raise ValueError(f"intervention steps {steps} outside [0, {self.n_steps}]")
        object.__setattr__(self, "interventions", ivs)

    @property
    def dim(self) -> int:
        return self.hamiltonian.shape[0]

    @property
    def n_channels(self) -> int:
        return len(self.couplings)

    @property
    def probe_dims(self) -> Tuple[int, ...]:
        return tuple(iv.probe_dim for _, iv in self.interventions)

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.dim,) + (2,) * (self.n_steps * self.n_channels) + self.probe_dims

    @property
    def global_dim(self) -> int:
        return int(np.prod(self.dims))

    def ancilla_factor(self, step: int, channel: int = 0) -> int:
        return 1 + step * self.n_channels + channel

    def probe_factor(self, k: int) -> int:
        return 1 + self.n_steps * self.n_channels + k

    @property
    def step_unitary(self) -> np.ndarray:
        """``U_step`` on ``system (x) ancilla_0 (x) ... (x) ancilla_{c-1}``."""
        if "U" not in self._cache:
            c = self.n_channels
            dims = (self.dim,) + (2,) * c
            G = -1j * self.dt * ql.embed_operator(self.hamiltonian, dims, (0,))
            for k, L in enumerate(self.couplings):
                up = ql.embed_operator(np.kron(L, ql.SIGMA_PLUS), dims, (0, k + 1))
                down = ql.embed_operator(np.kron(L.conj().T, ql.SIGMA_MINUS), dims, (0, k + 1))
                G = G + np.sqrt(self.dt) * (up - down)
            self._cache["U"] = expm(G)
        return self._cache["U"]

    def kraus(self, outcomes: Sequence[int]) -> np.ndarray:
        """``K_y = <y_0 ... y_{c-1}| U_step |0 ... 0>`` as a system operator."""
        key = ("K", tuple(int(y) for y in outcomes))
        if key not in self._cache:
            c = self.n_channels
            if len(key[1]) != c:
                raise DimensionError(f"need {c} outcomes per step, got {len(key[1])}")
            bra = ql.tensor_product(*[(_PLUS if y > 0 else _MINUS).conj()[None, :]
                                      for y in key[1]])
            zero = np.zeros((2 ** c, 1), dtype=complex)
            zero[0, 0] = 1.0
            d = self.dim
            U = self.step_unitary.reshape(d, 2 ** c, d, 2 ** c)
            self._cache[key] = np.einsum("a,iajb,b->ij", bra[0], U, zero[:, 0])
        return self._cache[key]

    def outcome_alphabet(self) -> List[Tuple[int, ...]]:
        return list(itertools.product((1, -1), repeat=self.n_channels))

    def kraus_steps(self, record: "DiscreteRecord") -> KrausSteps:
        return KrausSteps(np.array([self.kraus(y) for y in record.outcomes]))


@dataclass(frozen=True, eq=False)
class DiscreteRecord:
    """Ancilla outcomes (``n_steps x n_channels`` of +-1) and any revealed probe labels."""

    outcomes: np.ndarray
    revealed: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        y = np.array(self.outcomes, dtype=int)
        if y.ndim == 1:
            y = y[:, None]
        if y.size and not np.all(np.isin(y, (-1, 1))):
            raise ValueError("discrete outcomes must be +1 or -1")
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "revealed", {int(k): str(v) for k, v in self.revealed.items()})

    @property
    def n_steps(self) -> int:
        return self.outcomes.shape[0]

    def as_measurement_record(self, dt: float) -> MeasurementRecord:
        """Continuous-record surrogate ``dY = y sqrt(dt)``."""
        return MeasurementRecord(dt, self.outcomes.T * np.sqrt(dt))


def _check_cap(dm):
    if dm.global_dim > MAX_GLOBAL_DIM:
        raise DimensionError(
            f"global dimension {dm.global_dim} exceeds the oracle cap {MAX_GLOBAL_DIM}")


def _pure_components(rho, tol=1e-14):
    w, v = np.linalg.eigh(ql.hermitian_part(np.asarray(rho, dtype=complex)))
    keep = w > tol
    return w[keep], v[:, keep].T


def global_kets(dm: DiscreteModel, upto: Optional[int] = None):
    """Mixture ``(weights, kets)`` of the global state after ``upto`` steps.

    Interventions scheduled at ``upto`` are included.
    """
    _check_cap(dm)
    upto = dm.n_steps if upto is None else upto
    factors = [_pure_components(dm.initial_state)]
    factors += [(np.ones(1), ql.ket(0, 2)[None]) for _ in range(dm.n_steps * dm.n_channels)]
    factors += [_pure_components(iv.probe_state) for _, iv in dm.interventions]
    weights, kets = [], []
    for combo in itertools.product(*[range(len(w)) for w, _ in factors]):
        weights.append(np.prod([factors[j][0][c] for j, c in enumerate(combo)]))
        kets.append(ql.tensor_product(*[factors[j][1][c][:, None]
                                        for j, c in enumerate(combo)])[:, 0])
    kets = np.array(kets)
    plan = {s: k for k, (s, _) in enumerate(dm.interventions)}
    U = dm.step_unitary
    for i in range(upto + 1):
        if i in plan:
            k = plan[i]
            kets = ql.apply_operator(dm.interventions[k][1].coupling, kets, dm.dims,
                                     (0, dm.probe_factor(k)))
        if i < upto:
            targets = (0,) + tuple(dm.ancilla_factor(i, c) for c in range(dm.n_channels))
            kets = ql.apply_operator(U, kets, dm.dims, targets)
    return np.array(weights), kets


def build_global_state(dm: DiscreteModel) -> np.ndarray:
    """Global density matrix after all steps and interventions."""
    w, kets = global_kets(dm)
    return np.einsum("w,wi,wj->ij", w, kets, kets.conj())


def global_unitary(dm: DiscreteModel, upto: int) -> np.ndarray:
    """``U~(t_upto, 0)`` on the global space (interventions at ``upto`` included)."""
    _check_cap(dm)
    D = dm.global_dim
    eye_kets = np.eye(D, dtype=complex)
    # evolve every basis vector: columns of the unitary
    plan = {s: k for k, (s, _) in enumerate(dm.interventions)}
    kets = eye_kets
    for i in range(upto + 1):
        if i in plan:
            k = plan[i]
            kets = ql.apply_operator(dm.interventions[k][1].coupling, kets, dm.dims,
                                     (0, dm.probe_factor(k)))
        if i < upto:
            targets = (0,) + tuple(dm.ancilla_factor(i, c) for c in range(dm.n_channels))
            kets = ql.apply_operator(dm.step_unitary, kets, dm.dims, targets)
    return kets.T


def _heisenberg(U, op):
    return U.conj().T @ op @ U


def record_observable(dm: DiscreteModel, step: int, channel: int = 0) -> np.ndarray:
    """Heisenberg-picture quadrature readout of ancilla ``(step, channel)``."""
    U = global_unitary(dm, step + 1)
    op = ql.embed_operator(_QUADRATURE, dm.dims, (dm.ancilla_factor(step, channel),))
    return _heisenberg(U, op)


def probe_observable(dm: DiscreteModel, k: int) -> np.ndarray:
    """``M~(tau_k) = U~(tau_k, 0)^+ (I (x) M_k) U~(tau_k, 0)``, ``M_k = sum_j (j+1) P_j``."""
    s, iv = dm.interventions[k]
    M = sum((j + 1) * P for j, P in enumerate(iv.outcomes.values()))
    op = ql.embed_operator(M, dm.dims, (dm.probe_factor(k),))
    return _heisenberg(global_unitary(dm, s), op)


def system_observable(dm: DiscreteModel, X, step: int) -> np.ndarray:
    """``j~_t(X)`` at grid index ``step``."""
    op = ql.embed_operator(X, dm.dims, (0,))
    return _heisenberg(global_unitary(dm, step), op)


def commutation_report(dm: DiscreteModel) -> Dict[str, float]:
    """Largest Frobenius commutator norm per family of measured observables."""
    Ys = [record_observable(dm, i, c)
          for i in range(dm.n_steps) for c in range(dm.n_channels)]
    Ms = [probe_observable(dm, k) for k in range(len(dm.interventions))]

    def worst(pairs):
        return max((float(np.linalg.norm(ql.commutator(a, b))) for a, b in pairs), default=0.0)

    return {
        "record_record": worst(itertools.combinations(Ys, 2)),
        "probe_record": worst(itertools.product(Ms, Ys)),
        "probe_probe": worst(itertools.combinations(Ms, 2)),
    }


def check_commutation(dm: DiscreteModel) -> float:
    """Max ``||[A, B]||_F`` over record/record, probe/record and probe/probe pairs."""
    return max(commutation_report(dm).values())


def _project_record(dm, kets, record):
    """Contract every ancilla with its observed quadrature eigenvector.

    Returns kets on ``system (x) probes`` (not normalized) and their dims.
    """
    if record.outcomes.shape != (dm.n_steps, dm.n_channels):
        raise DimensionError(
            f"record shape {record.outcomes.shape} != ({dm.n_steps}, {dm.n_channels})")
    nb = kets.shape[0]
    t = kets.reshape((nb,) + dm.dims)
    # ancilla axes are 2 .. 1 + n*c (after the batch and system axes)
    for i in range(dm.n_steps):
        for c in range(dm.n_channels):
            vec = (_PLUS if record.outcomes[i, c] > 0 else _MINUS).conj()
            # the next ancilla is always the axis right after the system
            t = np.tensordot(t, vec, axes=([2], [0]))
    rest = (dm.dim,) + dm.probe_dims
    return t.reshape(nb, int(np.prod(rest))), rest


def _conditioned_kets(dm, record):
    w, kets = global_kets(dm)
    phi, rest = _project_record(dm, kets, record)
    for k, lab in record.revealed.items():
        P = dm.interventions[k][1].outcomes[lab]
        phi = ql.apply_operator(P, phi, rest, (1 + k,))
    return w, phi, rest


def record_probability(dm: DiscreteModel, record: DiscreteRecord) -> float:
    """Exact probability of the ancilla outcomes (and any revealed probe labels)."""
    w, phi, _ = _conditioned_kets(dm, record)
    return float(np.sum(w * np.sum(np.abs(phi) ** 2, axis=1)))


def exact_conditional(dm: DiscreteModel, record: DiscreteRecord, query=None):
    """Exact ``p(q | record) = tr{rho Pi_record Pi_q} / tr{rho Pi_record}``.

    ``query`` maps labels to projectors on ``system (x) probes`` at the final
    time. By default it is the joint outcome family of every intervention not
    revealed in ``record``, keyed by label tuples in intervention order.
    """
    w, phi, rest = _conditioned_kets(dm, record)
    denom = float(np.sum(w * np.sum(np.abs(phi) ** 2, axis=1)))
    if not denom > 0.0:
        raise ZeroProbabilityRecord("record has zero probability under the discrete model")
    if query is None:
        hidden = [k for k in range(len(dm.interventions)) if k not in record.revealed]
        query = {}
        for labels in itertools.product(*[dm.interventions[k][1].labels for k in hidden]):
            op = np.eye(int(np.prod(rest)), dtype=complex)
            for k, lab in zip(hidden, labels):
                op = op @ ql.embed_operator(dm.interventions[k][1].outcomes[lab], rest, (1 + k,))
            query[tuple(labels)] = op
    out = {}
    for lab, Pq in query.items():
        num = np.einsum("w,wi,ij,wj->", w, phi.conj(), Pq, phi).real
        out[lab] = float(num) / denom
    return out


def exact_conditional_state(dm: DiscreteModel, record: DiscreteRecord) -> np.ndarray:
    """Reduced system state given the record and revealed probe labels (others traced out)."""
    w, phi, rest = _conditioned_kets(dm, record)
    t = phi.reshape(phi.shape[0], dm.dim, -1)
    rho = np.einsum("w,wia,wja->ij", w, t, t.conj())
    tr = np.trace(rho).real
    if not tr > 0.0:
        raise ZeroProbabilityRecord("record has zero probability under the discrete model")
    return rho / tr


def kraus_filter(dm: DiscreteModel, record: DiscreteRecord) -> np.ndarray:
    """Sequential Kraus conditioning ``rho -> K_y rho K_y^+ / tr``.

    Revealed interventions apply ``Phi_m``; concealed ones the
    non-selective map.
    """
    if record.outcomes.shape != (dm.n_steps, dm.n_channels):
        raise DimensionError(
            f"record shape {record.outcomes.shape} != ({dm.n_steps}, {dm.n_channels})")
    plan = {s: k for k, (s, _) in enumerate(dm.interventions)}
    rho = dm.initial_state.copy()
    for i in range(dm.n_steps + 1):
        if i in plan:
            k = plan[i]
            rho = _normalized(cp_map(dm.interventions[k][1], rho, record.revealed.get(k)))
        if i < dm.n_steps:
            K = dm.kraus(record.outcomes[i])
            rho = _normalized(K @ rho @ K.conj().T)
    return rho


def _normalized(rho):
    tr = np.trace(rho).real
    if not tr > 0.0:
        raise ZeroProbabilityRecord("record has zero probability under the discrete model")
    return ql.hermitian_part(rho / tr)


def enumerate_records(dm: DiscreteModel):
    """Every ancilla record of the model (``2^(n_steps * n_channels)`` of them)."""
    for flat in itertools.product((1, -1), repeat=dm.n_steps * dm.n_channels):
        yield DiscreteRecord(np.array(flat).reshape(dm.n_steps, dm.n_channels))


def sample_records(dm: DiscreteModel, n_records: int, rng: np.random.Generator):
    """Draw records from the exact discrete statistics (no interventions).

    Returns ``(outcomes, states)``: outcomes of shape
    ``(n_records, n_steps, n_channels)`` and the Kraus-filtered state at the
    final time for each record.
    """
    if dm.interventions:
        raise ValueError("sample_records supports models without interventions")
    alphabet = dm.outcome_alphabet()
    Ks = np.array([dm.kraus(y) for y in alphabet])  # (A, d, d)
    rho = np.broadcast_to(dm.initial_state, (n_records, dm.dim, dm.dim)).copy()
    out = np.empty((n_records, dm.n_steps, dm.n_channels), dtype=int)
    alpha = np.array(alphabet)
    for i in range(dm.n_steps):
        branch = np.einsum("aij,bjk,alk->bail", Ks, rho, Ks.conj())  # (B, A, d, d)
        p = np.einsum("baii->ba", branch).real
        p = np.clip(p, 0.0, None)
        cdf = np.cumsum(p, axis=1)
        u = rng.random(n_records) * cdf[:, -1]
        choice = np.minimum((cdf < u[:, None]).sum(axis=1), len(alphabet) - 1)
        rho = branch[np.arange(n_records), choice]
        rho = ql.hermitian_part(rho / ql.trace(rho).real[:, None, None])
        out[:, i, :] = alpha[choice]
    return out, rho


def from_continuous(model, dt: float, n_steps: int, initial_state,
                    interventions: Sequence[Tuple[int, InterventionSpec]] = ()) -> DiscreteModel:
    """Collision-model discretization of a unit-efficiency :class:`OpenSystemModel`."""
    if any(eta != 1.0 for eta in model.efficiencies):
        raise ValueError("the collision model represents unit-efficiency channels only")
    return DiscreteModel(model.hamiltonian, model.couplings, dt, n_steps,
                         initial_state, tuple(interventions))
