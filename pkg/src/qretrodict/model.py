"""Open-system models, intervention measurements and their CP maps.

Conventions: the system factor always comes first in system (x) probe
products, and the free evolution is ``drho = -i[H, rho] dt + ...`` (hbar = 1),
i.e. the drift operator is ``K = -1/2 sum_k L_k^+ L_k - i H``.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm

from . import qlinalg as ql
from .errors import DimensionError, ZeroProbabilityOutcome

#: Outcomes whose probability does not exceed this are treated as impossible.
EPS_PROB = 1e-12

_HERMITIAN_TOL = 1e-10
_UNITARY_TOL = 1e-10
_PROJECTOR_TOL = 1e-10
_STATE_TOL = 1e-10
_GRID_TOL = 1e-9


def _frozen_array(a):
    arr = np.array(a, dtype=complex)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class OpenSystemModel:
    """Hamiltonian ``H``, monitored couplings ``L_k`` and detector efficiencies."""

    hamiltonian: np.ndarray
    couplings: Tuple[np.ndarray, ...] = ()
    efficiencies: Tuple[float, ...] = ()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "hamiltonian", _frozen_array(self.hamiltonian))
        object.__setattr__(self, "couplings",
                           tuple(_frozen_array(c) for c in self.couplings))
        effs = tuple(float(e) for e in self.efficiencies)
        if not effs and self.couplings:
            effs = (1.0,) * len(self.couplings)
        object.__setattr__(self, "efficiencies", effs)

    @property
    def dim(self) -> int:
        return self.hamiltonian.shape[0]

    @property
    def n_channels(self) -> int:
        return len(self.couplings)

    @property
    def coupling_stack(self) -> np.ndarray:
        """Couplings as an array of shape ``(n_channels, dim, dim)``."""
        if "L" not in self._cache:
            L = (np.array(self.couplings) if self.couplings
                 else np.zeros((0, self.dim, self.dim), dtype=complex))
            L.setflags(write=False)
            self._cache["L"] = L
        return self._cache["L"]

    @property
    def sqrt_eta(self) -> np.ndarray:
        return np.sqrt(np.clip(np.asarray(self.efficiencies, dtype=float), 0.0, 1.0))

    @property
    def drift(self) -> np.ndarray:
        """``K = -1/2 sum_k L_k^+ L_k - i H``."""
        if "K" not in self._cache:
            K = -1j * self.hamiltonian
            for L in self.couplings:
                K = K - 0.5 * L.conj().T @ L
            K.setflags(write=False)
            self._cache["K"] = K
        return self._cache["K"]

    def drift_propagator(self, dt: float) -> np.ndarray:
        """``exp(K dt)``, cached per step size."""
        key = ("expK", float(dt))
        if key not in self._cache:
            P = expm(self.drift * dt)
            P.setflags(write=False)
            self._cache[key] = P
        return self._cache[key]

    def lindbladian_heisenberg(self, X):
        """``L X = sum_k L_k^+ X L_k + X K + K^+ X`` (stack-aware)."""
        K = self.drift
        out = X @ K + K.conj().T @ X
        for L in self.couplings:
            out = out + L.conj().T @ X @ L
        return out

    def lifted(self, extra_dim: int) -> "OpenSystemModel":
        """The same dynamics acting on ``system (x) C^extra_dim``."""
        eye = np.eye(extra_dim, dtype=complex)
        return OpenSystemModel(np.kron(self.hamiltonian, eye),
                               tuple(np.kron(L, eye) for L in self.couplings),
                               self.efficiencies)


@dataclass(frozen=True, eq=False)
class InterventionSpec:
    """Indirect measurement at time ``tau``: fresh probe, coupling ``V``, projective readout.

    ``outcomes`` maps opaque string labels to orthogonal probe projectors that
    resolve the identity. ``coupling`` acts on ``system (x) probe``.
    """

    tau: float
    probe_state: np.ndarray
    coupling: np.ndarray
    outcomes: Dict[str, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "tau", float(self.tau))
        object.__setattr__(self, "probe_state", _frozen_array(self.probe_state))
        object.__setattr__(self, "coupling", _frozen_array(self.coupling))
        object.__setattr__(self, "outcomes",
                           {str(k): _frozen_array(v) for k, v in dict(self.outcomes).items()})

    @property
    def probe_dim(self) -> int:
        return self.probe_state.shape[0]

    @property
    def system_dim(self) -> int:
        return self.coupling.shape[0] // self.probe_dim

    @property
    def labels(self) -> List[str]:
        return list(self.outcomes)

    def with_tau(self, tau: float) -> "InterventionSpec":
        return InterventionSpec(tau, self.probe_state, self.coupling, self.outcomes)


@dataclass(frozen=True, eq=False)
class ExperimentSpec:
    model: OpenSystemModel
    T: float
    dt: float
    initial_state: np.ndarray
    interventions: Tuple[InterventionSpec, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "initial_state", _frozen_array(self.initial_state))
        object.__setattr__(self, "interventions", tuple(self.interventions))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def intervention_steps(self) -> List[int]:
        """Grid indices of the interventions (taus snapped to the nearest point)."""
        return [int(round(iv.tau / self.dt)) for iv in self.interventions]

    def snapped(self) -> "ExperimentSpec":
        """Copy with every intervention time moved onto the grid."""
        ivs = tuple(iv.with_tau(k * self.dt)
                    for iv, k in zip(self.interventions, self.intervention_steps()))
        return ExperimentSpec(self.model, self.T, self.dt, self.initial_state, ivs, self.seed)


@dataclass(frozen=True)
class Violation:
    field: str
    message: str
    magnitude: float = float("nan")

    def __str__(self):
        mag = "" if np.isnan(self.magnitude) else f" (defect {self.magnitude:.3g})"
        return f"{self.field}: {self.message}{mag}"


def _square(a, n, name, out):
    if a.ndim != 2 or a.shape != (n, n):
        out.append(Violation(name, f"expected shape ({n}, {n}), got {a.shape}"))
        return False
    if not np.all(np.isfinite(a)):
        out.append(Violation(name, "non-finite entries"))
        return False
    return True


def _check_state(rho, n, name, out):
    if not _square(rho, n, name, out):
        return
    herm = float(np.max(np.abs(rho - rho.conj().T), initial=0.0))
    if herm > _STATE_TOL:
        out.append(Violation(name, "not Hermitian", herm))
        return
    tr_defect = abs(np.trace(rho) - 1.0)
    if tr_defect > _STATE_TOL:
        out.append(Violation(name, "trace is not 1", float(tr_defect)))
    lam = float(ql.min_eigenvalue(rho))
    if lam < -_STATE_TOL:
        out.append(Violation(name, "not positive semidefinite", -lam))


def validate_model(model: OpenSystemModel, prefix: str = "") -> List[Violation]:
    out: List[Violation] = []
    H = model.hamiltonian
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        return [Violation(prefix + "hamiltonian", f"not square: shape {H.shape}")]
    n = H.shape[0]
    if _square(H, n, prefix + "hamiltonian", out):
        herm = float(np.max(np.abs(H - H.conj().T), initial=0.0))
        if herm > _HERMITIAN_TOL:
            out.append(Violation(prefix + "hamiltonian", "not Hermitian", herm))
    for k, L in enumerate(model.couplings):
        _square(L, n, f"{prefix}couplings[{k}]", out)
    if len(model.efficiencies) != len(model.couplings):
        out.append(Violation(prefix + "efficiencies",
                             f"length {len(model.efficiencies)} != "
                             f"{len(model.couplings)} couplings"))
    for k, eta in enumerate(model.efficiencies):
        if not (0.0 <= eta <= 1.0):
            out.append(Violation(f"{prefix}efficiencies[{k}]",
                                 f"efficiency out of range [0, 1]: {eta}",
                                 max(eta - 1.0, -eta)))
    return out


def validate_intervention(iv: InterventionSpec, dim: int, prefix: str = "") -> List[Violation]:
    out: List[Violation] = []
    rp = iv.probe_state
    if rp.ndim != 2 or rp.shape[0] != rp.shape[1]:
        return [Violation(prefix + "probe_state", f"not square: shape {rp.shape}")]
    p = rp.shape[0]
    _check_state(rp, p, prefix + "probe_state", out)
    V = iv.coupling
    if _square(V, dim * p, prefix + "coupling", out):
        defect = ql.unitarity_defect(V)
        if defect > _UNITARY_TOL:
            out.append(Violation(prefix + "coupling", "coupling not unitary", defect))
    if not iv.outcomes:
        out.append(Violation(prefix + "outcomes", "no outcomes given"))
        return out
    total = np.zeros((p, p), dtype=complex)
    projs = []
    for label, P in iv.outcomes.items():
        name = f"{prefix}outcomes[{label}]"
        if not _square(P, p, name, out):
            return out
        idem = float(np.max(np.abs(P @ P - P)))
        herm = float(np.max(np.abs(P - P.conj().T)))
        if max(idem, herm) > _PROJECTOR_TOL:
            out.append(Violation(name, "not an orthogonal projector", max(idem, herm)))
        total = total + P
        projs.append((label, P))
    completeness = float(np.max(np.abs(total - np.eye(p))))
    if completeness > _PROJECTOR_TOL:
        out.append(Violation(prefix + "outcomes", "projectors do not sum to identity",
                             completeness))
    for i in range(len(projs)):
        for j in range(i + 1, len(projs)):
            overlap = float(np.max(np.abs(projs[i][1] @ projs[j][1])))
            if overlap > _PROJECTOR_TOL:
                out.append(Violation(f"{prefix}outcomes[{projs[i][0]},{projs[j][0]}]",
                                     "projectors not mutually orthogonal", overlap))
    return out


def validate(spec: ExperimentSpec) -> List[Violation]:
    """List every invariant violation of an experiment; never raises."""
    try:
        return _validate(spec)
    except Exception as exc:  # validation must not throw
        return [Violation("spec", f"unvalidatable: {exc}")]


def _validate(spec):
    out = validate_model(spec.model)
    n = spec.model.dim
    if not (spec.dt > 0 and np.isfinite(spec.dt)):
        out.append(Violation("dt", f"time step must be positive, got {spec.dt}"))
        return out
    if not spec.T >= spec.dt:
        out.append(Violation("T", f"horizon {spec.T} shorter than dt {spec.dt}"))
    else:
        ratio = spec.T / spec.dt
        if abs(ratio - round(ratio)) > _GRID_TOL * max(1.0, ratio):
            out.append(Violation("T", "horizon is not a multiple of dt",
                                 abs(ratio - round(ratio)) * spec.dt))
    _check_state(spec.initial_state, n, "initial_state", out)
    last = 0
    for k, (iv, step) in enumerate(zip(spec.interventions, spec.intervention_steps())):
        prefix = f"interventions[{k}]."
        out.extend(validate_intervention(iv, n, prefix))
        if not (0.0 < iv.tau < spec.T):
            out.append(Violation(prefix + "tau", f"tau={iv.tau} outside (0, T)"))
        elif not (0 < step < spec.n_steps):
            out.append(Violation(prefix + "tau", f"tau={iv.tau} snaps onto an endpoint"))
        if k and step <= last:
            out.append(Violation(prefix + "tau",
                                 "intervention times not strictly increasing on the grid"))
        last = step
    return out


def _check_system(iv, rho):
    if rho.shape[-1] != iv.system_dim or rho.shape[-2] != iv.system_dim:
        raise DimensionError(
            f"state of dimension {rho.shape[-1]} does not match coupling "
            f"on system dimension {iv.system_dim}")


def _probe_projector(iv, m):
    if m is None:
        return np.eye(iv.probe_dim, dtype=complex)
    try:
        return iv.outcomes[str(m)]
    except KeyError:
        raise KeyError(f"unknown outcome label {m!r}; known: {iv.labels}") from None


def cp_map(iv: InterventionSpec, rho, m: Optional[str]):
    """Unnormalized post-measurement state ``Phi_m(rho)``.

    ``Phi_m(rho) = tr_probe{ V (rho (x) rho_probe) V^+ (I (x) P_m) }``.
    ``m=None`` gives the non-selective map ``sum_m Phi_m``.
    """
    rho = np.asarray(rho, dtype=complex)
    _check_system(iv, rho)
    d, p = iv.system_dim, iv.probe_dim
    V = iv.coupling
    joint = V @ np.kron(rho, iv.probe_state) @ V.conj().T
    joint = joint @ np.kron(np.eye(d), _probe_projector(iv, m))
    return ql.partial_trace(joint, (d, p), keep=[0])


def cp_map_adjoint(iv: InterventionSpec, X, m: Optional[str]):
    """Heisenberg dual of :func:`cp_map`: ``tr{Phi_m(rho) X} = tr{rho Phi_m^+(X)}``."""
    X = np.asarray(X, dtype=complex)
    _check_system(iv, X)
    d, p = iv.system_dim, iv.probe_dim
    V = iv.coupling
    A = V.conj().T @ np.kron(X, _probe_projector(iv, m)) @ V
    A = np.kron(np.eye(d), iv.probe_state) @ A
    return ql.partial_trace(A, (d, p), keep=[0])


def outcome_probabilities(iv: InterventionSpec, rho) -> Dict[str, float]:
    """Born-rule outcome probabilities ``tr Phi_m(rho)`` for a normalized state."""
    return {m: float(np.trace(cp_map(iv, rho, m)).real) for m in iv.labels}


def conditioned_update(iv: InterventionSpec, rho, m: Optional[str], t: Optional[float] = None):
    """Post-measurement state ``Phi_m(rho) / tr Phi_m(rho)``.

    Raises :class:`ZeroProbabilityOutcome` when ``tr Phi_m(rho) <= EPS_PROB * tr rho``.
    """
    out = cp_map(iv, rho, m)
    p = float(np.trace(out).real)
    scale = float(np.trace(np.asarray(rho)).real)
    if not p > EPS_PROB * scale:
        raise ZeroProbabilityOutcome(m, p / scale if scale else p, t)
    return out / p


def kraus_operators(iv: InterventionSpec, m: Optional[str]) -> List[np.ndarray]:
    """Kraus decomposition ``Phi_m(rho) = sum_j A_j rho A_j^+``.

    Built from the spectral decompositions of the probe state and of ``P_m``;
    for a pure probe state and rank-one ``P_m`` this is the single operator
    ``V_m = (I (x) <m|) V (I (x) |phi>)``.
    """
    d, p = iv.system_dim, iv.probe_dim
    q, phis = np.linalg.eigh(ql.hermitian_part(iv.probe_state))
    w, basis = np.linalg.eigh(ql.hermitian_part(_probe_projector(iv, m)))
    V = iv.coupling.reshape(d, p, d, p)
    ops = []
    for qj, phi in zip(q, phis.T):
        if qj <= 1e-15:
            continue
        for wa, a in zip(w, basis.T):
            if wa < 0.5:
                continue
            A = np.einsum("b,ibjc,c->ij", a.conj(), V, phi)
            ops.append(np.sqrt(qj) * A)
    return ops


def decoupled_coupling(system_dim: int, probe_dim: int) -> np.ndarray:
    return np.eye(system_dim * probe_dim, dtype=complex)


def computational_outcomes(probe_dim: int, labels: Optional[Sequence[str]] = None):
    """Rank-one projectors onto the probe's computational basis."""
    labels = [str(i) for i in range(probe_dim)] if labels is None else list(labels)
    return {lab: ql.projector(ql.ket(i, probe_dim)) for i, lab in enumerate(labels)}
