"""Numerical verification suite shared by the test harness and ``qretrodict verify``.

Every check returns a :class:`CheckResult` carrying the measured defect next
to its threshold, so a report shows how close each property comes to failing.
"""

import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import qlinalg as ql
from .filtering import FilterState, run_filter_ensemble, zakai_step
from .model import (ExperimentSpec, InterventionSpec, OpenSystemModel,
                    computational_outcomes, decoupled_coupling)
from .oracle import (DiscreteModel, check_commutation, enumerate_records, exact_conditional,
                     exact_conditional_state, kraus_filter, sample_records)
from .smoother import (KrausSteps, effect_trajectory, past_state_series, retrodict_multi,
                       retrodict_single, retrodict_steps_multi, retrodict_steps_single)
from .trajectory import MeasurementRecord, simulate_ensemble


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    comparison: str = "<="
    runtime: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: measured {self.measured:.3e} "
                f"{self.comparison} {self.threshold:.3e} ({self.runtime:.1f} s)"
                + (f" [{self.detail}]" if self.detail else ""))

    def to_dict(self):
        return asdict(self)


def _result(name, measured, threshold, t0, comparison="<=", detail=""):
    ok = measured <= threshold if comparison == "<=" else measured >= threshold
    return CheckResult(name, bool(ok), float(measured), float(threshold), comparison,
                       time.perf_counter() - t0, detail)


def _ket_state(v):
    v = np.asarray(v, dtype=complex)
    return ql.projector(v / np.linalg.norm(v))


def cnot_probe(tau: float = 0.0) -> InterventionSpec:
    """Qubit probe in ``|0>``, CNOT coupling, computational-basis readout."""
    return InterventionSpec(tau, _ket_state([1, 0]), ql.CNOT, computational_outcomes(2))


def random_probe(rng, tau: float = 0.0, system_dim: int = 2) -> InterventionSpec:
    return InterventionSpec(tau, ql.random_density(2, rng), ql.random_unitary(2 * system_dim, rng),
                            computational_outcomes(2))


def _random_qubit_model(rng, scale=1.0):
    return ql.random_hermitian(2, rng), ql.random_operator(2, rng, scale), ql.random_density(2, rng)


# ---------------------------------------------------------------- oracle checks

def check_oracle_exactness(max_steps: int = 6, dt: float = 0.1, seed: int = 0,
                           n_models: int = 2) -> CheckResult:
    """Kraus filter vs exact global conditioning over every record up to ``max_steps``."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    for _ in range(n_models):
        H, L, rho0 = _random_qubit_model(rng)
        for n in range(max_steps + 1):
            dm = DiscreteModel(H, (L,), dt, n, rho0)
            for rec in enumerate_records(dm):
                d = ql.trace_distance(kraus_filter(dm, rec), exact_conditional_state(dm, rec))
                worst = max(worst, float(d))
                count += 1
    return _result("O1 oracle exactness", worst, 1e-12, t0, detail=f"{count} records")


def check_non_demolition(n_models: int = 10, n_steps: int = 4, dt: float = 0.1,
                         seed: int = 1) -> CheckResult:
    """Largest Heisenberg-picture commutator among measured observables."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        H, L, rho0 = _random_qubit_model(rng)
        step = int(rng.integers(1, n_steps))
        dm = DiscreteModel(H, (L,), dt, n_steps, rho0, ((step, random_probe(rng)),))
        worst = max(worst, check_commutation(dm))
    return _result("O2 non-demolition", worst, 1e-10, t0, detail=f"{n_models} models")


def check_continuum_convergence(dts=(1e-2, 1e-3, 1e-4), n_records: int = 20,
                                t_final: float = 1.0, seed: int = 2) -> CheckResult:
    """Observed order of the filter's approach to the discrete model as ``dt -> 0``."""
    t0 = time.perf_counter()
    H, L = ql.SIGMA_X / 2, ql.SIGMA_MINUS
    rho0 = _ket_state([0, 1])
    model = OpenSystemModel(H, (L,))
    errors = []
    for j, dt in enumerate(dts):
        n = int(round(t_final / dt))
        dm = DiscreteModel(H, (L,), dt, n, rho0)
        y, exact = sample_records(dm, n_records, np.random.default_rng([seed, j]))
        recs = [MeasurementRecord(dt, yy.T * np.sqrt(dt)) for yy in y]
        traj = run_filter_ensemble(recs, ExperimentSpec(model, t_final, dt, rho0))
        errors.append(float(np.mean(ql.trace_distance(traj.states[-1], exact))))
    order = float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
    detail = ", ".join(f"dt={dt:g}: {e:.2e}" for dt, e in zip(dts, errors))
    return _result("O3 continuum convergence order", order, 0.5, t0, ">=", detail)


# ------------------------------------------------------------- smoother checks

def _max_table_error(res, exact):
    return max(abs(res.as_dict()[k] - v) for k, v in exact.items())


def check_retrodiction_exactness(seed: int = 3) -> CheckResult:
    """Single- and two-intervention retrodiction vs exact Bayes, every record."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    dt = 0.1
    # single CNOT probe under sigma_z monitoring, then a random model
    cases = [(np.zeros((2, 2)), ql.SIGMA_Z, _ket_state([1, 1]), cnot_probe()),
             _random_qubit_model(rng) + (random_probe(rng),)]
    for n_steps in (4, 5):
        for H, L, rho0, iv in cases:
            step = 2
            dm = DiscreteModel(H, (L,), dt, n_steps, rho0, ((step, iv),))
            for rec in enumerate_records(dm):
                res = retrodict_steps_single(dm.kraus_steps(rec), rho0, iv, step)
                worst = max(worst, _max_table_error(res, exact_conditional(dm, rec)))
                count += 1
    for pair in ((cnot_probe(), cnot_probe()), (random_probe(rng), random_probe(rng))):
        H, L, rho0 = _random_qubit_model(rng)
        ivs = ((2, pair[0]), (4, pair[1]))
        dm = DiscreteModel(H, (L,), dt, 6, rho0, ivs)
        for rec in enumerate_records(dm):
            res = retrodict_steps_multi(dm.kraus_steps(rec), rho0, ivs)
            worst = max(worst, _max_table_error(res, exact_conditional(dm, rec)))
            count += 1
    return _result("S5 retrodiction exactness", worst, 1e-10, t0, detail=f"{count} records")


def _qubit_decay_spec(T=1.0, dt=1e-3, seed=4, interventions=()):
    model = OpenSystemModel(ql.SIGMA_X / 2, (ql.SIGMA_MINUS,))
    return ExperimentSpec(model, T, dt, _ket_state([1, 1]), tuple(interventions), seed)


def check_filter_zakai(n_records: int = 20, seed: int = 5) -> CheckResult:
    """Normalized linear filter vs nonlinear filter along 10^3 steps."""
    t0 = time.perf_counter()
    spec = _qubit_decay_spec(seed=seed)
    recs = [tr.record for tr in simulate_ensemble(spec, n_records, store_every=None)]
    traj = run_filter_ensemble(recs, spec, sample_every=1)
    inc = np.stack([r.increments for r in recs])  # (B, k, n)
    B = len(recs)
    state = FilterState(np.broadcast_to(spec.initial_state, (B, 2, 2)).copy(),
                        np.zeros(B), 0.0, normalized=False)
    worst = 0.0
    for i in range(spec.n_steps):
        state = zakai_step(state, inc[:, :, i], spec.model, spec.dt)
        rho = state.rho / ql.trace(state.rho).real[:, None, None]
        worst = max(worst, float(np.max(ql.trace_distance(rho, traj.states[i + 1]))))
    return _result("filter/Zakai equivalence", worst, 1e-6, t0,
                   detail=f"{n_records} records x {spec.n_steps} steps")


def check_forward_backward(n_records: int = 20, seed: int = 6) -> CheckResult:
    """``E(T, t)`` against ``F(T, t)^+ F(T, t)`` at every grid time."""
    t0 = time.perf_counter()
    model = OpenSystemModel(np.zeros((2, 2)), (ql.SIGMA_MINUS,))
    spec = ExperimentSpec(model, 1.0, 1e-3, _ket_state([1, 1]), seed=seed)
    worst = 0.0
    for tr in simulate_ensemble(spec, n_records):
        steps = KrausSteps.from_record(tr.record, model)
        E = effect_trajectory(tr.record, spec, steps=steps).effects
        F = np.eye(2, dtype=complex)
        worst = max(worst, float(np.linalg.norm(E[-1] - F.conj().T @ F)))
        for i in range(len(steps) - 1, -1, -1):
            F = F @ steps.observed[i]
            worst = max(worst, float(np.linalg.norm(E[i] - F.conj().T @ F)))
    return _result("S2 forward-backward consistency", worst, 1e-4, t0,
                   detail=f"{n_records} records")


def check_normalization_and_decoupling(n_records: int = 10, seed: int = 7) -> List[CheckResult]:
    """S1 (tables sum to one), S4 (decoupled probe) and S3 (multi reduces to single)."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    model = OpenSystemModel(ql.random_hermitian(2, rng), (ql.random_operator(2, rng),))
    spec_random = ExperimentSpec(model, 0.5, 1e-3, ql.random_density(2, rng),
                                 (random_probe(rng, 0.2),), seed)
    probe = ql.random_density(2, rng)
    idle = InterventionSpec(0.2, probe, decoupled_coupling(2, 2), computational_outcomes(2))
    spec_idle = ExperimentSpec(model, 0.5, 1e-3, spec_random.initial_state, (idle,), seed)
    born = np.real(np.diag(probe))
    s1 = s3 = s4 = 0.0
    for tr in simulate_ensemble(spec_random, n_records, reveal=False):
        single = retrodict_single(tr.record, spec_random)
        s = spec_random.intervention_steps()[0]
        multi = retrodict_steps_multi(KrausSteps.from_record(tr.record, model),
                                      spec_random.initial_state,
                                      [(s, spec_random.interventions[0])])
        s1 = max(s1, abs(single.probabilities.sum() - 1), abs(multi.probabilities.sum() - 1))
        s3 = max(s3, float(np.max(np.abs(single.probabilities - multi.probabilities))))
        idle_res = retrodict_single(tr.record, spec_idle)
        s1 = max(s1, abs(idle_res.probabilities.sum() - 1))
        s4 = max(s4, float(np.max(np.abs(idle_res.probabilities - born))))
    # two-probe tables on continuous records
    spec2 = ExperimentSpec(model, 0.5, 1e-3, spec_random.initial_state,
                           (random_probe(rng, 0.1), random_probe(rng, 0.3)), seed)
    idle2 = ExperimentSpec(model, 0.5, 1e-3, spec_random.initial_state,
                           (idle.with_tau(0.1), idle.with_tau(0.3)), seed)
    for tr in simulate_ensemble(spec2, n_records, reveal=False):
        steps = KrausSteps.from_record(tr.record, model)
        res = retrodict_steps_multi(steps, spec2.initial_state,
                                    list(zip(spec2.intervention_steps(), spec2.interventions)))
        s1 = max(s1, abs(res.probabilities.sum() - 1))
        res = retrodict_steps_multi(steps, idle2.initial_state,
                                    list(zip(idle2.intervention_steps(), idle2.interventions)))
        joint = np.outer(born, born).ravel()
        s4 = max(s4, float(np.max(np.abs(res.probabilities - joint))))
    runtime = time.perf_counter() - t0
    out = []
    for name, value in (("S1 normalization", s1), ("S3 multi-time reduction", s3),
                        ("S4 decoupled probe", s4)):
        out.append(CheckResult(name, bool(value <= 1e-10), float(value), 1e-10, "<=", runtime,
                               f"{n_records} records"))
    return out


def check_information_gain(n_trajectories: int = 500, seed: int = 8,
                           gamma: float = 1.0) -> CheckResult:
    """Paired NLL gain of full-record retrodiction over the filtered predictor.

    ``measured`` is the mean gain in units of its standard error; the
    criterion asks for at least two.
    """
    t0 = time.perf_counter()
    model = OpenSystemModel(np.zeros((2, 2)), (np.sqrt(gamma) * ql.SIGMA_Z,))
    iv = cnot_probe(1.0)
    spec = ExperimentSpec(model, 2.0, 1e-3, _ket_state([1, 1]), (iv,), seed)
    gains = np.empty(n_trajectories)
    for j, tr in enumerate(simulate_ensemble(spec, n_trajectories, reveal=False)):
        res = retrodict_single(tr.record, spec)
        k = iv.labels.index(tr.hidden_outcomes[0][1])
        nll_smooth = -np.log(max(res.probabilities[k], 1e-300))
        nll_filter = -np.log(max(res.filtered[k], 1e-300))
        gains[j] = nll_filter - nll_smooth
    mean = float(gains.mean())
    se = float(gains.std(ddof=1) / np.sqrt(n_trajectories))
    z = mean / se if se > 0 else (np.inf if mean > 0 else 0.0)
    return _result("S6 information gain (standard errors)", z, 2.0, t0, ">=",
                   f"mean NLL gain {mean:.4f} +- {se:.4f} over {n_trajectories} trajectories")


def check_wrong_initialization(n_trajectories: int = 200, T: float = 10.0, seed: int = 9,
                               tol: float = 0.05) -> CheckResult:
    """Fraction of mis-initialized filters within ``tol`` of the true state at ``T``."""
    t0 = time.perf_counter()
    model = OpenSystemModel(np.zeros((2, 2)), (ql.SIGMA_Z,))
    spec = ExperimentSpec(model, T, 1e-3, _ket_state([1, 0]), seed=seed)
    wrong = 0.99 * _ket_state([0, 1]) + 0.01 * np.eye(2) / 2
    trs = simulate_ensemble(spec, n_trajectories)
    traj = run_filter_ensemble([t.record for t in trs], spec, initial_state=wrong)
    truth = np.array([t.true_states[-1] for t in trs])
    frac = float(np.mean(ql.trace_distance(traj.states[-1], truth) < tol))
    return _result("wrong-initialization convergence", frac, 0.9, t0, ">=",
                   f"{n_trajectories} trajectories, T={T:g}")


def check_experiment(spec: ExperimentSpec, n_records: int = 5) -> List[CheckResult]:
    """Record-level invariants on a user experiment: table normalization and likelihood constancy."""
    t0 = time.perf_counter()
    norm_err, drift = 0.0, 0.0
    for tr in simulate_ensemble(spec, n_records, reveal=False):
        if spec.interventions:
            res = retrodict_multi(tr.record, spec) if len(spec.interventions) > 1 \
                else retrodict_single(tr.record, spec)
            norm_err = max(norm_err, abs(float(res.probabilities.sum()) - 1.0),
                           float(-min(0.0, res.probabilities.min())))
        sample = max(1, spec.n_steps // 50)
        logs = np.array([p.log_overlap for p in past_state_series(tr.record, spec, None, sample)])
        drift = max(drift, float(np.max(np.abs(np.expm1(logs - logs[-1])))))
    runtime = time.perf_counter() - t0
    return [
        CheckResult("experiment: retrodiction tables normalized", bool(norm_err <= 1e-10),
                    norm_err, 1e-10, "<=", runtime, f"{n_records} records"),
        CheckResult("experiment: record likelihood constant in t", bool(drift <= 1e-3),
                    drift, 1e-3, "<=", runtime, "relative drift of tr(rho_t E_t)"),
    ]


# ----------------------------------------------------------------- the suite

def acceptance_checks(quick: bool = False) -> Dict[str, Callable[[], object]]:
    """Named callables for the full suite; ``quick`` shrinks the ensembles."""
    scale = 0.2 if quick else 1.0
    return {
        "O1": check_oracle_exactness,
        "O2": check_non_demolition,
        "S5": check_retrodiction_exactness,
        "filter_zakai": lambda: check_filter_zakai(max(2, int(20 * scale))),
        "S2": lambda: check_forward_backward(max(2, int(20 * scale))),
        "S1_S3_S4": lambda: check_normalization_and_decoupling(max(2, int(10 * scale))),
        "S6": lambda: check_information_gain(max(250, int(500 * scale))),
        "O3": (lambda: check_continuum_convergence((1e-2, 1e-3), 10)) if quick
        else check_continuum_convergence,
        "wrong_init": lambda: check_wrong_initialization(max(20, int(200 * scale))),
    }


def run_suite(quick: bool = False, only: Optional[List[str]] = None,
              spec: Optional[ExperimentSpec] = None) -> List[CheckResult]:
    results: List[CheckResult] = [] if spec is None else check_experiment(spec)
    for key, fn in acceptance_checks(quick).items():
        if only and key not in only:
            continue
        out = fn()
        results.extend(out if isinstance(out, list) else [out])
    return results


__all__ = [
    "CheckResult", "check_oracle_exactness", "check_non_demolition",
    "check_continuum_convergence", "check_retrodiction_exactness", "check_filter_zakai",
    "check_forward_backward", "check_normalization_and_decoupling",
    "check_information_gain", "check_wrong_initialization", "check_experiment", "acceptance_checks", "run_suite",
    "cnot_probe", "random_probe",
]
