import itertools

import numpy as np
import pytest
from scipy.linalg import expm

from qretrodict import qlinalg as ql
from qretrodict.errors import GridError, ZeroNormalizer
from qretrodict.model import (ExperimentSpec, InterventionSpec, OpenSystemModel,
                              computational_outcomes, decoupled_coupling, outcome_probabilities)
from qretrodict.oracle import DiscreteModel, enumerate_records, exact_conditional
from qretrodict.smoother import (KrausSteps, all_outcome_tuples, backward_effect_step,
                                 effect_trajectory, forward_propagator, past_state_pair,
                                 past_state_series, retrodict, retrodict_multi, retrodict_single,
                                 retrodict_steps_multi, retrodict_steps_single)
from qretrodict.trajectory import MeasurementRecord, simulate, simulate_ensemble

PLUS = ql.projector(np.array([1, 1]) / np.sqrt(2))
ZERO = ql.projector(ql.ket(0, 2))


def cnot(tau=0.5):
    return InterventionSpec(tau, ZERO, ql.CNOT, computational_outcomes(2))


def idle(tau, probe):
    return InterventionSpec(tau, probe, decoupled_coupling(2, 2), computational_outcomes(2))


def random_iv(rng, tau):
    return InterventionSpec(tau, ql.random_density(2, rng), ql.random_unitary(4, rng),
                            computational_outcomes(2))


def decay_spec(T=1.0, dt=1e-3, ivs=(), seed=0, eff=()):
    model = OpenSystemModel(ql.SIGMA_X / 2, (ql.SIGMA_MINUS,), eff)
    return ExperimentSpec(model, T, dt, PLUS, tuple(ivs), seed)


# ------------------------------------------------------------ propagators

def test_forward_propagator_unitary_limit_and_identity():
    H = ql.SIGMA_Y
    model = OpenSystemModel(H, (np.zeros((2, 2)),))
    rec = MeasurementRecord(1e-3, np.random.default_rng(0).normal(size=(1, 1000)) * 0.03)
    F = forward_propagator(rec, model, 0.2, 0.9)
    assert np.max(np.abs(F - expm(-1j * H * 0.7))) < 1e-3
    np.testing.assert_array_equal(forward_propagator(rec, model, 0.4, 0.4), np.eye(2))


def test_forward_propagator_composes_exactly():
    spec = decay_spec()
    rec = simulate(spec).record
    a = forward_propagator(rec, spec.model, 0.1, 0.5)
    b = forward_propagator(rec, spec.model, 0.5, 0.8)
    np.testing.assert_allclose(b @ a, forward_propagator(rec, spec.model, 0.1, 0.8),
                               rtol=1e-13, atol=1e-15)


def test_forward_propagator_grid_errors():
    spec = decay_spec()
    rec = simulate(spec).record
    with pytest.raises(GridError):
        forward_propagator(rec, spec.model, 0.1005, 0.5)
    with pytest.raises(GridError):
        forward_propagator(rec, spec.model, 0.5, 0.1)
    with pytest.raises(GridError):
        forward_propagator(rec, spec.model, 0.0, 1.5)


def test_backward_step_examples():
    free = OpenSystemModel(np.zeros((2, 2)), (np.zeros((2, 2)),))
    np.testing.assert_array_equal(backward_effect_step(np.eye(2), [0.3], free, 1e-3), np.eye(2))
    rng = np.random.default_rng(2)
    L = ql.random_operator(2, rng)
    model = OpenSystemModel(ql.random_hermitian(2, rng), (L,))
    dt = 1e-4
    first_order = np.eye(2) + (L + L.conj().T) * np.sqrt(dt)
    out = backward_effect_step(np.eye(2), [np.sqrt(dt)], model, dt)
    # dY^2 = dt exactly here, so the Ito correction cancels and only O(dt^{3/2}) remains
    assert np.max(np.abs(out - first_order)) < 20 * dt**1.5
    out = backward_effect_step(np.eye(2), [0.0], model, dt)
    assert np.max(np.abs(out - np.eye(2))) < 5 * dt


def test_backward_step_first_order_generator():
    rng = np.random.default_rng(3)
    model = OpenSystemModel(ql.random_hermitian(2, rng), (ql.random_operator(2, rng),))
    E = ql.random_density(2, rng)
    L = model.couplings[0]
    dt, dY = 1e-5, 3e-3
    expected = (E + model.lindbladian_heisenberg(E) * dt
                + (E @ L + L.conj().T @ E) * dY)
    out = backward_effect_step(E, [dY], model, dt)
    # remaining terms are L^+ E L dY^2 and O(dt dY)
    assert np.max(np.abs(out - expected)) < 10 * dY**2


def test_effect_equals_forward_product_gram():
    spec = decay_spec(seed=4)
    rec = simulate(spec).record
    eff = effect_trajectory(rec, spec)
    np.testing.assert_array_equal(eff.effects[-1], np.eye(2))
    for t in (0.0, 0.25, 0.731):
        j = int(round(t / spec.dt))
        F = forward_propagator(rec, spec.model, j * spec.dt, spec.T)
        np.testing.assert_allclose(eff.effects[j], F.conj().T @ F, rtol=1e-10, atol=1e-12)


def test_effects_are_psd_and_hermitian():
    rng = np.random.default_rng(5)
    model = OpenSystemModel(ql.random_hermitian(3, rng), (ql.random_operator(3, rng),), (0.5,))
    spec = ExperimentSpec(model, 2.0, 1e-3, ql.random_density(3, rng), seed=5)
    eff = effect_trajectory(simulate(spec).record, spec)
    E = eff.scaled
    assert np.max(np.abs(E - ql.dag(E))) < 1e-10
    lam = ql.min_eigenvalue(E) / np.trace(E, axis1=1, axis2=2).real
    assert np.min(lam) > -1e-8


def test_kraus_steps_lifting():
    spec = decay_spec(T=0.01)
    steps = KrausSteps.from_record(simulate(spec).record, spec.model)
    lifted = steps.lifted(3)
    X = ql.random_operator(6, np.random.default_rng(0))
    expected = np.kron(steps.observed[2], np.eye(3)) @ X @ np.kron(steps.observed[2],
                                                                     np.eye(3)).conj().T
    np.testing.assert_allclose(lifted.forward(X, 2), expected, atol=1e-14)
    assert steps.lifted(1) is steps


# ------------------------------------------------------------ past-state pair

def test_past_state_pair_endpoints():
    spec = decay_spec(seed=6)
    rec = simulate(spec).record
    end = past_state_pair(rec, spec, spec.T)
    np.testing.assert_array_equal(end.effect, np.eye(2))
    free = ExperimentSpec(OpenSystemModel(np.zeros((2, 2)), (np.zeros((2, 2)),)), 1.0, 1e-3,
                          PLUS)
    start = past_state_pair(rec, free, 0.0)
    np.testing.assert_allclose(start.rho, PLUS, atol=1e-15)
    np.testing.assert_allclose(start.effect, np.eye(2), atol=1e-13)
    with pytest.raises(GridError):
        past_state_pair(rec, spec, 0.12345)


def test_record_likelihood_constant_along_grid():
    spec = decay_spec(seed=7, ivs=(cnot(0.4),))
    rec = simulate(spec, reveal=False).record
    logs = np.array([p.log_overlap for p in past_state_series(rec, spec, sample_every=50)])
    assert np.max(np.abs(np.expm1(logs - logs[0]))) < 1e-3
    # revealing the outcome changes the likelihood but keeps it constant in t
    tr = simulate(spec)
    lab = [tr.hidden_outcomes[0][1]]
    logs = np.array([p.log_overlap for p in past_state_series(tr.record, spec, lab, 50)])
    assert np.max(np.abs(np.expm1(logs - logs[-1]))) < 1e-3


# ------------------------------------------------------------ retrodiction

def test_decoupled_probe_gives_born_weights_for_every_record():
    rng = np.random.default_rng(8)
    probe = ql.random_density(2, rng)
    spec = decay_spec(ivs=(idle(0.5, probe),), seed=8)
    for tr in simulate_ensemble(spec, 10, reveal=False):
        res = retrodict_single(tr.record, spec)
        np.testing.assert_allclose(res.probabilities, np.diag(probe).real, atol=1e-12)


def test_unmonitored_system_reduces_to_born_rule():
    rng = np.random.default_rng(9)
    iv = random_iv(rng, 0.5)
    model = OpenSystemModel(ql.random_hermitian(2, rng), (np.zeros((2, 2)),))
    spec = ExperimentSpec(model, 1.0, 1e-3, PLUS, (iv,), 9)
    res = retrodict_single(simulate(spec, reveal=False).record, spec)
    U = expm(-1j * model.hamiltonian * 0.5)
    rho_tau = U @ PLUS @ U.conj().T
    born = outcome_probabilities(iv, rho_tau)
    np.testing.assert_allclose(res.probabilities, [born[m] for m in iv.labels], atol=1e-12)
    np.testing.assert_allclose(res.filtered, res.probabilities, atol=1e-12)


def test_cnot_sigma_z_retrodiction_matches_oracle_on_four_steps():
    dm = DiscreteModel(np.zeros((2, 2)), (ql.SIGMA_Z,), 0.1, 4, PLUS, ((2, cnot()),))
    for rec in enumerate_records(dm):
        res = retrodict_steps_single(dm.kraus_steps(rec), PLUS, cnot(), 2)
        exact = exact_conditional(dm, rec)
        for key, p in exact.items():
            assert abs(res.as_dict()[key] - p) < 1e-10


def test_two_cnot_probes_match_oracle_on_six_steps():
    ivs = ((2, cnot()), (4, cnot()))
    rng = np.random.default_rng(10)
    H = ql.random_hermitian(2, rng, 0.5)
    dm = DiscreteModel(H, (ql.SIGMA_Z,), 0.1, 6, PLUS, ivs)
    for rec in enumerate_records(dm):
        res = retrodict_steps_multi(dm.kraus_steps(rec), PLUS, ivs)
        exact = exact_conditional(dm, rec)
        assert set(exact) == set(res.labels)
        for key, p in exact.items():
            assert abs(res.as_dict()[key] - p) < 1e-10


def test_multi_reduces_to_single_on_random_inputs():
    rng = np.random.default_rng(11)
    for k in range(5):
        model = OpenSystemModel(ql.random_hermitian(2, rng), (ql.random_operator(2, rng),),
                                (rng.uniform(0.2, 1.0),))
        spec = ExperimentSpec(model, 0.5, 1e-3, ql.random_density(2, rng),
                              (random_iv(rng, 0.2),), k)
        rec = simulate(spec, reveal=False).record
        single = retrodict_single(rec, spec)
        multi = retrodict_multi(rec, spec)
        np.testing.assert_allclose(multi.probabilities, single.probabilities, atol=1e-10)
        assert multi.log_normalizer == pytest.approx(single.log_normalizer, rel=1e-9)


def test_decoupled_probes_factorize_joint_table():
    rng = np.random.default_rng(12)
    p1, p2 = ql.random_density(2, rng), ql.random_density(2, rng)
    spec = decay_spec(ivs=(idle(0.3, p1), idle(0.6, p2)), seed=12)
    res = retrodict(simulate(spec, reveal=False).record, spec)
    for (a, b), p in res.as_dict().items():
        assert p == pytest.approx(p1[int(a), int(a)].real * p2[int(b), int(b)].real, abs=1e-12)
    assert res.labels == all_outcome_tuples(spec)
    assert res.marginal(0)["0"] == pytest.approx(p1[0, 0].real, abs=1e-12)


def test_three_probes_normalized_and_consistent_marginal():
    rng = np.random.default_rng(13)
    ivs = tuple(random_iv(rng, t) for t in (0.2, 0.5, 0.8))
    spec = decay_spec(ivs=ivs, seed=13)
    res = retrodict(simulate(spec, reveal=False).record, spec)
    assert len(res.labels) == 8
    assert abs(res.probabilities.sum() - 1) < 1e-10
    assert np.all(res.probabilities >= 0)


def test_impossible_record_raises_zero_normalizer():
    # the only future step projects onto |1>, which the system prepared in |0> cannot reach
    steps = KrausSteps(np.array([ql.projector(ql.ket(1, 2))]))
    with pytest.raises(ZeroNormalizer):
        retrodict_steps_single(steps, ZERO, cnot(), 0)
    with pytest.raises(ZeroNormalizer):
        retrodict_steps_multi(steps, ZERO, [(0, cnot())])


def test_long_horizon_does_not_underflow():
    model = OpenSystemModel(np.zeros((2, 2)), (3 * ql.SIGMA_Z,))
    spec = ExperimentSpec(model, 20.0, 1e-3, PLUS, (cnot(10.0),), seed=14)
    tr = simulate(spec, reveal=False)
    res = retrodict_single(tr.record, spec)
    assert np.isfinite(res.log_normalizer)
    truth = tr.hidden_outcomes[0][1]
    assert res.probability(truth) > 0.99
    spec2 = ExperimentSpec(model, 20.0, 1e-3, PLUS, (cnot(5.0), cnot(15.0)), seed=14)
    res2 = retrodict(simulate(spec2, reveal=False).record, spec2)
    assert np.isfinite(res2.log_normalizer) and abs(res2.probabilities.sum() - 1) < 1e-10


def test_single_requires_exactly_one_intervention():
    spec = decay_spec(ivs=(cnot(0.3), cnot(0.6)))
    rec = simulate(spec, reveal=False).record
    with pytest.raises(ValueError):
        retrodict_single(rec, spec)
    with pytest.raises(ValueError):
        retrodict_steps_multi(KrausSteps.from_record(rec, spec.model), PLUS,
                              [(300, cnot()), (300, cnot())])


def test_result_accessors():
    spec = decay_spec(ivs=(cnot(0.5),), seed=15)
    res = retrodict_single(simulate(spec, reveal=False).record, spec)
    assert res.taus == [pytest.approx(0.5)]
    assert res.probability("0") + res.probability("1") == pytest.approx(1.0)
    assert set(itertools.chain.from_iterable(res.as_dict())) == {"0", "1"}
