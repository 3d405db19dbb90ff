import math

import numpy as np
import pytest

from factorcast import simulator as sim


def make_config(**kw):
    defaults = dict(zeta=0.5, n_patients=20, max_steps=12, horizon=3, seed=0)
    defaults.update(kw)
    return sim.SimConfig(**defaults)


# -- sampling -------------------------------------------------------------


def test_sampled_moments_match_declared_ranges():
    cfg = make_config()
    rng = np.random.default_rng(0)
    lam, fit, rho_init = [], [], []
    for _ in range(20000):
        statics, state = sim.sample_patient(cfg, rng)
        lam.append(statics.lambda_p)
        fit.append(statics.fitness)
        rho_init.append(state.rho)
    assert abs(np.mean(lam) - 0.15) < 0.005
    assert abs(np.mean(fit) - 3.0) < 0.05
    assert min(rho_init) >= 0.03 and max(rho_init) <= 1.0


def test_sample_patient_determinism():
    cfg = make_config()
    s1, st1 = sim.sample_patient(cfg, np.random.default_rng(42))
    s2, st2 = sim.sample_patient(cfg, np.random.default_rng(42))
    assert s1.alpha0 == s2.alpha0 and s1.fitness == s2.fitness
    assert np.array_equal(s1.theta, s2.theta)
    assert st1.rho == st2.rho and st1.kappa == st2.kappa


def test_initial_histories():
    cfg = make_config()
    statics, state = sim.sample_patient(cfg, np.random.default_rng(3))
    mu0 = statics.lambda_p * state.psi0 * statics.sigma
    np.testing.assert_allclose(state.mu_hist, mu0)
    assert state.kappa_hist[0] == state.kappa
    np.testing.assert_array_equal(state.kappa_hist[1:], 0.0)


# -- treatment policy ------------------------------------------------------


def _state(mu_bar=0.0, kappa=0.0):
    return sim.PatientState(t=0, rho=0.5, psi0=0.2, kappa=kappa,
                            kappa_hist=np.zeros(sim.AR_ORDER),
                            mu_hist=np.full(sim.MU_WINDOW, mu_bar))


def test_policy_zero_arguments_gives_half():
    assert sim.treatment_prob(_state(0.0, 0.0), zeta=0.0) == 0.5


def test_policy_zeta_one_invariant_to_kappa():
    p1 = sim.treatment_prob(_state(0.02, kappa=-3.0), zeta=1.0)
    p2 = sim.treatment_prob(_state(0.02, kappa=7.5), zeta=1.0)
    assert p1 == p2


def test_policy_zeta_zero_invariant_to_mu():
    p1 = sim.treatment_prob(_state(0.5, kappa=0.3), zeta=0.0)
    p2 = sim.treatment_prob(_state(-0.9, kappa=0.3), zeta=0.0)
    assert p1 == p2


def test_policy_cancellation():
    assert sim.treatment_prob(_state(0.02, kappa=-0.02), zeta=0.5) == pytest.approx(0.5)


def test_policy_strictly_inside_unit_interval():
    for zeta in (0.0, 0.3, 1.0):
        for mu_bar, kappa in [(-50.0, 40.0), (0.0, 0.0), (30.0, -10.0)]:
            p = sim.treatment_prob(_state(mu_bar, kappa), zeta)
            assert 0.0 < p < 1.0


# -- dynamics ---------------------------------------------------------------


def _statics(**kw):
    defaults = dict(alpha0=0.05, lambda_p=0.15, sigma=0.05, rho0=0.05,
                    fitness=3.0, theta=np.zeros(sim.AR_ORDER))
    defaults.update(kw)
    return sim.PatientStatics(**defaults)


def test_zero_mass_is_noise_free_fixed_point():
    statics = _statics()
    state = _state()
    state.rho = 0.0
    nxt = sim.step_dynamics_with_noise(statics, state, 1, 0.0, 0.0)
    assert nxt.rho == 0.0


def test_kill_rate_arithmetic():
    statics = _statics(lambda_p=0.15, sigma=0.05)
    state = _state()
    state.psi0 = 0.2 / 0.99  # treatment factor 0.99 lands psi0 at 0.2
    nxt = sim.step_dynamics_with_noise(statics, state, 0, 0.0, 0.0)
    assert nxt.mu_hist[0] == pytest.approx(0.15 * 0.2 * 0.05)


def test_sustained_treatment_compounds_psi0():
    statics = _statics()
    state = _state()
    psi_start = state.psi0
    for _ in range(10):
        state = sim.step_dynamics_with_noise(statics, state, 1, 0.0, 0.0)
    assert state.psi0 == pytest.approx(psi_start * 1.01 ** 10)
    assert state.psi0 > 0


def test_negative_noise_is_clamped_to_zero_mass():
    statics = _statics()
    state = _state()
    nxt = sim.step_dynamics_with_noise(statics, state, 0, -5.0, 0.0)
    assert nxt.rho == 0.0


def test_noise_free_replay_is_identical():
    statics = _statics(theta=np.random.default_rng(0).normal(0, 0.1, sim.AR_ORDER))
    plan = [1, 0, 1, 1, 0]

    def run():
        state = _state(kappa=0.05)
        states = []
        for a in plan:
            state = sim.step_dynamics_with_noise(statics, state, a, 0.0, 0.0)
            states.append((state.rho, state.psi0, state.kappa))
        return states

    assert run() == run()


# -- dataset generation ------------------------------------------------------


def test_dataset_total_steps_and_splits():
    cfg = make_config(n_patients=20, max_steps=12)
    ds = sim.generate_dataset(cfg)
    assert ds.total_steps() == 20 * 12
    assert len(ds.split("train")) == 14
    assert len(ds.split("val")) == 3
    assert len(ds.split("test")) == 3
    assert 0.0 < ds.treated_fraction < 1.0


def test_dataset_determinism():
    cfg = make_config(seed=7)
    d1 = sim.generate_dataset(cfg)
    d2 = sim.generate_dataset(cfg)
    assert d1.equals(d2)


def test_zeta_zero_treatment_uncorrelated_with_kill_rate():
    cfg = make_config(zeta=0.0, n_patients=1000, max_steps=20, seed=11)
    ds = sim.generate_dataset(cfg)
    a_all, mu_all = [], []
    for t in ds.trajectories:
        a_all.append(t.treatments)
        mu_all.append(sim.mu_bar_series(t))
    corr = np.corrcoef(np.concatenate(a_all), np.concatenate(mu_all))[0, 1]
    assert abs(corr) < 0.05


def test_static_covariates_constant_over_time():
    cfg = make_config(seed=3)
    ds = sim.generate_dataset(cfg)
    for t in ds.trajectories[:5]:
        for dim in (0, 1, 2, 4, 5):  # alpha0, lambda_p, sigma, rho0, fitness
            assert np.ptp(t.covariates[:, dim]) == 0.0
        assert np.array_equal(t.covariates[:, 7], t.outcomes)


def test_overlap_violation_raises(monkeypatch):
    monkeypatch.setattr(sim, "treatment_prob", lambda state, zeta: 1.0 - 1e-12)
    with pytest.raises(sim.OverlapError):
        sim.generate_dataset(make_config(n_patients=5, max_steps=5, horizon=2))


def test_mu_bar_series_pads_with_initial_value():
    cfg = make_config(seed=5)
    _, traj, states = sim.simulate_patient(cfg, 0, keep_states=True)
    series = sim.mu_bar_series(traj)
    for t, state in enumerate(states):
        assert series[t] == pytest.approx(state.mu_bar, rel=1e-12)


# -- counterfactual test sets -------------------------------------------------


def test_counterfactual_count_formula():
    cfg = make_config(n_patients=8, max_steps=10, horizon=3, seed=2)
    test = sim.generate_counterfactual_test(cfg, tau=3, patients=[6, 7])
    assert len(test) == 2 * 10 * 3


def test_tau_one_single_plan():
    cfg = make_config(n_patients=8, max_steps=10, horizon=3, seed=2)
    test = sim.generate_counterfactual_test(cfg, tau=1, patients=[7])
    assert len(test) == 10
    for item in test.items:
        np.testing.assert_array_equal(item.plan, [1])


def test_identical_plans_share_outcomes_under_common_noise():
    cfg = make_config(n_patients=8, max_steps=10, horizon=3, seed=2)
    test = sim.generate_counterfactual_test(cfg, tau=3, patients=[6])
    statics, state = test.snapshots[(6, 4)]
    eps_r, eps_k = test.noise[(6, 4)]
    plan = np.array([0, 1, 0])
    o1 = sim.rollout_outcomes(statics, state.copy(), plan, eps_r, eps_k)
    o2 = sim.rollout_outcomes(statics, state.copy(), plan, eps_r, eps_k)
    np.testing.assert_array_equal(o1, o2)


def test_counterfactual_histories_match_observational_dataset():
    cfg = make_config(n_patients=8, max_steps=10, horizon=3, seed=2)
    ds = sim.generate_dataset(cfg)
    test = sim.generate_counterfactual_test(cfg, tau=3)
    for idx, hist in test.histories.items():
        np.testing.assert_array_equal(hist.covariates, ds.trajectories[idx].covariates)
        np.testing.assert_array_equal(hist.treatments, ds.trajectories[idx].treatments)


# -- optimal plan enumeration --------------------------------------------------


def test_treatment_beneficial_instance_prefers_all_ones():
    # Large kill rate with lam < 1 makes every treated step reduce mass.
    statics = _statics(alpha0=0.08, lambda_p=0.2, sigma=0.1, rho0=0.02, fitness=5.0)
    state = _state()
    state.rho = 0.8
    state.psi0 = 0.3
    tau = 4
    zeros = np.zeros(tau)
    best, finals = sim.enumerate_optimal_plan(statics, state.copy(), tau, zeros, zeros)
    np.testing.assert_array_equal(best, np.ones(tau, dtype=int))
    # Independent confirmation: the all-ones rollout beats every other plan.
    all_ones = sim.rollout_outcomes(statics, state.copy(), np.ones(tau, dtype=int), zeros, zeros)[-1]
    import itertools
    for plan in itertools.product((0, 1), repeat=tau):
        final = sim.rollout_outcomes(statics, state.copy(), plan, zeros, zeros)[-1]
        assert all_ones <= final


def test_tau_one_two_branch_comparison():
    statics = _statics(lambda_p=0.2, sigma=0.1)
    state = _state()
    zeros = np.zeros(1)
    best, finals = sim.enumerate_optimal_plan(statics, state.copy(), 1, zeros, zeros)
    treat = sim.rollout_outcomes(statics, state.copy(), [1], zeros, zeros)[-1]
    keep = sim.rollout_outcomes(statics, state.copy(), [0], zeros, zeros)[-1]
    expected = [1] if treat < keep else [0]
    np.testing.assert_array_equal(best, expected)
    np.testing.assert_allclose(finals, [keep, treat])


def test_enumeration_deterministic_without_noise():
    statics = _statics()
    state = _state()
    zeros = np.zeros(3)
    b1, f1 = sim.enumerate_optimal_plan(statics, state.copy(), 3, zeros, zeros)
    b2, f2 = sim.enumerate_optimal_plan(statics, state.copy(), 3, zeros, zeros)
    np.testing.assert_array_equal(b1, b2)
    np.testing.assert_array_equal(f1, f2)


def test_enumeration_rejects_large_tau():
    with pytest.raises(ValueError):
        sim.enumerate_optimal_plan(_statics(), _state(), 6, np.zeros(6), np.zeros(6))
