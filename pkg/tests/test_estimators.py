import dataclasses

import numpy as np
import pytest

from reward_transfer.data import empirical_model, mixture_policy, rollout
from reward_transfer.envgen import random_problem
from reward_transfer.estimators import (DivergenceError, EstimatorOutput, OptimConfig, SaddleSpec,
                                        SaddleVars, empirical_lagrangian, fit, fit_coupled_offset,
                                        fit_modular, lagrangian_gradients, population_model,
                                        sample_source_objective, sample_target_objective,
                                        saddle_optimize, source_signal_from_data)
from reward_transfer.mdp import Kernel, Policy, SADist
from reward_transfer.soft import SoftSpec
from reward_transfer.transfer import AnchorSpec, TransferProblem


@pytest.fixture(scope="module")
def setup():
    problem = random_problem(5, 3, 7, gamma1=0.9, gamma2=0.9, tau2=0.4)
    rho0 = np.ones(5) / 5
    d1 = rollout(problem.P1, problem.pi_b1, rho0, 6, 40, 1)
    d2 = rollout(problem.P2, mixture_policy(problem.pi_b1, 0.2), rho0, 6, 40, 2)
    return problem, d1, d2


def random_vars(shape, seed):
    rng = np.random.default_rng(seed)
    return SaddleVars(*(rng.normal(size=shape) for _ in range(4)))


def finite_difference(v, source, target, problem, u, beta, h=1e-6):
    out = {}
    for name in ("q1", "l1", "q2", "l2"):
        x = getattr(v, name)
        fd = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            for sign in (1, -1):
                w = v.copy()
                getattr(w, name)[i] += sign * h
                fd[i] += sign * empirical_lagrangian(w, source, target, problem, u, beta) / (2 * h)
        out[name] = fd
    return out


class TestGradients:
    @pytest.mark.parametrize("blocks", ["source", "target", "both"])
    def test_matches_finite_differences(self, setup, blocks):
        problem, d1, d2 = setup
        m1 = empirical_model(d1) if blocks != "target" else None
        m2 = empirical_model(d2) if blocks != "source" else None
        u = source_signal_from_data(d1, problem)
        v = random_vars((5, 3), 0)
        G = lagrangian_gradients(v, SaddleSpec(problem, u, m1, m2, 7.0))
        fd = finite_difference(v, m1, m2, problem, u, 7.0)
        for name in ("q1", "l1", "q2", "l2"):
            assert np.abs(getattr(G, name) - fd[name]).max() <= 1e-6, name

    def test_frozen_q1_has_no_gradient(self, setup):
        problem, d1, d2 = setup
        u = source_signal_from_data(d1, problem)
        spec = SaddleSpec(problem, u, None, empirical_model(d2), 1.0, train_q1=False)
        G = lagrangian_gradients(random_vars((5, 3), 1), spec)
        assert np.all(G.q1 == 0.0)


class TestSampleObjectives:
    def test_source_average_is_block(self, setup):
        problem, d1, _ = setup
        u = source_signal_from_data(d1, problem)
        v = random_vars((5, 3), 2)
        per_sample = sample_source_objective(v, d1.states, d1.actions, d1.next_states, u,
                                             problem.anchor.mu, problem.gamma1, 7.0)
        block = empirical_lagrangian(v, empirical_model(d1), None, problem, u, 7.0)
        assert per_sample.mean() == pytest.approx(block, rel=1e-12, abs=1e-12)

    def test_target_average_is_block(self, setup):
        problem, d1, d2 = setup
        u = source_signal_from_data(d1, problem)
        v = random_vars((5, 3), 3)
        per_sample = sample_target_objective(v, d2.states, d2.actions, d2.next_states,
                                             problem.anchor.mu, problem.anchor.g, problem.C,
                                             problem.spec2)
        block = empirical_lagrangian(v, None, empirical_model(d2), problem, u, 7.0)
        assert per_sample.mean() == pytest.approx(block, rel=1e-12, abs=1e-12)


def one_state_problem(g=0.7, C=0.5):
    one = Policy(np.ones((1, 1)))
    K = Kernel(np.ones((1, 1, 1)))
    return TransferProblem(K, 0.5, one, one, K, SoftSpec(0.0, 1.0, one),
                           AnchorSpec(one, np.array([g])), C)


class TestOptimizer:
    def one_state_spec(self):
        problem = one_state_problem()
        model = population_model(problem.P2, SADist(np.ones((1, 1))))
        return SaddleSpec(problem, problem.u_g, None, model, 1.0, train_q1=False)

    def test_one_state_saddle_is_stationary(self):
        # L = q^2/2 + l (g + C - q): saddle at q = l = g + C
        spec = self.one_state_spec()
        z = np.zeros((1, 1))
        saddle = SaddleVars(z, z, z + 1.2, z + 1.2)
        G = lagrangian_gradients(saddle, spec)
        assert np.allclose([G.q2[0, 0], G.l2[0, 0]], 0.0, atol=1e-14)
        v, _ = saddle_optimize(spec, saddle, OptimConfig(lr_q=1e-2, lr_l=1e-2), 1000)
        assert v.q2[0, 0] == pytest.approx(1.2, abs=1e-12)

    def test_one_state_primal_converges(self):
        spec = self.one_state_spec()
        init = SaddleVars(*(np.zeros((1, 1)) for _ in range(4)))
        cfg = OptimConfig(lr_q=1e-4, lr_l=1e-4, checkpoint_interval=100)
        v, trace = saddle_optimize(spec, init, cfg, 100_000)
        assert v.q2[0, 0] == pytest.approx(1.2, abs=1e-2)
        assert trace.shape == (1000, 4)
        assert trace[-1, 0] == 100_000

    def test_zero_learning_rates_do_nothing(self, setup):
        problem, d1, d2 = setup
        u = source_signal_from_data(d1, problem)
        spec = SaddleSpec(problem, u, empirical_model(d1), empirical_model(d2), 100.0)
        init = random_vars((5, 3), 4)
        v, _ = saddle_optimize(spec, init, OptimConfig(lr_q=0.0, lr_l=0.0), 50)
        for name in ("q1", "l1", "q2", "l2"):
            assert np.array_equal(getattr(v, name), getattr(init, name))

    def test_divergence_is_reported(self, setup):
        problem, d1, d2 = setup
        u = source_signal_from_data(d1, problem)
        spec = SaddleSpec(problem, u, empirical_model(d1), empirical_model(d2), 100.0)
        init = random_vars((5, 3), 5)
        init.q2[:] = np.inf
        with pytest.raises(DivergenceError):
            saddle_optimize(spec, init, OptimConfig(), 10)

    def test_needs_a_block(self, setup):
        problem, d1, _ = setup
        with pytest.raises(ValueError):
            saddle_optimize(SaddleSpec(problem, problem.u_g, None, None, 1.0),
                            random_vars((5, 3), 0), OptimConfig(), 1)

    def test_needs_shift(self, setup):
        problem, d1, d2 = setup
        spec = SaddleSpec(dataclasses.replace(problem, C=None), problem.u_g, empirical_model(d1),
                          None, 1.0)
        with pytest.raises(ValueError):
            saddle_optimize(spec, random_vars((5, 3), 0), OptimConfig(), 1)

    def test_unvisited_pairs_are_not_updated(self, setup):
        problem, d1, _ = setup
        w = np.ones((5, 3))
        w[2, 1] = 0.0
        model = population_model(problem.P1, SADist(w / w.sum()))
        spec = SaddleSpec(problem, problem.u_g, model, None, 1.0)
        init = random_vars((5, 3), 6)
        v, _ = saddle_optimize(spec, init, OptimConfig(lr_q=1e-2, lr_l=1e-2), 100)
        assert v.q1[2, 1] == init.q1[2, 1] and v.l1[2, 1] == init.l1[2, 1]
        assert v.q1[0, 0] != init.q1[0, 0]


SMALL = OptimConfig(source_rounds=300, target_rounds=300, joint_rounds=300,
                    checkpoint_interval=100, lr_q=1e-3, lr_l=1e-3)


class TestEstimators:
    def test_deterministic(self, setup):
        problem, d1, d2 = setup
        for method in ("modular", "coupled", "coupled_offset"):
            a = fit(method, d1, d2, problem, SMALL)
            b = fit(method, d1, d2, problem, SMALL)
            assert np.array_equal(a.q2_hat, b.q2_hat)
            assert np.array_equal(a.trace, b.trace)

    def test_trace_lengths(self, setup):
        problem, d1, d2 = setup
        assert fit_modular(d1, d2, problem, SMALL).trace.shape == (6, 4)
        assert fit("coupled", d1, d2, problem, SMALL).trace.shape == (3, 4)
        assert fit("coupled_offset", d1, d2, problem, SMALL).trace.shape == (9, 4)

    def test_offset_without_joint_rounds_is_modular(self, setup):
        problem, d1, d2 = setup
        cfg = dataclasses.replace(SMALL, joint_rounds=0)
        mod = fit_modular(d1, d2, problem, cfg)
        off = fit_coupled_offset(d1, d2, problem, cfg)
        assert np.array_equal(mod.q1_hat, off.q1_hat)
        assert np.array_equal(mod.q2_hat, off.q2_hat)

    def test_reward_recovered_from_q1(self, setup):
        problem, d1, d2 = setup
        out = fit_modular(d1, d2, problem, SMALL)
        mu_r = (problem.anchor.mu.probs * out.r_hat).sum(axis=1)
        assert np.allclose(mu_r, problem.anchor.g)
        assert np.allclose(out.pi2_hat.probs.sum(axis=1), 1.0)

    def test_unknown_method(self, setup):
        problem, d1, d2 = setup
        with pytest.raises(ValueError):
            fit("ensemble", d1, d2, problem, SMALL)

    def test_oracle_reference_needs_init(self, setup):
        problem, d1, d2 = setup
        with pytest.raises(ValueError):
            fit_modular(d1, d2, problem, dataclasses.replace(SMALL, init_reference="oracle"))


def test_output_round_trip(setup, tmp_path):
    problem, d1, d2 = setup
    out = fit("coupled", d1, d2, problem, SMALL)
    out.save(tmp_path / "fit")
    back = EstimatorOutput.load(tmp_path / "fit")
    assert np.array_equal(back.q2_hat, out.q2_hat)
    assert np.array_equal(back.pi2_hat.probs, out.pi2_hat.probs)
    assert np.array_equal(back.trace, out.trace)
    assert back.C_used == out.C_used


@pytest.mark.parametrize("kwargs", [dict(lr_q=-1.0), dict(dual_steps_per_round=0),
                                    dict(checkpoint_interval=0), dict(init_reference="warm")])
def test_bad_optim_config(kwargs):
    with pytest.raises(ValueError):
        OptimConfig(**kwargs)
