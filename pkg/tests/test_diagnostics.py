import json

import numpy as np
import pytest

from reward_transfer.data import empirical_model, rollout
from reward_transfer.diagnostics import (CertificateReport, anchor_contrast_diagnostic,
                                         certify_problem, check_first_order_channels,
                                         check_orthogonality, concentrability, dual_certificates,
                                         evaluate_output, exact_empirical_modular,
                                         first_order_terms, kl_to_l2_pair,
                                         source_error_decomposition, v2_error_terms,
                                         weighted_sq_norm)
from reward_transfer.envgen import random_problem
from reward_transfer.estimators import EstimatorOutput, population_model
from reward_transfer.mdp import Policy
from reward_transfer.soft import softmax_policy, state_value
from reward_transfer.transfer import oracle_transfer, recover_reward


def uniform_weights(problem):
    S, A = problem.n_states, problem.n_actions
    return np.full((S, A), 1.0 / (S * A))


def as_output(problem, q1, q2, method="modular"):
    z = np.zeros_like(q1)
    return EstimatorOutput(method, q1, recover_reward(q1, problem.anchor), float(problem.C), q2,
                           softmax_policy(q2, problem.spec2), z, z)


@pytest.fixture(scope="module")
def instance():
    problem = random_problem(5, 3, 11)
    return problem, oracle_transfer(problem)


class TestMetrics:
    def test_oracle_output_has_zero_error(self, instance):
        problem, oracle = instance
        w = uniform_weights(problem)
        rep = evaluate_output(as_output(problem, oracle.q1, oracle.q2), oracle, problem, w, w)
        assert all(abs(x) < 1e-12 for x in rep.row())

    def test_constant_shift_of_q2(self, instance):
        # the softmax ignores a constant, so regret is zero and the V2 error is the constant
        problem, oracle = instance
        w = uniform_weights(problem)
        rep = evaluate_output(as_output(problem, oracle.q1, oracle.q2 + 0.3), oracle, problem, w, w)
        assert rep.regret == 0.0
        assert rep.q2_mse_rho2 == pytest.approx(0.09)
        assert rep.v2_mse_unif == pytest.approx(0.09)
        assert rep.v2_policy_mismatch_term == pytest.approx(0.0, abs=1e-20)

    def test_v2_terms_add_up(self, instance):
        problem, oracle = instance
        rng = np.random.default_rng(0)
        out = as_output(problem, oracle.q1, oracle.q2 + rng.normal(size=oracle.q2.shape))
        a, b = v2_error_terms(out, oracle)
        direct = state_value(out.q2_hat, out.pi2_hat) - oracle.V2
        assert np.allclose(a + b, direct, atol=1e-12)

    def test_anchor_contrast_identity(self, instance):
        problem, oracle = instance
        rng = np.random.default_rng(1)
        out = as_output(problem, oracle.q1 + rng.normal(size=oracle.q1.shape), oracle.q2)
        rep = anchor_contrast_diagnostic(out, oracle, problem.anchor, uniform_weights(problem))
        assert rep.identity_error < 1e-12
        # shifting q1 by a state function leaves the recovered reward unchanged
        shifted = as_output(problem, oracle.q1 + rng.normal(size=(5, 1)), oracle.q2)
        rep = anchor_contrast_diagnostic(shifted, oracle, problem.anchor, uniform_weights(problem))
        assert rep.r_mse_rho1 < 1e-20
        assert rep.anchor_action_q1_mse > 0

    def test_weighted_norm(self):
        assert weighted_sq_norm(np.array([1.0, 2.0]), np.array([0.5, 0.25])) == 1.5

    def test_report_json(self, instance):
        problem, oracle = instance
        w = uniform_weights(problem)
        rep = evaluate_output(as_output(problem, oracle.q1, oracle.q2), oracle, problem, w, w)
        assert set(json.loads(rep.to_json())) == set(rep.to_dict())


class TestDuals:
    def test_identities_and_bounds(self, instance):
        problem, oracle = instance
        w = uniform_weights(problem)
        duals = dual_certificates(problem, oracle, 100.0, w, w)
        assert duals.report.passed, duals.report.failures()

    def test_myopic_target_dual_is_q2(self):
        # gamma2 = 0: the target adjoint equation reads l2 = q2*
        problem = random_problem(4, 2, 3, gamma2=0.0)
        oracle = oracle_transfer(problem)
        w = uniform_weights(problem)
        duals = dual_certificates(problem, oracle, 10.0, w, w)
        assert np.allclose(duals.l2, oracle.q2, atol=1e-10)

    def test_zero_beta_leaves_cross_term(self, instance):
        problem, oracle = instance
        w = uniform_weights(problem)
        d0 = dual_certificates(problem, oracle, 0.0, w, w)
        d1 = dual_certificates(problem, oracle, 1.0, w, w)
        assert np.allclose(d1.l1_coup - d0.l1_coup, d1.l1_mod, atol=1e-9)

    def test_concentrability_of_sampling_law_is_at_least_one(self, instance):
        problem, oracle = instance
        w = uniform_weights(problem)
        kap = concentrability(problem, oracle, w, w)
        assert kap.kappa1 >= 1 - 1e-12 and kap.kappa2 >= 1 - 1e-12

    def test_rejects_zero_weights(self, instance):
        problem, oracle = instance
        w = uniform_weights(problem)
        w[0, 0] = 0.0
        with pytest.raises(ValueError):
            dual_certificates(problem, oracle, 1.0, w, w)


class TestOrthogonality:
    def test_profiled_residual_is_flat(self, instance):
        problem, oracle = instance
        assert check_orthogonality(problem, oracle).passed

    def test_wrong_sign_is_caught(self, instance):
        problem, oracle = instance
        report = check_orthogonality(problem, oracle, correction_sign=-1.0)
        assert not report.passed
        assert [c.name for c in report.failures()] == ["profiled_derivative_relative"]


@pytest.fixture(scope="module")
def models(instance):
    problem, _ = instance
    rho0 = np.ones(5) / 5
    src = empirical_model(rollout(problem.P1, problem.pi_b1, rho0, 8, 200, 1))
    tgt = empirical_model(rollout(problem.P2, problem.pi_b1, rho0, 8, 200, 2))
    return src, tgt


class TestChannels:
    def test_source_decomposition_exact(self, instance, models):
        problem, oracle = instance
        src, _ = models
        q1_hat = oracle.q1 + np.random.default_rng(3).normal(size=oracle.q1.shape)
        op, res = source_error_decomposition(q1_hat, problem, oracle, src.P_hat)
        assert np.allclose(op + res, q1_hat - oracle.q1, atol=1e-9)

    def test_plugin_has_no_residual_channel(self, instance, models):
        problem, oracle = instance
        src, tgt = models
        q1, q2 = exact_empirical_modular(problem, src, tgt)
        terms = first_order_terms(q1, q2, problem, oracle, src.P_hat, tgt.P_hat)
        assert np.abs(terms["source_residual"]).max() < 1e-8
        # the remainder is second order: much smaller than the measured error
        assert np.abs(terms["remainder"]).max() < 0.2 * np.abs(terms["measured"]).max()

    def test_report(self, instance, models):
        problem, oracle = instance
        assert check_first_order_channels(problem, oracle, *models).passed

    def test_population_data_recovers_oracle(self, instance):
        problem, oracle = instance
        w = uniform_weights(problem)
        q1, q2 = exact_empirical_modular(problem, population_model(problem.P1, w),
                                         population_model(problem.P2, w))
        assert np.allclose(q1, oracle.q1, atol=1e-8)
        assert np.allclose(q2, oracle.q2, atol=1e-8)


class TestReports:
    def test_check_kinds(self):
        report = CertificateReport()
        report.add("le", 1.0, 1.0, 0.0)
        report.add("eq", 1.0, 1.1, 0.05, kind="eq")
        assert report.failures()[0].name == "eq"
        other = CertificateReport()
        other.add("x", 0.0, 1.0, 0.0)
        report.extend(other, "sub.")
        assert "sub.x" in [c.name for c in report.checks]
        assert json.loads(report.to_json())

    def test_kl_pair_for_identical_policies(self):
        p = Policy(np.array([[0.2, 0.8], [0.5, 0.5]]))
        assert kl_to_l2_pair(p, p, np.array([0.5, 0.5])) == (0.0, 0.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_certify_random_instances(seed):
    problem = random_problem(4, 3, seed)
    oracle = oracle_transfer(problem)
    w = uniform_weights(problem)
    rng = np.random.default_rng(seed)
    outputs = [as_output(problem, oracle.q1 + 0.1 * rng.normal(size=(4, 3)),
                         oracle.q2 + 0.1 * rng.normal(size=(4, 3)))]
    report = certify_problem(problem, oracle, w, w, outputs=outputs, trials=30, seed=seed)
    assert report.passed, [c.name for c in report.failures()]
