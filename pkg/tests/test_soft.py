import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reward_transfer.mdp import Kernel, Policy
from reward_transfer.soft import (SoftSpec, omega, regularized_return, soft_bellman, softmax_policy,
                                  softmax_probs, soft_value_iteration, state_value)

from conftest import random_kernel, random_policy


def uniform_spec(S, A, gamma=0.9, tau=1.0):
    return SoftSpec(gamma, tau, Policy.uniform(S, A))


def test_spec_rejects_bad_parameters():
    with pytest.raises(ValueError):
        uniform_spec(2, 2, tau=0.0)
    with pytest.raises(ValueError):
        uniform_spec(2, 2, gamma=1.0)
    with pytest.raises(ValueError):
        SoftSpec(0.9, 1.0, Policy(np.array([[1.0, 0.0]])))


class TestOmega:
    def test_zero(self):
        assert np.all(omega(np.zeros((3, 2)), uniform_spec(3, 2, tau=0.3)) == 0.0)

    def test_shift_equivariance(self, rng):
        spec = SoftSpec(0.9, 0.2, random_policy(rng, 4, 3))
        q = rng.normal(size=(4, 3))
        assert np.allclose(omega(q + 5.0, spec), omega(q, spec) + 5.0, atol=1e-12)

    def test_hand_value(self):
        assert omega(np.array([[0.0, math.log(3.0)]]), uniform_spec(1, 2))[0] == pytest.approx(math.log(2.0))

    def test_large_values_are_stable(self):
        out = omega(np.array([[1e4, 0.0]]), uniform_spec(1, 2, tau=0.01))
        assert np.isfinite(out).all()


class TestSoftmax:
    def test_zero_logits_give_reference(self, rng):
        ref = random_policy(rng, 3, 4)
        pi = softmax_policy(np.zeros((3, 4)), SoftSpec(0.9, 0.5, ref))
        assert np.allclose(pi.probs, ref.probs, atol=1e-15)

    def test_saturation(self):
        p = softmax_probs(np.array([[50.0, 0.0]]), uniform_spec(1, 2, tau=1.0))
        assert p[0, 0] >= 1 - 1e-12

    def test_hand_value(self):
        p = softmax_probs(np.array([[0.0, math.log(3.0)]]), uniform_spec(1, 2))
        assert np.allclose(p, [[0.25, 0.75]])


class TestValueIteration:
    def test_single_pair(self):
        P = Kernel(np.ones((1, 1, 1)))
        q, _ = soft_value_iteration(np.array([[2.0]]), P, SoftSpec(0.8, 0.5, Policy(np.ones((1, 1)))))
        assert q[0, 0] == pytest.approx(10.0, abs=1e-9)

    def test_gamma_zero(self, rng):
        r = rng.normal(size=(3, 2))
        q, _ = soft_value_iteration(r, random_kernel(rng, 3, 2), uniform_spec(3, 2, gamma=0.0))
        assert np.allclose(q, r)

    def test_small_temperature_matches_hard_control(self, rng):
        P, r = random_kernel(rng, 4, 2), rng.uniform(size=(4, 2))
        q, _ = soft_value_iteration(r, P, uniform_spec(4, 2, tau=1e-4), tol=1e-10)
        hard = np.zeros((4, 2))
        for _ in range(2000):
            hard = r + 0.9 * P.probs @ hard.max(axis=1)
        assert np.abs(q - hard).max() < 1e-2

    def test_fixed_point_and_contraction(self, rng):
        P, r = random_kernel(rng, 5, 3), rng.normal(size=(5, 3))
        spec = uniform_spec(5, 3, gamma=0.95, tau=0.3)
        q, iters = soft_value_iteration(r, P, spec, tol=1e-11)
        assert np.abs(q - soft_bellman(q, r, P, spec)).max() <= 1e-10
        assert iters > 0
        # error ratios of successive iterates
        x, errs = np.zeros_like(r), []
        for _ in range(30):
            x = soft_bellman(x, r, P, spec)
            errs.append(np.abs(x - q).max())
        ratios = np.array(errs[1:]) / np.array(errs[:-1])
        assert ratios.max() <= 0.95 + 1e-6


class TestStateValue:
    def test_point_mass(self, rng):
        q = rng.normal(size=(3, 2))
        assert np.array_equal(state_value(q, Policy.point_mass(3, 2, 1)), q[:, 1])

    def test_uniform(self):
        assert state_value(np.array([[1.0, 3.0]]), Policy.uniform(1, 2))[0] == 2.0


class TestRegularizedReturn:
    def test_reference_policy_zero_reward(self, rng):
        spec = uniform_spec(3, 2)
        J = regularized_return(spec.pi_ref, np.zeros((3, 2)), random_kernel(rng, 3, 2), spec,
                               np.full((3, 2), 1 / 6))
        assert J == pytest.approx(0.0, abs=1e-12)

    def test_single_pair(self):
        spec = SoftSpec(0.9, 1.0, Policy(np.ones((1, 1))))
        J = regularized_return(spec.pi_ref, np.array([[3.0]]), Kernel(np.ones((1, 1, 1))), spec,
                               np.ones((1, 1)))
        assert J == pytest.approx(30.0)

    def test_soft_optimal_policy_beats_alternatives(self, rng):
        P, r = random_kernel(rng, 4, 3), rng.normal(size=(4, 3))
        spec = uniform_spec(4, 3, gamma=0.9, tau=0.5)
        rho = np.full((4, 3), 1 / 12)
        q, _ = soft_value_iteration(r, P, spec)
        J_star = regularized_return(softmax_policy(q, spec), r, P, spec, rho)
        for _ in range(20):
            alt = Policy.normalized(softmax_probs(q, spec) * rng.uniform(0.2, 1.8, size=(4, 3)))
            assert J_star >= regularized_return(alt, r, P, spec, rho) - 1e-10

    def test_deterministic_policy_pays_full_kl(self, rng):
        # zero-probability actions carry no occupancy, so the penalty is log 2 per step
        spec = uniform_spec(2, 2)
        J = regularized_return(Policy.point_mass(2, 2, 0), np.zeros((2, 2)), random_kernel(rng, 2, 2),
                               spec, np.full((2, 2), 0.25))
        assert J == pytest.approx(-math.log(2.0) / 0.1)


def _pairs():
    return st.tuples(st.integers(0, 2**31 - 1), st.integers(1, 6), st.floats(0.01, 5.0))


@settings(max_examples=50, deadline=None)
@given(_pairs())
def test_omega_monotone_and_nonexpansive(args):
    seed, A, tau = args
    rng = np.random.default_rng(seed)
    spec = SoftSpec(0.9, tau, random_policy(rng, 3, A))
    q = rng.normal(scale=3.0, size=(3, A))
    q_up = q + rng.uniform(0, 2, size=q.shape)
    q_alt = rng.normal(scale=3.0, size=(3, A))
    assert np.all(omega(q, spec) <= omega(q_up, spec) + 1e-12)
    assert np.abs(omega(q, spec) - omega(q_alt, spec)).max() <= np.abs(q - q_alt).max() + 1e-12


def test_softmax_sensitivity_bound(rng):
    A, tau = 5, 0.3
    spec = uniform_spec(1, A, tau=tau)
    for _ in range(1000):
        q = rng.normal(scale=2.0, size=(1, A))
        q2 = q + rng.normal(scale=rng.choice([1e-3, 0.1, 1.0]), size=(1, A))
        lhs = np.abs(softmax_probs(q, spec) - softmax_probs(q2, spec)).sum()
        assert lhs <= math.sqrt(A) / tau * np.linalg.norm(q - q2) + 1e-12
