import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reward_transfer.mdp import (Kernel, Policy, SADist, compose_policy_kernel, discounted_occupancy,
                                 dumps, loads, policy_average, resolvent_apply,
                                 resolvent_transpose_apply, tv_shift_stats, validate_kernel,
                                 validate_policy)

from conftest import dense_matrix, random_kernel, random_policy


class TestValidation:
    def test_identity_kernel_is_valid(self):
        P = np.zeros((3, 2, 3))
        for s in range(3):
            P[s, :, s] = 1.0
        assert validate_kernel(P) == []

    def test_short_row_is_reported(self):
        P = np.full((2, 2, 2), 0.5)
        P[1, 0] = [0.45, 0.45]
        report = validate_kernel(P)
        assert len(report) == 1
        assert report[0].index == (1, 0)

    def test_negative_entry_is_reported(self):
        P = np.full((2, 1, 2), 0.5)
        P[0, 0] = [1.2, -0.2]
        assert len(validate_kernel(P)) == 1

    def test_constructors_reject_bad_tables(self):
        with pytest.raises(ValueError):
            Kernel(np.full((2, 1, 2), 0.4))
        with pytest.raises(ValueError):
            Policy(np.array([[0.7, 0.2]]))
        assert validate_policy(np.array([[0.5, 0.5]])) == []

    def test_normalize_is_explicit(self):
        P = Kernel.normalized(np.ones((2, 2, 2)))
        assert np.allclose(P.probs, 0.5)

    def test_tables_are_read_only(self, rng):
        P = random_kernel(rng, 3, 2)
        with pytest.raises(ValueError):
            P.probs[0, 0, 0] = 1.0


def test_json_round_trip(rng):
    P = random_kernel(rng, 3, 2)
    pi = random_policy(rng, 3, 2)
    text = dumps(P)
    assert list(json.loads(text)) == ["n_states", "n_actions", "probs"]
    assert np.array_equal(loads(text, Kernel).probs, P.probs)
    assert np.array_equal(loads(dumps(pi), Policy).probs, pi.probs)
    d = SADist.from_state_policy(np.array([0.2, 0.3, 0.5]), pi)
    assert np.allclose(loads(dumps(d), SADist).weights, d.weights)


class TestPolicyAverage:
    def test_point_mass_selects_column(self, rng):
        f = rng.normal(size=(4, 3))
        assert np.array_equal(policy_average(Policy.point_mass(4, 3, 2), f), f[:, 2])

    def test_uniform_two_actions(self):
        assert policy_average(Policy.uniform(1, 2), np.array([[1.0, 3.0]]))[0] == 2.0

    def test_constant(self, rng):
        pi = random_policy(rng, 5, 3)
        assert np.allclose(policy_average(pi, np.full((5, 3), 7.0)), 7.0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            policy_average(random_policy(rng, 3, 2), np.zeros((3, 3)))


class TestComposePolicyKernel:
    def test_constant_preserved(self, rng):
        P, pi = random_kernel(rng, 4, 3), random_policy(rng, 4, 3)
        assert np.allclose(compose_policy_kernel(P, pi, np.full((4, 3), 2.5)), 2.5)

    def test_point_masses(self, rng):
        K = np.zeros((3, 2, 3))
        K[:, :, 1] = 1.0
        f = rng.normal(size=(3, 2))
        out = compose_policy_kernel(Kernel(K), Policy.point_mass(3, 2, 0), f)
        assert np.all(out == f[1, 0])

    def test_matches_dense_matrix(self, rng):
        P, pi = random_kernel(rng, 2, 2), Policy.uniform(2, 2)
        f = rng.normal(size=(2, 2))
        expected = (dense_matrix(P, pi) @ f.ravel()).reshape(2, 2)
        assert np.allclose(compose_policy_kernel(P, pi, f), expected, atol=1e-14)

    def test_linear_and_contractive(self, rng):
        P, pi = random_kernel(rng, 5, 2), random_policy(rng, 5, 2)
        f, g = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        lhs = compose_policy_kernel(P, pi, 2 * f - g)
        rhs = 2 * compose_policy_kernel(P, pi, f) - compose_policy_kernel(P, pi, g)
        assert np.allclose(lhs, rhs)
        assert np.abs(compose_policy_kernel(P, pi, f)).max() <= np.abs(f).max() + 1e-12


class TestResolvent:
    def test_gamma_zero_is_identity(self, rng):
        P, pi = random_kernel(rng, 3, 2), random_policy(rng, 3, 2)
        f = rng.normal(size=(3, 2))
        assert np.array_equal(resolvent_apply(P, pi, 0.0, f), f)

    def test_single_pair_geometric_series(self):
        P, pi = Kernel(np.ones((1, 1, 1))), Policy(np.ones((1, 1)))
        for method in ("direct", "neumann"):
            h = resolvent_apply(P, pi, 0.9, np.array([[2.0]]), method=method)
            assert h[0, 0] == pytest.approx(20.0, abs=1e-8)

    def test_dense_oracle_and_methods_agree(self, rng):
        P, pi = random_kernel(rng, 3, 2), random_policy(rng, 3, 2)
        f = rng.normal(size=(3, 2))
        oracle = np.linalg.solve(np.eye(6) - 0.95 * dense_matrix(P, pi), f.ravel()).reshape(3, 2)
        direct = resolvent_apply(P, pi, 0.95, f, method="direct")
        neumann = resolvent_apply(P, pi, 0.95, f, tol=1e-12, method="neumann")
        assert np.abs(direct - oracle).max() < 1e-8
        assert np.abs(neumann - oracle).max() < 1e-8

    def test_fixed_point_residual(self, rng):
        P, pi = random_kernel(rng, 6, 3), random_policy(rng, 6, 3)
        f = rng.normal(size=(6, 3))
        h = resolvent_apply(P, pi, 0.97, f, tol=1e-11, method="neumann")
        assert np.abs(h - f - 0.97 * compose_policy_kernel(P, pi, h)).max() <= 1e-10

    def test_iteration_cap(self, rng):
        P, pi = random_kernel(rng, 3, 2), random_policy(rng, 3, 2)
        with pytest.raises(RuntimeError):
            resolvent_apply(P, pi, 0.999, rng.normal(size=(3, 2)), tol=1e-14, method="neumann",
                            margin=-30000)

    def test_transpose_is_adjoint(self, rng):
        P, pi = random_kernel(rng, 4, 2), random_policy(rng, 4, 2)
        f, x = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        lhs = (x * resolvent_apply(P, pi, 0.9, f)).sum()
        rhs = (resolvent_transpose_apply(P, pi, 0.9, x) * f).sum()
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_rejects_gamma_one(self, rng):
        with pytest.raises(ValueError):
            resolvent_apply(random_kernel(rng, 2, 2), Policy.uniform(2, 2), 1.0, np.zeros((2, 2)))


class TestOccupancy:
    def test_gamma_zero(self, rng):
        rho = SADist(rng.dirichlet(np.ones(6)).reshape(3, 2))
        d = discounted_occupancy(random_kernel(rng, 3, 2), random_policy(rng, 3, 2), rho, 0.0)
        assert np.allclose(d.weights, rho.weights)

    def test_absorbing_state(self):
        d = discounted_occupancy(Kernel(np.ones((1, 1, 1))), Policy(np.ones((1, 1))),
                                 SADist(np.ones((1, 1))), 0.9)
        assert d.weights[0, 0] == pytest.approx(1.0)

    def test_transpose_resolvent_oracle(self, rng):
        P, pi = random_kernel(rng, 3, 2), random_policy(rng, 3, 2)
        rho = rng.dirichlet(np.ones(6))
        d = discounted_occupancy(P, pi, rho.reshape(3, 2), 0.9).weights
        oracle = 0.1 * np.linalg.solve(np.eye(6) - 0.9 * dense_matrix(P, pi).T, rho)
        assert np.abs(d.ravel() - oracle).max() < 1e-8
        assert d.sum() == pytest.approx(1.0, abs=1e-8)


class TestTVStats:
    def test_identical(self, rng):
        P = random_kernel(rng, 3, 2)
        assert tv_shift_stats(P, P) == (0.0, 0.0)

    def test_hand_arithmetic(self):
        K1 = np.zeros((2, 2, 2))
        K1[..., 0] = 1.0
        K2 = K1.copy()
        K2[0, 0] = [0.9, 0.1]
        K2[1, 1] = [0.7, 0.3]
        avg, mx = tv_shift_stats(K1, K2)
        assert avg == pytest.approx(0.1)
        assert mx == pytest.approx(0.3)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            tv_shift_stats(random_kernel(rng, 3, 2), random_kernel(rng, 2, 2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), S=st.integers(1, 8), A=st.integers(1, 4),
       gamma=st.floats(0.0, 0.98))
def test_occupancy_matches_transpose_formula(seed, S, A, gamma):
    rng = np.random.default_rng(seed)
    P, pi = random_kernel(rng, S, A), random_policy(rng, S, A)
    rho = rng.dirichlet(np.ones(S * A)).reshape(S, A)
    d = discounted_occupancy(P, pi, rho, gamma).weights
    oracle = (1 - gamma) * resolvent_transpose_apply(P, pi, gamma, rho)
    assert np.abs(d - oracle).max() < 1e-8
