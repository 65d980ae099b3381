import numpy as np
import pytest

from reward_transfer.mdp import Kernel, Policy


def random_kernel(rng, S, A):
    return Kernel(rng.dirichlet(np.ones(S), size=(S, A)))


def random_policy(rng, S, A):
    return Policy(rng.dirichlet(np.ones(A), size=S))


def dense_matrix(P, pi):
    S, A = pi.probs.shape
    M = np.zeros((S * A, S * A))
    for s in range(S):
        for a in range(A):
            for t in range(S):
                for b in range(A):
                    M[s * A + a, t * A + b] = P.probs[s, a, t] * pi.probs[t, b]
    return M


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
