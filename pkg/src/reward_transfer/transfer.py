"""Population reward-transfer system.

Source side: the behavior log-ratio signal ``u_g``, the source fixed point
``q1 = u_g + gamma1 P1^mu q1`` and the anchor-normalized reward
``r = (I - Pi_mu) q1 + g``. Target side: the shifted soft Bellman equation
``q2 = r + C + gamma2 P2 Omega(q2)``. Both are also exposed as residuals so that
the profiled (Schur-complement) target residual can be evaluated.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .mdp import (Kernel, Policy, compose_policy_kernel, kernel_array, policy_array,
                  policy_average, policy_kernel_matrix, resolvent_apply,
                  resolvent_transpose_apply)
from .soft import SoftSpec, omega, softmax_policy, softmax_probs, soft_value_iteration, state_value


@dataclass(frozen=True, eq=False)
class AnchorSpec:
    """Normalization ``(mu r)(s) = g(s)`` selecting one reward from its equivalence class."""

    mu: Policy
    g: np.ndarray

    def __post_init__(self):
        g = np.array(self.g, dtype=float)
        g.setflags(write=False)
        object.__setattr__(self, "g", g)
        if g.shape != (self.mu.n_states,):
            raise ValueError(f"g has shape {g.shape}, expected ({self.mu.n_states},)")
        if not np.isfinite(g).all():
            raise ValueError("g must be finite")

    @classmethod
    def anchor_action(cls, g, n_actions: int, action: int = 0) -> "AnchorSpec":
        g = np.asarray(g, dtype=float)
        return cls(Policy.point_mass(g.shape[0], n_actions, action), g)

    @property
    def anchor_actions(self) -> np.ndarray | None:
        """Per-state anchor action if ``mu`` is a point mass, else ``None``."""
        p = self.mu.probs
        if not np.all((p == 0.0) | (p == 1.0)):
            return None
        return p.argmax(axis=1)

    def to_dict(self) -> dict:
        return {"mu": self.mu.to_dict(), "g": [float(x) for x in self.g]}

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorSpec":
        return cls(Policy.from_dict(d["mu"]), np.asarray(d["g"], dtype=float))


@dataclass(frozen=True, eq=False)
class TransferProblem:
    """Source environment, target task, anchor and reward shift ``C``.

    ``C`` may be left as ``None``; :func:`oracle_transfer` then picks it with
    :func:`choose_shift` and :func:`with_oracle_shift` returns the completed problem.
    """

    P1: Kernel
    gamma1: float
    pi_b1: Policy
    pi_ref1: Policy
    P2: Kernel
    spec2: SoftSpec
    anchor: AnchorSpec
    C: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma1 < 1.0:
            raise ValueError(f"gamma1 must lie in [0, 1), got {self.gamma1}")
        for name in ("pi_b1", "pi_ref1"):
            if not (getattr(self, name).probs > 0).all():
                raise ValueError(f"{name} must have full support")
        shapes = {self.P1.probs.shape, self.P2.probs.shape}
        if len(shapes) != 1:
            raise ValueError(f"source and target kernels differ in shape: {shapes}")
        if self.C is not None and self.C < 0:
            raise ValueError("C must be nonnegative")

    @property
    def n_states(self) -> int:
        return self.P1.n_states

    @property
    def n_actions(self) -> int:
        return self.P1.n_actions

    @property
    def u_g(self) -> np.ndarray:
        return source_signal(self.pi_b1, self.pi_ref1, self.anchor.g)

    def to_dict(self) -> dict:
        return {
            "source": {"P1": self.P1.to_dict(), "gamma1": self.gamma1,
                       "pi_b1": self.pi_b1.to_dict(), "pi_ref1": self.pi_ref1.to_dict()},
            "target": {"P2": self.P2.to_dict(), "spec2": self.spec2.to_dict()},
            "anchor": self.anchor.to_dict(),
            "C": self.C,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferProblem":
        src, tgt = d["source"], d["target"]
        return cls(Kernel.from_dict(src["P1"]), float(src["gamma1"]), Policy.from_dict(src["pi_b1"]),
                   Policy.from_dict(src["pi_ref1"]), Kernel.from_dict(tgt["P2"]),
                   SoftSpec.from_dict(tgt["spec2"]), AnchorSpec.from_dict(d["anchor"]),
                   None if d.get("C") is None else float(d["C"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "TransferProblem":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# building blocks


def anchor_average(q, mu) -> np.ndarray:
    """``(Pi_mu q)(s, a) = (mu q)(s)`` broadcast over actions."""
    q = np.asarray(q, dtype=float)
    return np.broadcast_to(policy_average(mu, q)[:, None], q.shape)


def anchor_contrast(q, mu) -> np.ndarray:
    """``(I - Pi_mu) q``."""
    q = np.asarray(q, dtype=float)
    return q - anchor_average(q, mu)


def anchor_contrast_adjoint(w, mu) -> np.ndarray:
    """Matrix transpose of ``I - Pi_mu`` applied to ``w``: ``w(s,a) - mu(a|s) sum_a' w(s,a')``."""
    w = np.asarray(w, dtype=float)
    return w - policy_array(mu) * w.sum(axis=1, keepdims=True)


def source_signal(pi_b1, pi_ref1, g) -> np.ndarray:
    """``u_g(s,a) = log pi_b1(a|s) - log pi_ref1(a|s) - g(s)``."""
    pb, pr = policy_array(pi_b1), policy_array(pi_ref1)
    if (pb <= 0).any() or (pr <= 0).any():
        raise ValueError("source signal needs full-support behavior and reference policies")
    return np.log(pb) - np.log(pr) - np.asarray(g, dtype=float)[:, None]


def source_residual(q1, u_g, P1, mu, gamma1: float) -> np.ndarray:
    """``b1(q1) = u_g + gamma1 P1^mu q1 - q1``; ``P1`` may be an empirical array."""
    q1 = np.asarray(q1, dtype=float)
    return u_g + gamma1 * compose_policy_kernel(P1, mu, q1) - q1


def target_residual(q1, q2, anchor: AnchorSpec, C: float, P2, spec2: SoftSpec) -> np.ndarray:
    """``b2(q1, q2) = (I - Pi_mu) q1 + g + C + gamma2 P2 Omega(q2) - q2``."""
    q2 = np.asarray(q2, dtype=float)
    reward = anchor_contrast(q1, anchor.mu) + anchor.g[:, None] + C
    return reward + spec2.gamma * (kernel_array(P2) @ omega(q2, spec2)) - q2


def source_fixed_point(u_g, P1, mu, gamma1: float, tol: float = 1e-10) -> np.ndarray:
    """``q1 = (I - gamma1 P1^mu)^{-1} u_g``."""
    return resolvent_apply(P1, mu, gamma1, u_g, tol=tol)


def recover_reward(q1, anchor: AnchorSpec) -> np.ndarray:
    """Anchor-normalized reward ``q1(s,a) - (mu q1)(s) + g(s)``."""
    return anchor_contrast(q1, anchor.mu) + anchor.g[:, None]


def choose_shift(r) -> float:
    """Smallest ``C >= 0`` making ``r + C`` nonnegative."""
    return max(0.0, -float(np.min(r)))


# ---------------------------------------------------------------------------
# oracle


@dataclass(frozen=True, eq=False)
class Oracle:
    """Population solution of the transfer system."""

    q1: np.ndarray
    r: np.ndarray
    C: float
    q2: np.ndarray
    pi2: Policy
    V2: np.ndarray
    u_g: np.ndarray
    iterations: int = 0

    @property
    def reward_shifted(self) -> np.ndarray:
        return self.r + self.C


def oracle_transfer(problem: TransferProblem, tol: float = 1e-10) -> Oracle:
    """Solve source recovery then target soft control with exact operators."""
    u_g = problem.u_g
    q1 = source_fixed_point(u_g, problem.P1, problem.anchor.mu, problem.gamma1, tol=tol)
    r = recover_reward(q1, problem.anchor)
    C = choose_shift(r) if problem.C is None else float(problem.C)
    if (r + C).min() < -1e-9:
        raise ValueError(f"shift C={C} leaves the reward negative (min r = {r.min():.4g})")
    q2, iters = soft_value_iteration(r + C, problem.P2, problem.spec2, tol=tol)
    pi2 = softmax_policy(q2, problem.spec2)
    return Oracle(q1=q1, r=r, C=C, q2=q2, pi2=pi2, V2=state_value(q2, pi2), u_g=u_g,
                  iterations=iters)


def with_oracle_shift(problem: TransferProblem, tol: float = 1e-10) -> tuple[TransferProblem, Oracle]:
    """Fix ``C`` from the oracle reward and return the completed problem with its oracle."""
    orc = oracle_transfer(problem, tol=tol)
    return dataclasses.replace(problem, C=orc.C), orc


def solve_coupled_system(problem: TransferProblem, C: float, tol: float = 1e-11,
                         max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``b1(q1) = 0, b2(q1, q2) = 0`` jointly by Newton's method.

    Independent of the modular route: the stacked system is linearized in both
    blocks at once and each step is one dense solve.
    """
    S, A = problem.n_states, problem.n_actions
    n = S * A
    mu = problem.anchor.mu
    u_g = problem.u_g
    spec2 = problem.spec2
    I = np.eye(n)
    M1 = policy_kernel_matrix(problem.P1, mu)
    # (I - Pi_mu) as a dense (SA, SA) matrix
    contrast = I - np.kron(np.eye(S), np.ones((A, 1))) @ _mu_rows(mu.probs)
    q1 = np.zeros((S, A))
    q2 = np.zeros((S, A))
    for _ in range(max_iter):
        b1 = source_residual(q1, u_g, problem.P1, mu, problem.gamma1)
        b2 = target_residual(q1, q2, problem.anchor, C, problem.P2, spec2)
        if max(np.abs(b1).max(), np.abs(b2).max()) <= tol:
            return q1, q2
        M2 = policy_kernel_matrix(problem.P2, softmax_probs(q2, spec2))
        J = np.block([[-(I - problem.gamma1 * M1), np.zeros((n, n))],
                      [contrast, -(I - spec2.gamma * M2)]])
        step = scipy.linalg.solve(J, -np.concatenate([b1.ravel(), b2.ravel()]))
        q1 = q1 + step[:n].reshape(S, A)
        q2 = q2 + step[n:].reshape(S, A)
    raise RuntimeError("Newton iteration on the coupled system did not converge")


def _mu_rows(mu: np.ndarray) -> np.ndarray:
    """``(S, SA)`` matrix mapping ``q`` (flattened) to ``(mu q)(s)``."""
    S, A = mu.shape
    out = np.zeros((S, S * A))
    for s in range(S):
        out[s, s * A:(s + 1) * A] = mu[s]
    return out


# ---------------------------------------------------------------------------
# profiled residuals


def profiled_target_residual(q1, q2, problem: TransferProblem, C: float | None = None,
                             tol: float = 1e-12) -> np.ndarray:
    """``b2(q1,q2) + (I - Pi_mu)(I - gamma1 P1^mu)^{-1} b1(q1)`` with population kernels."""
    return _profiled(q1, q2, problem, problem.P1, problem.P2, problem.u_g,
                     problem.C if C is None else C, tol)


def empirical_profiled_target_residual(q1, q2, problem: TransferProblem, P1_hat, P2_hat,
                                       u_g=None, C: float | None = None,
                                       tol: float = 1e-12) -> np.ndarray:
    """Same correction evaluated with empirical kernels ``P1_hat``, ``P2_hat``."""
    return _profiled(q1, q2, problem, P1_hat, P2_hat, problem.u_g if u_g is None else u_g,
                     problem.C if C is None else C, tol)


def _profiled(q1, q2, problem, P1, P2, u_g, C, tol):
    if C is None:
        raise ValueError("the reward shift C is not set on this problem")
    mu = problem.anchor.mu
    b1 = source_residual(q1, u_g, P1, mu, problem.gamma1)
    b2 = target_residual(q1, q2, problem.anchor, C, P2, problem.spec2)
    return b2 + anchor_contrast(resolvent_apply(P1, mu, problem.gamma1, b1, tol=tol), mu)


def augmented_profiled_residual(q1, q2, pi, problem: TransferProblem, C: float | None = None,
                                tol: float = 1e-12) -> np.ndarray:
    """Profiled residual that also treats the behavior policy as a nuisance.

    Uses the nonparametric normalization ``S(pi) = pi - pi_b1``; ``pi`` may be any
    positive ``(S, A)`` table.
    """
    C = problem.C if C is None else C
    if C is None:
        raise ValueError("the reward shift C is not set on this problem")
    p = policy_array(pi)
    pb = problem.pi_b1.probs
    if (p <= 0).any():
        raise ValueError("candidate behavior policy must be positive")
    mu = problem.anchor.mu
    u_pi = np.log(p) - np.log(problem.pi_ref1.probs) - problem.anchor.g[:, None]
    b1 = source_residual(q1, u_pi, problem.P1, mu, problem.gamma1)
    b2 = target_residual(q1, q2, problem.anchor, C, problem.P2, problem.spec2)
    corr = resolvent_apply(problem.P1, mu, problem.gamma1, b1 - (p - pb) / pb, tol=tol)
    return b2 + anchor_contrast(corr, mu)


# ---------------------------------------------------------------------------
# population dual certificates


@dataclass(frozen=True, eq=False)
class PopulationDuals:
    """Multipliers of the population Lagrangian at the oracle primal.

    ``l1_self`` solves the source adjoint equation with unit quadratic weight;
    ``l1_cross`` is the target-to-source term, so the coupled source dual at
    weight ``beta`` is ``beta * l1_self + l1_cross``.
    """

    l2: np.ndarray
    l1_self: np.ndarray
    l1_cross: np.ndarray

    def l1_coupled(self, beta: float) -> np.ndarray:
        return beta * self.l1_self + self.l1_cross


def population_duals(problem: TransferProblem, oracle: Oracle, rho1, rho2,
                     P1=None, P2=None) -> PopulationDuals:
    """Transpose-resolvent solutions of the stationarity conditions at the oracle.

    ``rho2 l2 = (I - gamma2 (P2^{pi2*})^T)^{-1} (rho2 q2*)``,
    ``rho1 l1_self = (I - gamma1 (P1^mu)^T)^{-1} (rho1 q1*)``,
    ``rho1 l1_cross = (I - gamma1 (P1^mu)^T)^{-1} (I - Pi_mu)^T (rho2 l2)``.

    The population kernels are used unless empirical ``P1``/``P2`` arrays are
    given. Pairs with zero weight get a zero dual, which is the restricted-support
    variant; with population weights the caller is expected to pass positive ones.
    """
    w1 = rho1.weights if hasattr(rho1, "weights") else np.asarray(rho1, dtype=float)
    w2 = rho2.weights if hasattr(rho2, "weights") else np.asarray(rho2, dtype=float)
    if (w1 < 0).any() or (w2 < 0).any():
        raise ValueError("weights must be nonnegative")
    P1 = problem.P1 if P1 is None else P1
    P2 = problem.P2 if P2 is None else P2
    mu = problem.anchor.mu

    def divide(x, w):
        return np.divide(x, w, out=np.zeros_like(x), where=w > 0)

    x2 = resolvent_transpose_apply(P2, oracle.pi2, problem.spec2.gamma, w2 * oracle.q2)
    l1_self = resolvent_transpose_apply(P1, mu, problem.gamma1, w1 * oracle.q1)
    l1_cross = resolvent_transpose_apply(P1, mu, problem.gamma1, anchor_contrast_adjoint(x2, mu))
    return PopulationDuals(divide(x2, w2), divide(l1_self, w1), divide(l1_cross, w1))
