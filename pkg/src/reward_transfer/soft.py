"""Entropy-regularized (KL-to-reference) soft control on tabular MDPs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .mdp import (Kernel, Policy, SADist, discounted_occupancy, kernel_array, policy_array,
                  policy_average, resolvent_apply)


@dataclass(frozen=True, eq=False)
class SoftSpec:
    """Discount, temperature and full-support reference policy of a soft-control task."""

    gamma: float
    tau: float
    pi_ref: Policy

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not self.tau > 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not (self.pi_ref.probs > 0).all():
            raise ValueError("reference policy must have full support")

    @property
    def log_ref(self) -> np.ndarray:
        return np.log(self.pi_ref.probs)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "tau": self.tau, "pi_ref": self.pi_ref.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SoftSpec":
        return cls(float(d["gamma"]), float(d["tau"]), Policy.from_dict(d["pi_ref"]))


def omega(q, spec: SoftSpec) -> np.ndarray:
    """Soft state value ``tau log sum_a pi_ref(a|s) exp(q(s,a)/tau)``."""
    q = np.asarray(q, dtype=float)
    return spec.tau * logsumexp(q / spec.tau + spec.log_ref, axis=1)


def softmax_probs(q, spec: SoftSpec) -> np.ndarray:
    """Raw ``(S, A)`` array of the softmax policy (no validation)."""
    z = np.asarray(q, dtype=float) / spec.tau + spec.log_ref
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_policy(q, spec: SoftSpec) -> Policy:
    """``pi(a|s)`` proportional to ``pi_ref(a|s) exp(q(s,a)/tau)``."""
    return Policy(softmax_probs(q, spec))


def soft_bellman(q, r, P, spec: SoftSpec) -> np.ndarray:
    """``r + gamma P Omega(q)``."""
    return r + spec.gamma * (kernel_array(P) @ omega(q, spec))


def soft_value_iteration(r, P, spec: SoftSpec, tol: float = 1e-10, q0=None,
                         history: list | None = None) -> tuple[np.ndarray, int]:
    """Iterate the soft Bellman operator until ``||q - T q||_inf <= tol``.

    Returns ``(q, iterations)``. If ``history`` is a list, the successive sup-norm
    differences are appended to it. Raises ``RuntimeError`` when the iteration
    cap ``10 * ceil(log(tol) / log(gamma))`` is hit or the contraction ratio is
    violated, since either means a bug rather than slow convergence.
    """
    r = np.asarray(r, dtype=float)
    gamma = spec.gamma
    if gamma == 0.0:
        cap = 2
    else:
        cap = 10 * max(1, math.ceil(math.log(tol) / math.log(gamma)))
    q = np.zeros_like(r) if q0 is None else np.array(q0, dtype=float)
    prev_diff = None
    for it in range(1, cap + 1):
        q_next = soft_bellman(q, r, P, spec)
        diff = float(np.abs(q_next - q).max())
        if history is not None:
            history.append(diff)
        # ratio only meaningful above roundoff
        if prev_diff is not None and prev_diff > 1e-9 * (1.0 + np.abs(q).max()):
            # the ratio approaches gamma from below, so allow roundoff of order tau * eps
            slack = 1e-6 * prev_diff + 1e3 * np.finfo(float).eps * (spec.tau + np.abs(q).max())
            if diff > gamma * prev_diff + slack:
                raise RuntimeError(f"soft Bellman contraction violated at iteration {it}: "
                                   f"{diff:.3e} > {gamma} * {prev_diff:.3e}")
        q = q_next
        if diff <= tol:
            return q, it
        prev_diff = diff
    raise RuntimeError(f"soft value iteration did not converge in {cap} iterations")


def state_value(q, pi) -> np.ndarray:
    """``V(s) = sum_a pi(a|s) q(s, a)``."""
    return policy_average(pi, q)


def initial_state_action(rho, pi) -> np.ndarray:
    """State marginal of ``rho`` with actions redrawn from ``pi``."""
    w = rho.weights if isinstance(rho, SADist) else np.asarray(rho, dtype=float)
    return w.sum(axis=1)[:, None] * policy_array(pi)


def regularized_return(pi, r, P, spec: SoftSpec, rho) -> float:
    """Exact ``J(pi) = (1-gamma)^{-1} E_d[r - tau log(pi / pi_ref)]``.

    ``d`` is the discounted occupancy of ``pi`` started from the state marginal
    of ``rho`` with the first action drawn from ``pi``. Natural logarithms.
    """
    p = policy_array(pi)
    d = discounted_occupancy(P, p, initial_state_action(rho, p), spec.gamma).weights
    support = d > 0
    if (support & (p <= 0)).any():
        raise ValueError("policy has zero probability where the occupancy has mass")
    with np.errstate(divide="ignore"):
        log_ratio = np.where(support, np.log(np.where(p > 0, p, 1.0)) - spec.log_ref, 0.0)
    payoff = np.asarray(r, dtype=float) - spec.tau * log_ratio
    return float((d * payoff).sum() / (1.0 - spec.gamma))


def regularized_q(pi, r, P, spec: SoftSpec) -> np.ndarray:
    """Regularized action value of ``pi``: ``r - tau log(pi/pi_ref) + gamma P V^pi``."""
    p = policy_array(pi)
    with np.errstate(divide="ignore"):
        log_ratio = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0) - spec.log_ref
    payoff = np.asarray(r, dtype=float) - spec.tau * np.where(p > 0, log_ratio, 0.0)
    # h = payoff + gamma P^pi h is exactly the regularized q of pi
    return resolvent_apply(P, p, spec.gamma, payoff)
