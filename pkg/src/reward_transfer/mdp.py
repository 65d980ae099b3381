"""Tabular MDP objects and the linear operators built on them.

Shapes used throughout the package:

* kernel ``P``: ``(S, A, S)`` with ``P[s, a, s']``
* policy ``pi``: ``(S, A)`` with ``pi[s, a]``
* state-action function: ``(S, A)`` float array
* state function: ``(S,)`` float array
* state-action distribution: ``(S, A)`` nonnegative, summing to one
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg

PROB_TOL = 1e-9
DIRECT_SOLVE_MAX_STATES = 256


class Violation(NamedTuple):
    """One invalid row of a probability table."""

    index: tuple
    kind: str
    detail: str


def _check_rows(probs: np.ndarray, tol: float) -> list[Violation]:
    report = []
    bad_range = (probs < 0.0) | (probs > 1.0) | ~np.isfinite(probs)
    for idx in zip(*np.nonzero(bad_range.any(axis=-1))):
        row = probs[idx]
        report.append(Violation(tuple(int(i) for i in idx), "range",
                                f"entries outside [0, 1]: min={row.min():.3g}, max={row.max():.3g}"))
    sums = probs.sum(axis=-1)
    for idx in zip(*np.nonzero(np.abs(sums - 1.0) > tol)):
        report.append(Violation(tuple(int(i) for i in idx), "row_sum",
                                f"row sums to {sums[idx]:.12g}"))
    return report


def validate_kernel(P, tol: float = PROB_TOL) -> list[Violation]:
    """Return the ``(s, a)`` rows of ``P`` that are not probability vectors.

    An empty list means the kernel is valid. Accepts a :class:`Kernel` or a raw
    ``(S, A, S)`` array.
    """
    probs = np.asarray(P.probs if isinstance(P, Kernel) else P, dtype=float)
    if probs.ndim != 3 or probs.shape[0] != probs.shape[2]:
        raise ValueError(f"kernel must have shape (S, A, S), got {probs.shape}")
    return _check_rows(probs, tol)


def validate_policy(pi, tol: float = PROB_TOL) -> list[Violation]:
    probs = np.asarray(pi.probs if isinstance(pi, Policy) else pi, dtype=float)
    if probs.ndim != 2:
        raise ValueError(f"policy must have shape (S, A), got {probs.shape}")
    return _check_rows(probs, tol)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _normalize_rows(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    if (raw < 0).any():
        raise ValueError("cannot normalize negative weights")
    sums = raw.sum(axis=-1, keepdims=True)
    if (sums <= 0).any():
        raise ValueError("cannot normalize an all-zero row")
    return raw / sums


@dataclass(frozen=True, eq=False)
class Kernel:
    """Transition kernel ``P[s, a, s']``; validated on construction."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _freeze(self.probs))
        report = validate_kernel(self.probs)
        if report:
            raise ValueError(f"invalid kernel ({len(report)} bad rows), first: {report[0]}")

    @classmethod
    def normalized(cls, raw) -> "Kernel":
        """Build a kernel after explicitly rescaling each row to sum to one."""
        return cls(_normalize_rows(raw))

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def to_dict(self) -> dict:
        return _table_dict(self.n_states, self.n_actions, self.probs)

    @classmethod
    def from_dict(cls, d: dict) -> "Kernel":
        S, A = int(d["n_states"]), int(d["n_actions"])
        return cls(np.asarray(d["probs"], dtype=float).reshape(S, A, S))


@dataclass(frozen=True, eq=False)
class Policy:
    """Stochastic policy ``pi[s, a]``; validated on construction."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _freeze(self.probs))
        report = validate_policy(self.probs)
        if report:
            raise ValueError(f"invalid policy ({len(report)} bad rows), first: {report[0]}")

    @classmethod
    def normalized(cls, raw) -> "Policy":
        return cls(_normalize_rows(raw))

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def point_mass(cls, n_states: int, n_actions: int, action=0) -> "Policy":
        """Deterministic policy; ``action`` is an int or a per-state int array."""
        probs = np.zeros((n_states, n_actions))
        probs[np.arange(n_states), np.broadcast_to(action, (n_states,))] = 1.0
        return cls(probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def to_dict(self) -> dict:
        return _table_dict(self.n_states, self.n_actions, self.probs)

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        return cls(np.asarray(d["probs"], dtype=float).reshape(int(d["n_states"]), int(d["n_actions"])))


@dataclass(frozen=True, eq=False)
class SADist:
    """Nonnegative state-action weights summing to one."""

    weights: np.ndarray

    def __post_init__(self):
        w = _freeze(self.weights)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2:
            raise ValueError(f"state-action distribution must be 2-d, got {w.shape}")
        if (w < 0).any() or not np.isfinite(w).all():
            raise ValueError("state-action weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > PROB_TOL:
            raise ValueError(f"state-action weights sum to {w.sum():.12g}")

    @classmethod
    def normalized(cls, raw) -> "SADist":
        raw = np.asarray(raw, dtype=float)
        return cls(raw / raw.sum())

    @classmethod
    def from_state_policy(cls, state_dist, pi: Policy) -> "SADist":
        """``rho(s, a) = rho_S(s) pi(a|s)``."""
        return cls(np.asarray(state_dist, dtype=float)[:, None] * pi.probs)

    @property
    def n_states(self) -> int:
        return self.weights.shape[0]

    @property
    def n_actions(self) -> int:
        return self.weights.shape[1]

    def state_marginal(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def to_dict(self) -> dict:
        return _table_dict(self.n_states, self.n_actions, self.weights)

    @classmethod
    def from_dict(cls, d: dict) -> "SADist":
        return cls(np.asarray(d["probs"], dtype=float).reshape(int(d["n_states"]), int(d["n_actions"])))


def _table_dict(n_states: int, n_actions: int, probs: np.ndarray) -> dict:
    return {"n_states": int(n_states), "n_actions": int(n_actions),
            "probs": [float(x) for x in np.ravel(probs)]}


def dumps(obj) -> str:
    """Serialize a Kernel, Policy or SADist to its JSON document."""
    return json.dumps(obj.to_dict())


def loads(text: str, cls):
    return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# linear operators


def kernel_array(P) -> np.ndarray:
    """Raw ``(S, A, S)`` array from a Kernel or (possibly substochastic) array."""
    return P.probs if isinstance(P, Kernel) else np.asarray(P, dtype=float)


def policy_array(pi) -> np.ndarray:
    return pi.probs if isinstance(pi, Policy) else np.asarray(pi, dtype=float)


def _check_sa(f: np.ndarray, S: int, A: int, name: str = "f"):
    if f.shape != (S, A):
        raise ValueError(f"{name} has shape {f.shape}, expected {(S, A)}")


def policy_average(pi, f) -> np.ndarray:
    """``(Pi_pi f)(s) = sum_a pi(a|s) f(s, a)``."""
    p = policy_array(pi)
    f = np.asarray(f, dtype=float)
    _check_sa(f, *p.shape)
    return np.einsum("sa,sa->s", p, f)


def compose_policy_kernel(P, pi, f) -> np.ndarray:
    """One application of ``P^pi``: ``sum_{s'} P(s'|s,a) sum_{a'} pi(a'|s') f(s', a')``."""
    K = kernel_array(P)
    p = policy_array(pi)
    if K.shape[:2] != p.shape or K.shape[2] != p.shape[0]:
        raise ValueError(f"kernel {K.shape} and policy {p.shape} disagree")
    return K @ policy_average(p, f)


def policy_kernel_matrix(P, pi) -> np.ndarray:
    """Dense ``(SA, SA)`` matrix of ``P^pi``; rows indexed by ``s*A + a``."""
    K = kernel_array(P)
    p = policy_array(pi)
    S, A = p.shape
    return (K[:, :, :, None] * p[None, None, :, :]).reshape(S * A, S * A)


def resolvent_apply(P, pi, gamma: float, f, tol: float = 1e-10, method: str = "auto",
                    margin: int = 50) -> np.ndarray:
    """Solve ``h = f + gamma P^pi h``, i.e. ``h = (I - gamma P^pi)^{-1} f``.

    ``method`` is ``"direct"`` (dense LU), ``"neumann"`` (fixed-point iteration) or
    ``"auto"`` (direct up to 256 states). ``P`` may be substochastic.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    f = np.asarray(f, dtype=float)
    p = policy_array(pi)
    _check_sa(f, *p.shape)
    if gamma == 0.0:
        return f.copy()
    if method == "auto":
        method = "direct" if p.shape[0] <= DIRECT_SOLVE_MAX_STATES else "neumann"
    if method == "direct":
        M = policy_kernel_matrix(P, p)
        n = M.shape[0]
        h = scipy.linalg.solve(np.eye(n) - gamma * M, f.ravel())
        return h.reshape(f.shape)
    if method != "neumann":
        raise ValueError(f"unknown method {method!r}")
    scale = float(np.abs(f).max())
    if scale == 0.0:
        return np.zeros_like(f)
    cap = max(1, math.ceil(math.log(tol / scale) / math.log(gamma))) + margin
    h = f.copy()
    for _ in range(cap):
        h_next = f + gamma * compose_policy_kernel(P, p, h)
        if np.abs(h_next - h).max() <= tol:
            return h_next
        h = h_next
    raise RuntimeError(f"Neumann iteration did not reach tol={tol} within {cap} iterations")


def resolvent_transpose_apply(P, pi, gamma: float, x) -> np.ndarray:
    """``(I - gamma (P^pi)^T)^{-1} x`` for an ``(S, A)`` array ``x`` (dense solve)."""
    x = np.asarray(x, dtype=float)
    M = policy_kernel_matrix(P, pi)
    n = M.shape[0]
    return scipy.linalg.solve(np.eye(n) - gamma * M.T, x.ravel()).reshape(x.shape)


def discounted_occupancy(P, pi, rho, gamma: float) -> SADist:
    """Normalized discounted occupancy ``(1-gamma) sum_t gamma^t ((P^pi)^T)^t rho``.

    ``rho`` is the initial state-action distribution (an :class:`SADist` or array).
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    w = rho.weights if isinstance(rho, SADist) else np.asarray(rho, dtype=float)
    if gamma == 0.0:
        return SADist(w)
    K = kernel_array(P)
    p = policy_array(pi)
    if p.shape[0] <= DIRECT_SOLVE_MAX_STATES:
        d = (1.0 - gamma) * resolvent_transpose_apply(K, p, gamma, w)
    else:
        # power series on the transpose: d_{t+1} = rho + gamma (P^pi)^T d_t
        d = w.copy()
        for _ in range(100000):
            push = np.einsum("sa,sat->t", d, K)[:, None] * p
            d_next = w + gamma * push
            if np.abs(d_next - d).max() <= 1e-13:
                d = d_next
                break
            d = d_next
        d = (1.0 - gamma) * d
    d = np.clip(d, 0.0, None)
    return SADist(d / d.sum())


def tv_shift_stats(P1, P2) -> tuple[float, float]:
    """Average and maximum per-(s, a) total-variation distance between kernels."""
    K1, K2 = kernel_array(P1), kernel_array(P2)
    if K1.shape != K2.shape:
        raise ValueError(f"kernel shapes differ: {K1.shape} vs {K2.shape}")
    tv = 0.5 * np.abs(K1 - K2).sum(axis=2)
    return float(tv.mean()), float(tv.max())
