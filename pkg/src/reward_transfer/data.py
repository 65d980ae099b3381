"""Seeded rollouts, empirical models and behavior-policy estimation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import Kernel, Policy, SADist, kernel_array, policy_array


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """Flat ``(s, a, s')`` samples from ``episodes`` trajectories of length ``horizon``.

    Samples are stored episode-major, so the first ``k * horizon`` rows are the
    first ``k`` episodes.
    """

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    n_states: int
    n_actions: int
    horizon: int
    episodes: int
    seed: int

    def __post_init__(self):
        n = self.episodes * self.horizon
        for name in ("states", "actions", "next_states"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            if arr.shape != (n,):
                raise ValueError(f"{name} has {arr.shape[0]} samples, expected {n}")
        if n and (self.states.max() >= self.n_states or self.next_states.max() >= self.n_states
                  or self.actions.max() >= self.n_actions or min(self.states.min(), self.actions.min(),
                                                                  self.next_states.min()) < 0):
            raise ValueError("sample index out of range")

    def __len__(self) -> int:
        return self.states.shape[0]

    def head(self, episodes: int) -> "TransitionDataset":
        """The first ``episodes`` trajectories."""
        if not 1 <= episodes <= self.episodes:
            raise ValueError(f"episodes must be in [1, {self.episodes}]")
        n = episodes * self.horizon
        return TransitionDataset(self.states[:n], self.actions[:n], self.next_states[:n],
                                 self.n_states, self.n_actions, self.horizon, episodes, self.seed)

    def header(self) -> dict:
        return {"n_states": self.n_states, "n_actions": self.n_actions, "horizon": self.horizon,
                "episodes": self.episodes, "seed": self.seed}

    def save(self, path) -> tuple[Path, Path]:
        """Write ``<path>.csv`` (s,a,s' rows) and ``<path>.json`` (header)."""
        path = Path(path)
        csv_path, json_path = path.with_suffix(".csv"), path.with_suffix(".json")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "a", "s_next"])
            w.writerows(zip(self.states.tolist(), self.actions.tolist(), self.next_states.tolist()))
        json_path.write_text(json.dumps(self.header(), sort_keys=True))
        return csv_path, json_path

    @classmethod
    def load(cls, path) -> "TransitionDataset":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        rows = np.loadtxt(path.with_suffix(".csv"), delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        return cls(rows[:, 0], rows[:, 1], rows[:, 2], header["n_states"], header["n_actions"],
                   header["horizon"], header["episodes"], header["seed"])


def episode_uniforms(seed: int, episodes: int, horizon: int) -> np.ndarray:
    """Uniform draws ``(episodes, horizon, 3)``; episode ``e`` uses its own stream.

    The stream of episode ``e`` is ``SeedSequence(seed, spawn_key=(e,))``, which
    is what ``SeedSequence(seed).spawn`` produces, so the draws of an episode do
    not depend on how many episodes are generated or in which order.
    """
    out = np.empty((episodes, horizon, 3))
    for e in range(episodes):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(e,))))
        out[e] = rng.random((horizon, 3))
    return out


def _inverse_cdf(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (cdf_rows < u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def rollout(P, pi, rho0, horizon: int, episodes: int, seed: int) -> TransitionDataset:
    """Simulate ``episodes`` trajectories of length ``horizon``.

    ``s0 ~ rho0``, ``a_t ~ pi(.|s_t)``, ``s_{t+1} ~ P(.|s_t, a_t)``, by inverse-CDF
    sampling with per-episode uniform streams (see :func:`episode_uniforms`).
    """
    if horizon < 1 or episodes < 1:
        raise ValueError("horizon and episodes must be >= 1")
    K = kernel_array(P)
    p = policy_array(pi)
    S, A = p.shape
    rho0 = np.asarray(rho0, dtype=float)
    if rho0.shape != (S,) or abs(rho0.sum() - 1.0) > 1e-9 or (rho0 < 0).any():
        raise ValueError("rho0 must be a probability vector over states")
    u = episode_uniforms(seed, episodes, horizon)
    kernel_cdf = np.cumsum(K.reshape(S * A, S), axis=1)
    policy_cdf = np.cumsum(p, axis=1)
    init_cdf = np.cumsum(rho0)
    states = np.empty((episodes, horizon), dtype=np.int64)
    actions = np.empty((episodes, horizon), dtype=np.int64)
    nexts = np.empty((episodes, horizon), dtype=np.int64)
    s = np.minimum(np.searchsorted(init_cdf, u[:, 0, 0], side="right"), S - 1)
    for t in range(horizon):
        a = _inverse_cdf(policy_cdf[s], u[:, t, 1])
        s_next = _inverse_cdf(kernel_cdf[s * A + a], u[:, t, 2])
        states[:, t], actions[:, t], nexts[:, t] = s, a, s_next
        s = s_next
    return TransitionDataset(states.ravel(), actions.ravel(), nexts.ravel(), S, A,
                             horizon, episodes, seed)


@dataclass(frozen=True, eq=False)
class EmpiricalModel:
    """Counts, empirical kernel and state-action weights of a dataset.

    ``P_hat`` is a raw ``(S, A, S)`` array whose unvisited rows are all zero
    (flagged by ``visited``); it is never imputed.
    """

    counts: np.ndarray
    P_hat: np.ndarray
    rho_hat: SADist
    visited: np.ndarray

    @property
    def n_states(self) -> int:
        return self.counts.shape[0]

    @property
    def n_actions(self) -> int:
        return self.counts.shape[1]

    @property
    def n_samples(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_population(cls, P, rho) -> "EmpiricalModel":
        """Infinite-data limit: exact kernel and weights (``counts`` holds the weights)."""
        K = kernel_array(P)
        w = rho.weights if isinstance(rho, SADist) else np.asarray(rho, dtype=float)
        visited = w > 0
        P_hat = np.where(visited[:, :, None], K, 0.0)
        return cls(w[:, :, None] * K, P_hat, SADist(w / w.sum()), visited)


def empirical_model(data: TransitionDataset) -> EmpiricalModel:
    if len(data) == 0:
        raise ValueError("empty dataset")
    S, A = data.n_states, data.n_actions
    flat = (data.states * A + data.actions) * S + data.next_states
    counts = np.bincount(flat, minlength=S * A * S).reshape(S, A, S).astype(float)
    row = counts.sum(axis=2)
    visited = row > 0
    P_hat = np.divide(counts, row[:, :, None], out=np.zeros_like(counts), where=visited[:, :, None])
    return EmpiricalModel(counts, P_hat, SADist(row / row.sum()), visited)


def clip_policy_rows(probs, eps: float) -> np.ndarray:
    """Raise entries below ``eps`` to ``eps`` and rescale the rest to keep rows stochastic.

    Entries that would fall below ``eps`` after rescaling are clipped too, so the
    result has every entry ``>= eps`` and leaves rows already above the floor
    untouched.
    """
    probs = np.array(probs, dtype=float)
    n_actions = probs.shape[1]
    if not 0.0 < eps <= 1.0 / n_actions:
        raise ValueError(f"eps must lie in (0, 1/{n_actions}]")
    out = probs.copy()
    for s in range(probs.shape[0]):
        row = probs[s]
        clipped = row < eps
        while True:
            free = ~clipped
            free_mass = row[free].sum()
            budget = 1.0 - eps * clipped.sum()
            new = np.where(clipped, eps, row * (budget / free_mass) if free_mass > 0 else 0.0)
            newly = free & (new < eps)
            if not newly.any():
                break
            clipped |= newly
        out[s] = new
    return out


def estimate_behavior_policy(data: TransitionDataset, epsilon_clip: float = 1e-3) -> Policy:
    """Per-state action frequencies floored at ``epsilon_clip``; unvisited states get uniform."""
    S, A = data.n_states, data.n_actions
    counts = np.bincount(data.states * A + data.actions, minlength=S * A).reshape(S, A).astype(float)
    totals = counts.sum(axis=1, keepdims=True)
    freq = np.divide(counts, totals, out=np.full_like(counts, 1.0 / A), where=totals > 0)
    return Policy(clip_policy_rows(freq, epsilon_clip))


def mixture_policy(pi, eps2: float) -> Policy:
    """``(1 - eps2) pi + eps2 * uniform``."""
    if not 0.0 <= eps2 <= 1.0:
        raise ValueError("eps2 must lie in [0, 1]")
    p = policy_array(pi)
    return Policy((1.0 - eps2) * p + eps2 / p.shape[1])


def sampling_distribution(P, pi, rho0, horizon: int) -> SADist:
    """Population law of one uniformly chosen sample of a ``horizon``-step rollout.

    The average over ``t < horizon`` of the state-action marginal at step ``t``;
    this is what the empirical weights of :func:`empirical_model` estimate.
    """
    K = kernel_array(P)
    p = policy_array(pi)
    state = np.asarray(rho0, dtype=float)
    total = np.zeros_like(p)
    for _ in range(horizon):
        sa = state[:, None] * p
        total += sa
        state = np.einsum("sa,sat->t", sa, K)
    return SADist(total / horizon)
