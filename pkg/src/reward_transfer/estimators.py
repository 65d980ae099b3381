"""Empirical saddle objectives and the Modular, Coupled and Coupled-Offset estimators.

All three estimators optimize tabular primal tables ``(q1, q2)`` and dual tables
``(l1, l2)`` of the empirical Lagrangian

    src(beta) = E_rho1[(beta/2) q1^2 + l1 * b1_hat(q1)]
    tgt       = E_rho2[(1/2) q2^2 + l2 * b2_hat(q1, q2)]

with Adam: each round takes ``dual_steps_per_round`` ascent steps on the duals,
then ``primal_steps_per_round`` descent steps on the primal tables. Because the
kernels enter only through ``E[. | s, a]``, averaging the per-sample objectives
over a dataset equals the Lagrangian assembled from its empirical model; the
optimizer works on the latter.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .data import EmpiricalModel, TransitionDataset, empirical_model, estimate_behavior_policy
from .mdp import Policy, policy_average
from .soft import SoftSpec, omega, softmax_policy
from .transfer import (AnchorSpec, Oracle, TransferProblem, anchor_contrast, population_duals,
                       recover_reward, source_residual, source_signal, target_residual)

METHODS = ("modular", "coupled", "coupled_offset")


class DivergenceError(RuntimeError):
    """A saddle variable became non-finite during training."""


@dataclass(frozen=True)
class OptimConfig:
    lr_q: float = 1e-3
    lr_l: float = 1e-4
    dual_steps_per_round: int = 10
    primal_steps_per_round: int = 1
    source_rounds: int = 40_000
    target_rounds: int = 70_000
    joint_rounds: int = 40_000
    beta: float = 100.0
    init_noise_sd: float = 1.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 1000
    warm_start_offset_duals: bool = False
    init_reference: str = "zero"

    def __post_init__(self):
        if self.lr_q < 0 or self.lr_l < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.primal_steps_per_round < 1 or self.dual_steps_per_round < self.primal_steps_per_round:
            raise ValueError("need primal_steps >= 1 and dual_steps >= primal_steps")
        if min(self.source_rounds, self.target_rounds, self.joint_rounds) < 0:
            raise ValueError("round counts must be nonnegative")
        if self.beta < 0 or self.init_noise_sd < 0:
            raise ValueError("beta and init_noise_sd must be nonnegative")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be positive")
        if self.init_reference not in ("zero", "oracle"):
            raise ValueError("init_reference must be 'zero' or 'oracle'")


@dataclass
class SaddleVars:
    q1: np.ndarray
    l1: np.ndarray
    q2: np.ndarray
    l2: np.ndarray

    def copy(self) -> "SaddleVars":
        return SaddleVars(self.q1.copy(), self.l1.copy(), self.q2.copy(), self.l2.copy())

    @classmethod
    def noise(cls, n_states: int, n_actions: int, sd: float, seed: int, stream: int = 0) -> "SaddleVars":
        """Independent ``Normal(0, sd^2)`` tables around the zero reference."""
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))
        return cls(*(sd * rng.standard_normal((n_states, n_actions)) for _ in range(4)))


@dataclass(frozen=True, eq=False)
class ReferenceInit:
    """Centre of the initialization noise.

    ``l1_source`` is the source dual of the unit-weight modular stage and
    ``l1_joint`` that of the joint objective at the configured ``beta``.
    """

    q1: np.ndarray
    l1_source: np.ndarray
    l1_joint: np.ndarray
    q2: np.ndarray
    l2: np.ndarray

    @classmethod
    def zero(cls, n_states: int, n_actions: int) -> "ReferenceInit":
        z = np.zeros((n_states, n_actions))
        return cls(z, z, z, z, z)

    @classmethod
    def from_oracle(cls, problem: TransferProblem, oracle: Oracle, rho1, rho2,
                    beta: float, P1=None, P2=None) -> "ReferenceInit":
        """Oracle primal tables and their dual certificates (population saddle point)."""
        duals = population_duals(problem, oracle, rho1, rho2, P1, P2)
        return cls(oracle.q1, duals.l1_self, duals.l1_coupled(beta), oracle.q2, duals.l2)


def _reference(problem: TransferProblem, cfg: OptimConfig, reference: ReferenceInit | None):
    if cfg.init_reference == "zero":
        return ReferenceInit.zero(problem.n_states, problem.n_actions)
    if reference is None:
        raise ValueError("init_reference='oracle' needs a ReferenceInit")
    return reference


TRACE_FIELDS = ("round", "objective", "b1_norm", "b2_norm")


@dataclass(frozen=True, eq=False)
class EstimatorOutput:
    method: str
    q1_hat: np.ndarray
    r_hat: np.ndarray
    C_used: float
    q2_hat: np.ndarray
    pi2_hat: Policy
    l1_hat: np.ndarray
    l2_hat: np.ndarray
    trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def to_dict(self) -> dict:
        def table(x):
            return {"n_states": x.shape[0], "n_actions": x.shape[1], "values": x.ravel().tolist()}
        return {"method": self.method, "C_used": self.C_used,
                "q1_hat": table(self.q1_hat), "r_hat": table(self.r_hat), "q2_hat": table(self.q2_hat),
                "pi2_hat": self.pi2_hat.to_dict(), "l1_hat": table(self.l1_hat),
                "l2_hat": table(self.l2_hat)}

    @classmethod
    def from_dict(cls, d: dict, trace=None) -> "EstimatorOutput":
        def table(t):
            return np.asarray(t["values"], dtype=float).reshape(t["n_states"], t["n_actions"])
        return cls(d["method"], table(d["q1_hat"]), table(d["r_hat"]), float(d["C_used"]),
                   table(d["q2_hat"]), Policy.from_dict(d["pi2_hat"]), table(d["l1_hat"]),
                   table(d["l2_hat"]), np.zeros((0, 4)) if trace is None else trace)

    def save(self, path) -> tuple[Path, Path]:
        """Write ``<path>.json`` (tables) and ``<path>.trace.csv``."""
        path = Path(path)
        json_path = path.with_suffix(".json")
        trace_path = path.with_suffix(".trace.csv")
        json_path.write_text(json.dumps(self.to_dict()))
        with open(trace_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_FIELDS)
            for row in self.trace:
                w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
        return json_path, trace_path

    @classmethod
    def load(cls, path) -> "EstimatorOutput":
        path = Path(path)
        trace = np.loadtxt(path.with_suffix(".trace.csv"), delimiter=",", skiprows=1, ndmin=2)
        return cls.from_dict(json.loads(path.with_suffix(".json").read_text()),
                             trace.reshape(-1, 4))


# ---------------------------------------------------------------------------
# per-sample objectives


def sample_source_objective(v: SaddleVars, s, a, s_next, u_g, mu, gamma1: float, beta: float):
    """``(beta/2) q1(s,a)^2 + l1(s,a) (u_g(s,a) + gamma1 (mu q1)(s') - q1(s,a))``."""
    mu = mu.probs if isinstance(mu, Policy) else np.asarray(mu)
    q1_next = policy_average(mu, v.q1)[s_next]
    resid = u_g[s, a] + gamma1 * q1_next - v.q1[s, a]
    return 0.5 * beta * v.q1[s, a] ** 2 + v.l1[s, a] * resid


def sample_target_objective(v: SaddleVars, s, a, s_next, mu, g, C: float, spec2: SoftSpec):
    """``q2(s,a)^2 / 2 + l2(s,a) ((I - Pi_mu) q1 (s,a) + g(s) + C + gamma2 Omega(q2)(s') - q2(s,a))``."""
    mu = mu.probs if isinstance(mu, Policy) else np.asarray(mu)
    reward = anchor_contrast(v.q1, mu)[s, a] + np.asarray(g)[s] + C
    resid = reward + spec2.gamma * omega(v.q2, spec2)[s_next] - v.q2[s, a]
    return 0.5 * v.q2[s, a] ** 2 + v.l2[s, a] * resid


def empirical_source_residual(q1, u_g, model: EmpiricalModel, mu, gamma1: float) -> np.ndarray:
    """``b1_hat``; entries of unvisited pairs are meaningless and carry zero weight."""
    return source_residual(q1, u_g, model.P_hat, mu, gamma1)


def empirical_target_residual(q1, q2, model: EmpiricalModel, anchor: AnchorSpec, C: float,
                              spec2: SoftSpec) -> np.ndarray:
    return target_residual(q1, q2, anchor, C, model.P_hat, spec2)


def empirical_lagrangian(v: SaddleVars, source: EmpiricalModel | None, target: EmpiricalModel | None,
                         problem: TransferProblem, u_g, beta: float) -> float:
    """Assembled empirical Lagrangian; a ``None`` model drops that block."""
    mu = problem.anchor.mu.probs
    total = 0.0
    if source is not None:
        w = source.rho_hat.weights
        b1 = empirical_source_residual(v.q1, u_g, source, mu, problem.gamma1)
        total += float((w * (0.5 * beta * v.q1 ** 2 + v.l1 * b1)).sum())
    if target is not None:
        w = target.rho_hat.weights
        b2 = empirical_target_residual(v.q1, v.q2, target, problem.anchor, problem.C,
                                       problem.spec2)
        total += float((w * (0.5 * v.q2 ** 2 + v.l2 * b2)).sum())
    return total


# ---------------------------------------------------------------------------
# optimizer kernel


def _padded_rows(P_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise sparse form of an ``(S, A, S)`` kernel: (index, prob) padded with prob 0."""
    S, A, _ = P_hat.shape
    flat = P_hat.reshape(S * A, S)
    nnz = (flat > 0).sum(axis=1)
    width = max(1, int(nnz.max()))
    idx = np.zeros((S * A, width), dtype=np.int64)
    val = np.zeros((S * A, width))
    for i in range(S * A):
        cols = np.nonzero(flat[i])[0]
        idx[i, :cols.size] = cols
        val[i, :cols.size] = flat[i, cols]
    return idx, val


@numba.njit(cache=True)
def _soft(q, tau, logref, om, pi):
    S, A = q.shape
    for s in range(S):
        m = -np.inf
        for a in range(A):
            z = q[s, a] / tau + logref[s, a]
            if z > m:
                m = z
        tot = 0.0
        for a in range(A):
            e = np.exp(q[s, a] / tau + logref[s, a] - m)
            pi[s, a] = e
            tot += e
        for a in range(A):
            pi[s, a] /= tot
        om[s] = tau * (m + np.log(tot))


@numba.njit(cache=True)
def _residuals(q1, q2, u, mu, g, C, g1, g2, tau, logref, i1, v1, i2, v2, b1, b2, mq1, om, pi2,
               src, tgt):
    S, A = q1.shape
    for s in range(S):
        acc = 0.0
        for a in range(A):
            acc += mu[s, a] * q1[s, a]
        mq1[s] = acc
    if src:
        for s in range(S):
            for a in range(A):
                row = s * A + a
                acc = 0.0
                for j in range(i1.shape[1]):
                    acc += v1[row, j] * mq1[i1[row, j]]
                b1[s, a] = u[s, a] + g1 * acc - q1[s, a]
    if tgt:
        _soft(q2, tau, logref, om, pi2)
        for s in range(S):
            for a in range(A):
                row = s * A + a
                acc = 0.0
                for j in range(i2.shape[1]):
                    acc += v2[row, j] * om[i2[row, j]]
                b2[s, a] = q1[s, a] - mq1[s] + g[s] + C + g2 * acc - q2[s, a]


@numba.njit(cache=True)
def _adam(x, grad, m, v, mask, t, lr, beta1, beta2, eps, sign):
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    S, A = x.shape
    for s in range(S):
        for a in range(A):
            if mask[s, a]:
                gr = grad[s, a]
                m[s, a] = beta1 * m[s, a] + (1.0 - beta1) * gr
                v[s, a] = beta2 * v[s, a] + (1.0 - beta2) * gr * gr
                x[s, a] -= sign * lr * (m[s, a] / bc1) / (np.sqrt(v[s, a] / bc2) + eps)


@numba.njit(cache=True)
def _primal_grads(q1, l1, q2, l2, rho1, mu, i1, v1, g1, beta, rho2, i2, v2, g2, pi2,
                  src, tgt, train_q1, y1, y2, gq1, gq2):
    """Gradients of the Lagrangian in ``q1`` and ``q2``; ``pi2`` must be the softmax of ``q2``."""
    S, A = q1.shape
    gq1[:, :] = 0.0
    gq2[:, :] = 0.0
    if src and train_q1:
        y1[:] = 0.0
        for s in range(S):
            for a in range(A):
                row = s * A + a
                w = rho1[s, a] * l1[s, a]
                for j in range(i1.shape[1]):
                    y1[i1[row, j]] += w * v1[row, j]
        for s in range(S):
            for a in range(A):
                gq1[s, a] = (beta * rho1[s, a] * q1[s, a] - rho1[s, a] * l1[s, a]
                             + g1 * mu[s, a] * y1[s])
    if tgt:
        y2[:] = 0.0
        for s in range(S):
            tot = 0.0
            for a in range(A):
                row = s * A + a
                w = rho2[s, a] * l2[s, a]
                tot += w
                for j in range(i2.shape[1]):
                    y2[i2[row, j]] += w * v2[row, j]
            if train_q1:
                for a in range(A):
                    gq1[s, a] += rho2[s, a] * l2[s, a] - mu[s, a] * tot
        for s in range(S):
            for a in range(A):
                gq2[s, a] = (rho2[s, a] * q2[s, a] - rho2[s, a] * l2[s, a]
                             + g2 * pi2[s, a] * y2[s])


@numba.njit(cache=True)
def _run(q1, l1, q2, l2, mq1_mask, ml1, mq2, ml2,
         rho1, u, mu, i1, v1, g1, beta,
         rho2, g, C, i2, v2, g2, tau, logref,
         src, tgt, train_q1, rounds, dual_steps, primal_steps,
         lr_q, lr_l, beta1, beta2, eps, interval, trace, round_offset):
    S, A = q1.shape
    b1 = np.zeros((S, A))
    b2 = np.zeros((S, A))
    mq1 = np.zeros(S)
    om = np.zeros(S)
    pi2 = np.zeros((S, A))
    gl1 = np.zeros((S, A))
    gl2 = np.zeros((S, A))
    gq1 = np.zeros((S, A))
    gq2 = np.zeros((S, A))
    y1 = np.zeros(S)
    y2 = np.zeros(S)
    m_l1 = np.zeros((S, A)); s_l1 = np.zeros((S, A))
    m_l2 = np.zeros((S, A)); s_l2 = np.zeros((S, A))
    m_q1 = np.zeros((S, A)); s_q1 = np.zeros((S, A))
    m_q2 = np.zeros((S, A)); s_q2 = np.zeros((S, A))
    t_dual = 0
    t_primal = 0
    n_trace = 0
    for rnd in range(rounds):
        # the dual gradient rho * b does not depend on the duals
        _residuals(q1, q2, u, mu, g, C, g1, g2, tau, logref, i1, v1, i2, v2, b1, b2, mq1, om,
                   pi2, src, tgt)
        if src:
            for s in range(S):
                for a in range(A):
                    gl1[s, a] = rho1[s, a] * b1[s, a]
        if tgt:
            for s in range(S):
                for a in range(A):
                    gl2[s, a] = rho2[s, a] * b2[s, a]
        for _ in range(dual_steps):
            t_dual += 1
            if src:
                _adam(l1, gl1, m_l1, s_l1, ml1, t_dual, lr_l, beta1, beta2, eps, -1.0)
            if tgt:
                _adam(l2, gl2, m_l2, s_l2, ml2, t_dual, lr_l, beta1, beta2, eps, -1.0)
        for k in range(primal_steps):
            if k > 0:
                _residuals(q1, q2, u, mu, g, C, g1, g2, tau, logref, i1, v1, i2, v2, b1, b2, mq1,
                           om, pi2, src, tgt)
            elif tgt:
                _soft(q2, tau, logref, om, pi2)
            t_primal += 1
            _primal_grads(q1, l1, q2, l2, rho1, mu, i1, v1, g1, beta, rho2, i2, v2, g2, pi2,
                          src, tgt, train_q1, y1, y2, gq1, gq2)
            if train_q1:
                _adam(q1, gq1, m_q1, s_q1, mq1_mask, t_primal, lr_q, beta1, beta2, eps, 1.0)
            if tgt:
                _adam(q2, gq2, m_q2, s_q2, mq2, t_primal, lr_q, beta1, beta2, eps, 1.0)
        finite = True
        for s in range(S):
            for a in range(A):
                if not (np.isfinite(q1[s, a]) and np.isfinite(q2[s, a])
                        and np.isfinite(l1[s, a]) and np.isfinite(l2[s, a])):
                    finite = False
        if not finite:
            return rnd
        if (rnd + 1) % interval == 0:
            _residuals(q1, q2, u, mu, g, C, g1, g2, tau, logref, i1, v1, i2, v2, b1, b2, mq1, om,
                       pi2, src, tgt)
            obj = 0.0
            n1 = 0.0
            n2 = 0.0
            for s in range(S):
                for a in range(A):
                    if src:
                        obj += rho1[s, a] * (0.5 * beta * q1[s, a] ** 2 + l1[s, a] * b1[s, a])
                        n1 += rho1[s, a] * b1[s, a] ** 2
                    if tgt:
                        obj += rho2[s, a] * (0.5 * q2[s, a] ** 2 + l2[s, a] * b2[s, a])
                        n2 += rho2[s, a] * b2[s, a] ** 2
            trace[n_trace, 0] = round_offset + rnd + 1
            trace[n_trace, 1] = obj
            trace[n_trace, 2] = np.sqrt(n1)
            trace[n_trace, 3] = np.sqrt(n2)
            n_trace += 1
    return -1


@dataclass(frozen=True, eq=False)
class SaddleSpec:
    """Which blocks of the empirical Lagrangian are active and what they are built from."""

    problem: TransferProblem
    u_g: np.ndarray
    source: EmpiricalModel | None
    target: EmpiricalModel | None
    beta: float
    train_q1: bool = True


def _kernel_args(spec: SaddleSpec) -> dict:
    problem = spec.problem
    if problem.C is None:
        raise ValueError("the reward shift C must be set before fitting")
    S, A = problem.n_states, problem.n_actions
    src, tgt = spec.source is not None, spec.target is not None
    if not (src or tgt):
        raise ValueError("at least one block must be active")
    for name, model in (("source", spec.source), ("target", spec.target)):
        if model is not None and not model.visited.any():
            raise ValueError(f"{name} dataset visits no state-action pair")
    empty = np.zeros((S, A), dtype=bool)
    zeros = np.zeros((S, A))
    no_rows = (np.zeros((S * A, 1), np.int64), np.zeros((S * A, 1)))
    m1 = spec.source.visited if src else empty
    m2 = spec.target.visited if tgt else empty
    i1, v1 = _padded_rows(spec.source.P_hat) if src else no_rows
    i2, v2 = _padded_rows(spec.target.P_hat) if tgt else no_rows
    return dict(m1=m1, m2=m2, q1_mask=(m1 | m2) if spec.train_q1 else empty,
                rho1=spec.source.rho_hat.weights if src else zeros,
                rho2=spec.target.rho_hat.weights if tgt else zeros,
                u=np.asarray(spec.u_g, dtype=float), mu=problem.anchor.mu.probs,
                i1=i1, v1=v1, g1=problem.gamma1, beta=float(spec.beta),
                g=problem.anchor.g, C=float(problem.C), i2=i2, v2=v2, g2=problem.spec2.gamma,
                tau=problem.spec2.tau, logref=problem.spec2.log_ref, src=src, tgt=tgt)


def lagrangian_gradients(v: SaddleVars, spec: SaddleSpec) -> SaddleVars:
    """Analytic gradients of :func:`empirical_lagrangian` (as used by the optimizer)."""
    k = _kernel_args(spec)
    S, A = v.q1.shape
    b1, b2 = np.zeros((S, A)), np.zeros((S, A))
    mq1, om, pi2 = np.zeros(S), np.zeros(S), np.zeros((S, A))
    _residuals(v.q1, v.q2, k["u"], k["mu"], k["g"], k["C"], k["g1"], k["g2"], k["tau"], k["logref"],
               k["i1"], k["v1"], k["i2"], k["v2"], b1, b2, mq1, om, pi2, k["src"], k["tgt"])
    gq1, gq2 = np.zeros((S, A)), np.zeros((S, A))
    _primal_grads(v.q1, v.l1, v.q2, v.l2, k["rho1"], k["mu"], k["i1"], k["v1"], k["g1"], k["beta"],
                  k["rho2"], k["i2"], k["v2"], k["g2"], pi2, k["src"], k["tgt"], spec.train_q1,
                  np.zeros(S), np.zeros(S), gq1, gq2)
    return SaddleVars(gq1, k["rho1"] * b1, gq2, k["rho2"] * b2)


def saddle_optimize(spec: SaddleSpec, init: SaddleVars, cfg: OptimConfig, rounds: int,
                    round_offset: int = 0) -> tuple[SaddleVars, np.ndarray]:
    """Run ``rounds`` Adam rounds from ``init``; returns the final tables and the trace.

    Only pairs visited by a block's dataset are updated: ``l1`` on the source
    mask, ``l2`` and ``q2`` on the target mask, ``q1`` on the union of the masks
    of the active blocks in which it is trained.
    """
    k = _kernel_args(spec)
    v = init.copy()
    trace = np.zeros((rounds // cfg.checkpoint_interval, 4))
    bad = _run(v.q1, v.l1, v.q2, v.l2, k["q1_mask"], k["m1"], k["m2"], k["m2"],
               k["rho1"], k["u"], k["mu"], k["i1"], k["v1"], k["g1"], k["beta"],
               k["rho2"], k["g"], k["C"], k["i2"], k["v2"], k["g2"], k["tau"], k["logref"],
               k["src"], k["tgt"], spec.train_q1, rounds, cfg.dual_steps_per_round,
               cfg.primal_steps_per_round, cfg.lr_q, cfg.lr_l, cfg.adam_beta1, cfg.adam_beta2,
               cfg.adam_eps, cfg.checkpoint_interval, trace, round_offset)
    if bad >= 0:
        raise DivergenceError(f"non-finite saddle variable at round {round_offset + bad + 1}")
    return v, trace


# ---------------------------------------------------------------------------
# estimators


def _as_model(data) -> EmpiricalModel:
    return data if isinstance(data, EmpiricalModel) else empirical_model(data)


def source_signal_from_data(source_data, problem: TransferProblem, pi_b1_hat: Policy | None = None,
                            epsilon_clip: float = 1e-3) -> np.ndarray:
    """``u_g`` from an estimated behavior policy.

    A raw dataset gives the clipped frequency estimate; an :class:`EmpiricalModel`
    (e.g. population weights) falls back to the true ``pi_b1`` unless
    ``pi_b1_hat`` is given.
    """
    if pi_b1_hat is None:
        if isinstance(source_data, TransitionDataset):
            pi_b1_hat = estimate_behavior_policy(source_data, epsilon_clip)
        else:
            pi_b1_hat = problem.pi_b1
    return source_signal(pi_b1_hat, problem.pi_ref1, problem.anchor.g)


def _output(method: str, v: SaddleVars, problem: TransferProblem, trace: np.ndarray) -> EstimatorOutput:
    return EstimatorOutput(method, v.q1, recover_reward(v.q1, problem.anchor), float(problem.C),
                           v.q2, softmax_policy(v.q2, problem.spec2), v.l1, v.l2, trace)


def fit_modular(source_data, target_data, problem: TransferProblem, cfg: OptimConfig,
                pi_b1_hat: Policy | None = None,
                reference: ReferenceInit | None = None) -> EstimatorOutput:
    """Stage 1 fits ``(q1, l1)`` on the source block (unit quadratic weight);
    stage 2 freezes ``q1`` and fits ``(q2, l2)`` on the target block."""
    src, tgt = _as_model(source_data), _as_model(target_data)
    u_g = source_signal_from_data(source_data, problem, pi_b1_hat)
    ref = _reference(problem, cfg, reference)
    n = SaddleVars.noise(problem.n_states, problem.n_actions, cfg.init_noise_sd, cfg.seed, 0)
    init = SaddleVars(ref.q1 + n.q1, ref.l1_source + n.l1, ref.q2 + n.q2, ref.l2 + n.l2)
    v, tr1 = saddle_optimize(SaddleSpec(problem, u_g, src, None, 1.0), init, cfg, cfg.source_rounds)
    v, tr2 = saddle_optimize(SaddleSpec(problem, u_g, None, tgt, 1.0, train_q1=False), v, cfg,
                             cfg.target_rounds, round_offset=cfg.source_rounds)
    return _output("modular", v, problem, np.vstack([tr1, tr2]))


def fit_coupled(source_data, target_data, problem: TransferProblem, cfg: OptimConfig,
                pi_b1_hat: Policy | None = None,
                reference: ReferenceInit | None = None) -> EstimatorOutput:
    """Joint saddle over all four tables with source weight ``cfg.beta``."""
    src, tgt = _as_model(source_data), _as_model(target_data)
    u_g = source_signal_from_data(source_data, problem, pi_b1_hat)
    ref = _reference(problem, cfg, reference)
    n = SaddleVars.noise(problem.n_states, problem.n_actions, cfg.init_noise_sd, cfg.seed, 0)
    init = SaddleVars(ref.q1 + n.q1, ref.l1_joint + n.l1, ref.q2 + n.q2, ref.l2 + n.l2)
    v, tr = saddle_optimize(SaddleSpec(problem, u_g, src, tgt, cfg.beta), init, cfg, cfg.joint_rounds)
    return _output("coupled", v, problem, tr)


def fit_coupled_offset(source_data, target_data, problem: TransferProblem, cfg: OptimConfig,
                       pi_b1_hat: Policy | None = None, reference: ReferenceInit | None = None,
                       modular: EstimatorOutput | None = None) -> EstimatorOutput:
    """Modular fit followed by a joint correction ``q = q_mod + dq`` with ``dq`` starting at 0.

    Optimizing the offsets with fresh Adam state is the same as optimizing the
    primal tables started from the Modular output. Duals are re-initialized as
    in :func:`fit_coupled` (fresh noise) unless ``cfg.warm_start_offset_duals``.
    A precomputed ``modular`` output on the same data and config may be passed
    to skip refitting it.
    """
    src, tgt = _as_model(source_data), _as_model(target_data)
    u_g = source_signal_from_data(source_data, problem, pi_b1_hat)
    if modular is None:
        modular = fit_modular(source_data, target_data, problem, cfg, pi_b1_hat, reference)
    if cfg.warm_start_offset_duals:
        l1, l2 = modular.l1_hat, modular.l2_hat
    else:
        ref = _reference(problem, cfg, reference)
        n = SaddleVars.noise(problem.n_states, problem.n_actions, cfg.init_noise_sd, cfg.seed, 1)
        l1, l2 = ref.l1_joint + n.l1, ref.l2 + n.l2
    init = SaddleVars(modular.q1_hat.copy(), l1.copy(), modular.q2_hat.copy(), l2.copy())
    offset = cfg.source_rounds + cfg.target_rounds
    v, tr = saddle_optimize(SaddleSpec(problem, u_g, src, tgt, cfg.beta), init, cfg,
                            cfg.joint_rounds, round_offset=offset)
    return _output("coupled_offset", v, problem, np.vstack([modular.trace, tr]))


def fit(method: str, source_data, target_data, problem: TransferProblem, cfg: OptimConfig,
        pi_b1_hat: Policy | None = None, reference: ReferenceInit | None = None) -> EstimatorOutput:
    fns = {"modular": fit_modular, "coupled": fit_coupled, "coupled_offset": fit_coupled_offset}
    if method not in fns:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return fns[method](source_data, target_data, problem, cfg, pi_b1_hat, reference)


def population_model(P, rho) -> EmpiricalModel:
    """Expectation-weighted "data": exact kernel and weights."""
    return EmpiricalModel.from_population(P, rho)
