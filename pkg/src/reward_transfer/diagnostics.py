"""Evaluation metrics and numerical certificates for the transfer system.

Metrics compare an :class:`EstimatorOutput` with the oracle under fixed
evaluation weights. Certificates evaluate the structural identities and
inequalities of the transfer theory (dual representations, quadratic growth,
first-order error channels, bound constants) on concrete instances and report
both sides of every check.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import EmpiricalModel, clip_policy_rows
from .estimators import EstimatorOutput
from .mdp import (SADist, kernel_array, compose_policy_kernel, discounted_occupancy, policy_array,
                  policy_average, resolvent_apply)
from .soft import (SoftSpec, omega, regularized_q, regularized_return, softmax_probs,
                   soft_value_iteration, state_value)
from .transfer import (AnchorSpec, Oracle, PopulationDuals, TransferProblem, anchor_average,
                       anchor_contrast, population_duals, recover_reward, source_residual,
                       target_residual)


def _w(rho) -> np.ndarray:
    return rho.weights if isinstance(rho, SADist) else np.asarray(rho, dtype=float)


def weighted_sq_norm(f, rho) -> float:
    """``||f||_rho^2 = sum rho f^2``."""
    return float((_w(rho) * np.asarray(f) ** 2).sum())


# ---------------------------------------------------------------------------
# metrics


METRIC_FIELDS = ("regret", "q2_mse_rho2", "v2_mse_unif", "r_mse_rho1", "q1_mse_rho1",
                 "v2_policy_weighted_term", "v2_policy_mismatch_term", "anchor_action_q1_mse")


@dataclass(frozen=True)
class MetricReport:
    regret: float
    q2_mse_rho2: float
    v2_mse_unif: float
    r_mse_rho1: float
    q1_mse_rho1: float
    v2_policy_weighted_term: float
    v2_policy_mismatch_term: float
    anchor_action_q1_mse: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def row(self) -> list[float]:
        return [getattr(self, f) for f in METRIC_FIELDS]


def v2_error_terms(out: EstimatorOutput, oracle: Oracle) -> tuple[np.ndarray, np.ndarray]:
    """Per-state ``sum_a pi_hat (q_hat - q*)`` and ``sum_a (pi_hat - pi*) q*``.

    They add up to ``V_hat - V*`` exactly.
    """
    pi_hat = out.pi2_hat.probs
    policy_term = (pi_hat * (out.q2_hat - oracle.q2)).sum(axis=1)
    mismatch_term = ((pi_hat - oracle.pi2.probs) * oracle.q2).sum(axis=1)
    return policy_term, mismatch_term


def v2_error_decomposition(out: EstimatorOutput, oracle: Oracle) -> tuple[float, float]:
    """State-averaged squares of the policy-weighted and mismatch terms."""
    policy_term, mismatch_term = v2_error_terms(out, oracle)
    return float(np.mean(policy_term ** 2)), float(np.mean(mismatch_term ** 2))


@dataclass(frozen=True)
class AnchorContrastReport:
    q1_mse_rho1: float
    anchor_action_q1_mse: float
    r_mse_rho1: float
    identity_error: float


def anchor_contrast_diagnostic(out: EstimatorOutput, oracle: Oracle, anchor: AnchorSpec,
                               rho1) -> AnchorContrastReport:
    """Reward error as a contrast of source-value errors.

    With a point-mass anchor, ``r_hat - r* = dq1 - dq1(., a0)``; the anchor-action
    error ``dq1(., a0)`` is weighted by the state marginal of ``rho1``.
    """
    actions = anchor.anchor_actions
    if actions is None:
        raise ValueError("the anchor-contrast diagnostic needs a point-mass anchor")
    w = _w(rho1)
    dq1 = out.q1_hat - oracle.q1
    at_anchor = dq1[np.arange(dq1.shape[0]), actions]
    identity = (out.r_hat - oracle.r) - (dq1 - at_anchor[:, None])
    return AnchorContrastReport(
        q1_mse_rho1=weighted_sq_norm(dq1, w),
        anchor_action_q1_mse=float((w.sum(axis=1) * at_anchor ** 2).sum()),
        r_mse_rho1=weighted_sq_norm(out.r_hat - oracle.r, w),
        identity_error=float(np.abs(identity).max()),
    )


def evaluate_output(out: EstimatorOutput, oracle: Oracle, problem: TransferProblem,
                    rho1, rho2) -> MetricReport:
    """Metrics of one fitted output against the oracle.

    ``rho1``/``rho2`` are the evaluation weights (population sampling laws by
    default in the harness). Regret is the exact regularized-return gap in the
    target environment with the oracle shifted reward.
    """
    if out.q2_hat.shape != oracle.q2.shape:
        raise ValueError("output and oracle shapes differ")
    reward = oracle.reward_shifted
    regret = (regularized_return(oracle.pi2, reward, problem.P2, problem.spec2, rho2)
              - regularized_return(out.pi2_hat, reward, problem.P2, problem.spec2, rho2))
    V_hat = state_value(out.q2_hat, out.pi2_hat)
    policy_term, mismatch_term = v2_error_decomposition(out, oracle)
    regret = max(regret, 0.0) if regret > -1e-9 else regret
    contrast = anchor_contrast_diagnostic(out, oracle, problem.anchor, rho1)
    return MetricReport(
        regret=float(regret),
        q2_mse_rho2=weighted_sq_norm(out.q2_hat - oracle.q2, rho2),
        v2_mse_unif=float(np.mean((V_hat - oracle.V2) ** 2)),
        r_mse_rho1=contrast.r_mse_rho1,
        q1_mse_rho1=contrast.q1_mse_rho1,
        v2_policy_weighted_term=policy_term,
        v2_policy_mismatch_term=mismatch_term,
        anchor_action_q1_mse=contrast.anchor_action_q1_mse,
    )


# ---------------------------------------------------------------------------
# certificate reports


@dataclass(frozen=True)
class Check:
    name: str
    lhs: float
    rhs: float
    tol: float
    kind: str  # "le" (lhs <= rhs + tol) or "eq" (|lhs - rhs| <= tol)
    hard: bool = True

    @property
    def passed(self) -> bool:
        if self.kind == "eq":
            return abs(self.lhs - self.rhs) <= self.tol
        return self.lhs <= self.rhs + self.tol

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


@dataclass
class CertificateReport:
    checks: list[Check] = field(default_factory=list)
    values: dict = field(default_factory=dict)

    def add(self, name: str, lhs: float, rhs: float, tol: float, kind: str = "le",
            hard: bool = True) -> Check:
        c = Check(name, float(lhs), float(rhs), float(tol), kind, hard)
        self.checks.append(c)
        return c

    def extend(self, other: "CertificateReport", prefix: str = "") -> None:
        for c in other.checks:
            self.checks.append(Check(prefix + c.name, c.lhs, c.rhs, c.tol, c.kind, c.hard))
        for k, v in other.values.items():
            self.values[prefix + k] = v

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.hard)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if c.hard and not c.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks],
                "values": self.values}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# dual certificates


@dataclass(frozen=True, eq=False)
class DualCertificates:
    l2: np.ndarray
    l1_mod: np.ndarray
    l1_coup: np.ndarray
    beta: float
    report: CertificateReport


def occupancy_ratio(P, pi, rho, gamma: float, base=None) -> float:
    """``|| d / base ||_inf`` for the discounted occupancy ``d`` started from ``rho``."""
    d = discounted_occupancy(P, pi, rho, gamma).weights
    base = _w(rho) if base is None else np.asarray(base, dtype=float)
    if ((d > 1e-15) & (base <= 0)).any():
        return math.inf
    return float(np.max(np.divide(d, base, out=np.zeros_like(d), where=base > 0)))


@dataclass(frozen=True)
class Concentrability:
    kappa1: float
    kappa2: float
    kappa12: float
    kappa12_states: float
    kappa_mu_b1: float


def concentrability(problem: TransferProblem, oracle: Oracle, rho1, rho2) -> Concentrability:
    w1, w2 = _w(rho1), _w(rho2)
    mu = problem.anchor.mu
    d2 = discounted_occupancy(problem.P2, oracle.pi2, w2, problem.spec2.gamma).weights
    d2_s, w1_s = d2.sum(axis=1), w1.sum(axis=1)

    def ratio(num, den):
        if ((num > 1e-15) & (den <= 0)).any():
            return math.inf
        return float(np.max(np.divide(num, den, out=np.zeros_like(num), where=den > 0)))

    return Concentrability(
        kappa1=occupancy_ratio(problem.P1, mu, w1, problem.gamma1),
        kappa2=ratio(d2, w2),
        kappa12=ratio(d2, w1),
        kappa12_states=ratio(d2_s, w1_s),
        kappa_mu_b1=float(np.max(mu.probs / problem.pi_b1.probs)),
    )


def dual_certificates(problem: TransferProblem, oracle: Oracle, beta: float, rho1, rho2,
                      n_directions: int = 50, seed=0, bound_q1: float | None = None,
                      bound_q2: float | None = None) -> DualCertificates:
    """Population duals with adjoint-identity and sup-norm-bound checks.

    Adjoint identities, for random directions ``h``:
    ``<l2, (I - g2 P2^{pi2*}) h>_rho2 = <q2*, h>_rho2``,
    ``<l1_mod, (I - g1 P1^mu) h>_rho1 = <q1*, h>_rho1`` and
    ``<l1_coup, (I - g1 P1^mu) h>_rho1 = beta <q1*, h>_rho1 + <l2, (I - Pi_mu) h>_rho2``.
    """
    w1, w2 = _w(rho1), _w(rho2)
    if (w1 <= 0).any() or (w2 <= 0).any():
        raise ValueError("dual certificates need strictly positive weights")
    duals = population_duals(problem, oracle, w1, w2)
    l1_coup = duals.l1_coupled(beta)
    mu, pi2 = problem.anchor.mu, oracle.pi2
    g1, g2 = problem.gamma1, problem.spec2.gamma
    rng = _rng(seed)
    report = CertificateReport()
    worst = {"l2": 0.0, "l1_mod": 0.0, "l1_coup": 0.0}
    for _ in range(n_directions):
        h = rng.standard_normal(oracle.q1.shape)
        Ah1 = h - g1 * compose_policy_kernel(problem.P1, mu, h)
        Ah2 = h - g2 * compose_policy_kernel(problem.P2, pi2, h)
        pairs = {
            "l2": ((w2 * duals.l2 * Ah2).sum(), (w2 * oracle.q2 * h).sum()),
            "l1_mod": ((w1 * duals.l1_self * Ah1).sum(), (w1 * oracle.q1 * h).sum()),
            "l1_coup": ((w1 * l1_coup * Ah1).sum(),
                        beta * (w1 * oracle.q1 * h).sum()
                        + (w2 * duals.l2 * anchor_contrast(h, mu)).sum()),
        }
        for k, (lhs, rhs) in pairs.items():
            worst[k] = max(worst[k], abs(lhs - rhs) / max(1.0, abs(rhs)))
    for k, err in worst.items():
        report.add(f"adjoint_identity_{k}", err, 0.0, 1e-7)
    kap = concentrability(problem, oracle, w1, w2)
    BQ1 = float(np.abs(oracle.q1).max()) if bound_q1 is None else bound_q1
    BQ2 = float(np.abs(oracle.q2).max()) if bound_q2 is None else bound_q2
    B_L2 = kap.kappa2 * BQ2 / (1 - g2)
    B_L1 = kap.kappa1 * BQ1 / (1 - g1)
    B_L12 = (kap.kappa1 * (kap.kappa12 + kap.kappa_mu_b1 * kap.kappa12_states)
             / ((1 - g1) * (1 - g2)) * BQ2)
    report.add("sup_l2_le_bound", np.abs(duals.l2).max(), B_L2, 1e-9 * B_L2)
    report.add("sup_l1_mod_le_bound", np.abs(duals.l1_self).max(), B_L1, 1e-9 * B_L1)
    report.add("sup_l1_cross_le_bound", np.abs(duals.l1_cross).max(), B_L12, 1e-9 * B_L12)
    report.add("sup_l1_coup_le_bound", np.abs(l1_coup).max(), beta * B_L1 + B_L12,
               1e-9 * (beta * B_L1 + B_L12))
    report.add("l2_nonnegative", -float(duals.l2.min()), 0.0, 1e-9)
    report.values.update(asdict(kap))
    report.values.update({"B_Q1": BQ1, "B_Q2": BQ2, "B_L2": B_L2, "B_L1": B_L1, "B_L12": B_L12})
    return DualCertificates(duals.l2, duals.l1_self, l1_coup, beta, report)


# ---------------------------------------------------------------------------
# quadratic growth


def population_lagrangian(q1, q2, l1, l2, problem: TransferProblem, beta: float, rho1, rho2,
                          C: float | None = None) -> float:
    """Coupled population Lagrangian with the exact kernels."""
    C = problem.C if C is None else C
    w1, w2 = _w(rho1), _w(rho2)
    b1 = source_residual(q1, problem.u_g, problem.P1, problem.anchor.mu, problem.gamma1)
    b2 = target_residual(q1, q2, problem.anchor, C, problem.P2, problem.spec2)
    return float((w1 * (0.5 * beta * q1 ** 2 + l1 * b1)).sum()
                 + (w2 * (0.5 * q2 ** 2 + l2 * b2)).sum())


def check_quadratic_growth(problem: TransferProblem, oracle: Oracle, duals: DualCertificates,
                           beta: float, rho1, rho2, trials: int = 100, seed=0,
                           scale: float = 1.0) -> CertificateReport:
    """Gap ``L(q*+D, l*) - L(q*, l*) >= (beta/2)||D1||^2 + (1/2)||D2||^2``.

    Also contrasts the first-order slope along pure ``D1`` directions with the
    coupled source dual (zero) and with the modular one substituted
    (``beta * l1_mod``; the surviving term ``<l2*, (I - Pi_mu) D1>_rho2``).
    """
    if duals.l2.min() < -1e-9:
        raise ValueError("quadratic growth needs a nonnegative target dual")
    rng = _rng(seed)
    w1, w2 = _w(rho1), _w(rho2)
    l1, l2 = duals.l1_coup, duals.l2
    base = population_lagrangian(oracle.q1, oracle.q2, l1, l2, problem, beta, w1, w2)
    report = CertificateReport()
    worst_slack = math.inf
    worst_q2_only = math.inf
    for k in range(trials):
        d1 = scale * rng.standard_normal(oracle.q1.shape)
        d2 = scale * rng.standard_normal(oracle.q2.shape)
        if k % 2:
            d1 = np.zeros_like(d1)
        gap = population_lagrangian(oracle.q1 + d1, oracle.q2 + d2, l1, l2, problem, beta,
                                    w1, w2) - base
        lower = 0.5 * beta * weighted_sq_norm(d1, w1) + 0.5 * weighted_sq_norm(d2, w2)
        slack = (gap - lower) / max(1.0, abs(base))
        worst_slack = min(worst_slack, slack)
        if k % 2:
            worst_q2_only = min(worst_q2_only, slack)
    report.add("quadratic_growth_slack", -worst_slack, 0.0, 1e-9)
    report.add("quadratic_growth_q2_only_slack", -worst_q2_only, 0.0, 1e-9)
    zero = population_lagrangian(oracle.q1, oracle.q2, l1, l2, problem, beta, w1, w2) - base
    report.add("quadratic_growth_at_zero", zero, 0.0, 1e-9, kind="eq")

    # first-order slopes along source directions, by central differences
    l1_mod = beta * duals.l1_mod
    best_mod, worst_coup = 0.0, 0.0
    for _ in range(max(1, trials // 10)):
        d1 = rng.standard_normal(oracle.q1.shape)
        d1 /= math.sqrt(weighted_sq_norm(d1, w1))
        t = 1e-5 * (1.0 + np.abs(oracle.q1).max())

        def slope(l1_used):
            up = population_lagrangian(oracle.q1 + t * d1, oracle.q2, l1_used, l2, problem, beta, w1, w2)
            dn = population_lagrangian(oracle.q1 - t * d1, oracle.q2, l1_used, l2, problem, beta, w1, w2)
            return (up - dn) / (2 * t)

        scale_ref = max(1.0, abs(base))
        best_mod = max(best_mod, abs(slope(l1_mod)) / scale_ref)
        worst_coup = max(worst_coup, abs(slope(l1)) / scale_ref)
    report.add("coupled_first_order_slope", worst_coup, 0.0, 1e-8)
    report.add("modular_first_order_slope_nonzero", 1e-3, best_mod, 0.0)
    report.values.update({"modular_slope": best_mod, "coupled_slope": worst_coup})
    return report


# ---------------------------------------------------------------------------
# first-order channels


def exact_empirical_modular(problem: TransferProblem, source: EmpiricalModel,
                            target: EmpiricalModel, u_g=None, tol: float = 1e-10):
    """Plug-in solution of the empirical equations: ``(q1_hat, q2_hat)``.

    ``b1_hat(q1_hat) = 0`` by a resolvent solve with ``P1_hat`` and
    ``b2_hat(q1_hat, q2_hat) = 0`` by soft value iteration with ``P2_hat``.
    """
    u_g = problem.u_g if u_g is None else u_g
    q1 = resolvent_apply(source.P_hat, problem.anchor.mu, problem.gamma1, u_g, tol=tol)
    r = recover_reward(q1, problem.anchor)
    q2, _ = soft_value_iteration(r + problem.C, target.P_hat, problem.spec2, tol=tol)
    return q1, q2


def source_error_decomposition(q1_hat, problem: TransferProblem, oracle: Oracle, P1_hat,
                               tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Operator and residual channels of ``q1_hat - q1*`` (they sum to it exactly).

    ``gamma1 (I - g1 P1_hat^mu)^{-1} (P1_hat^mu - P1^mu) q1*`` and
    ``-(I - g1 P1_hat^mu)^{-1} b1_hat(q1_hat)``, with ``b1_hat`` built from the true
    signal ``u_g``.
    """
    mu, g1 = problem.anchor.mu, problem.gamma1
    diff = compose_policy_kernel(P1_hat, mu, oracle.q1) - compose_policy_kernel(problem.P1, mu, oracle.q1)
    operator = g1 * resolvent_apply(P1_hat, mu, g1, diff, tol=tol)
    b1_hat = source_residual(q1_hat, problem.u_g, P1_hat, mu, g1)
    residual = -resolvent_apply(P1_hat, mu, g1, b1_hat, tol=tol)
    return operator, residual


def first_order_terms(q1_hat, q2_hat, problem: TransferProblem, oracle: Oracle, P1_hat,
                      P2_hat, coupled: bool = False) -> dict:
    """Leading terms of ``(I - g2 P2^{pi2*})(q2_hat - q2*)`` and the remainder.

    The modular expansion carries the source-residual channel
    ``-(I - Pi_mu)(I - g1 P1_hat^mu)^{-1} b1_hat(q1_hat)``; the coupled one does not.
    """
    mu, g2 = problem.anchor.mu, problem.spec2.gamma
    operator, residual = source_error_decomposition(q1_hat, problem, oracle, P1_hat)
    source_operator = anchor_contrast(operator, mu)
    source_residual_channel = anchor_contrast(residual, mu)
    target_empirical = g2 * ((np.asarray(P2_hat) - problem.P2.probs) @ omega(oracle.q2, problem.spec2))
    d2 = q2_hat - oracle.q2
    measured = d2 - g2 * compose_policy_kernel(problem.P2, oracle.pi2, d2)
    leading = source_operator + target_empirical
    if not coupled:
        leading = leading + source_residual_channel
    return {"measured": measured, "leading": leading, "remainder": measured - leading,
            "source_operator": source_operator, "source_residual": source_residual_channel,
            "target_empirical": target_empirical}


def check_first_order_channels(problem: TransferProblem, oracle: Oracle, source: EmpiricalModel,
                               target: EmpiricalModel, outputs: dict | None = None,
                               rho2=None, n_random: int = 5, seed=0) -> CertificateReport:
    """(a) source error decomposition exact; (b) modular leading terms vs the measured
    target error; (c) coupled counterpart without the source-residual channel.

    ``outputs`` maps method names to fitted :class:`EstimatorOutput`; without it
    the exact empirical plug-in solution stands in for the modular fit.
    """
    rng = _rng(seed)
    report = CertificateReport()
    w2 = np.full(oracle.q2.shape, 1.0 / oracle.q2.size) if rho2 is None else _w(rho2)
    candidates = [oracle.q1 + rng.standard_normal(oracle.q1.shape) for _ in range(n_random)]
    fits = dict(outputs or {})
    if not fits:
        q1, q2 = exact_empirical_modular(problem, source, target)
        fits["plugin"] = (q1, q2)
    for name, fit in fits.items():
        q1_hat = fit.q1_hat if isinstance(fit, EstimatorOutput) else fit[0]
        candidates.append(q1_hat)
    worst = 0.0
    for q1_hat in candidates:
        operator, residual = source_error_decomposition(q1_hat, problem, oracle, source.P_hat)
        err = np.abs(q1_hat - oracle.q1 - operator - residual).max()
        worst = max(worst, err / max(1.0, np.abs(q1_hat - oracle.q1).max()))
    report.add("source_error_decomposition", worst, 0.0, 1e-9)
    for name, fit in fits.items():
        q1_hat, q2_hat = ((fit.q1_hat, fit.q2_hat) if isinstance(fit, EstimatorOutput) else fit)
        coupled = name in ("coupled", "coupled_offset")
        terms = first_order_terms(q1_hat, q2_hat, problem, oracle, source.P_hat, target.P_hat,
                                  coupled=coupled)
        report.values[f"{name}_remainder_norm"] = math.sqrt(weighted_sq_norm(terms["remainder"], w2))
        report.values[f"{name}_measured_norm"] = math.sqrt(weighted_sq_norm(terms["measured"], w2))
        report.values[f"{name}_source_residual_channel_norm"] = (
            0.0 if coupled else math.sqrt(weighted_sq_norm(terms["source_residual"], w2)))
    return report


# ---------------------------------------------------------------------------
# bound constants


def _action_value(pi, r, P, spec: SoftSpec) -> np.ndarray:
    """``r + gamma P V^pi`` with the regularized state value ``V^pi``."""
    h = regularized_q(pi, r, P, spec)
    return np.asarray(r, dtype=float) + spec.gamma * (np.asarray(kernel_array(P)) @ policy_average(pi, h))


def regret_constant(problem: TransferProblem, oracle: Oracle, rho2, bound_q2: float) -> float:
    """``C_pi = B_Q2 sqrt(|A| kappa2) / ((1 - gamma2) tau2 sqrt(min pi2*))``."""
    w2 = _w(rho2)
    d2 = discounted_occupancy(problem.P2, oracle.pi2, w2, problem.spec2.gamma).weights
    kappa2 = float(np.max(d2 / w2))
    A = problem.n_actions
    eps = float(oracle.pi2.probs.min())
    return bound_q2 * math.sqrt(A * kappa2) / ((1 - problem.spec2.gamma) * problem.spec2.tau
                                               * math.sqrt(eps))


def kl_to_l2_pair(pi_true, pi_hat, state_weights) -> tuple[float, float]:
    """``(||log pi_true - log pi_hat||^2_{rho}, E_s KL(pi_true || pi_hat))`` with
    ``rho = state_weights x pi_true``."""
    p, q = policy_array(pi_true), policy_array(pi_hat)
    ws = np.asarray(state_weights, dtype=float)
    du = np.log(p) - np.log(q)
    lhs = float((ws[:, None] * p * du ** 2).sum())
    kl = float((ws * (p * du).sum(axis=1)).sum())
    return lhs, kl


def check_bound_constants(problem: TransferProblem, oracle: Oracle, rho1, rho2,
                          outputs: list | None = None, trials: int = 100, seed=0,
                          delta: float = 0.05, bound_scale: float = 1.5,
                          epsilon: float = 0.05) -> CertificateReport:
    """Regret conversion, resolvent stability, KL-to-L2 and softmax sensitivity.

    ``B_Q2`` is ``bound_scale`` times the largest sup-norm among ``q2*`` and the
    regularized action values of the evaluated policies, so that it bounds every
    value function the regret argument touches. Random policies in the
    regret check are softmaxes of perturbed ``q2*`` tables.
    """
    rng = _rng(seed)
    w1, w2 = _w(rho1), _w(rho2)
    spec2 = problem.spec2
    report = CertificateReport()
    kap = concentrability(problem, oracle, w1, w2)
    report.values.update(asdict(kap))
    report.values["delta"] = delta
    reward = oracle.reward_shifted

    # (i) regret <= C_pi ||q2_hat - q2*||_rho2
    q2_hats = [o.q2_hat for o in (outputs or [])]
    q2_hats += [oracle.q2 + s * rng.standard_normal(oracle.q2.shape)
                for s in np.geomspace(1e-3, 3.0, trials)]
    J_star = regularized_return(oracle.pi2, reward, problem.P2, spec2, w2)
    pis = [softmax_probs(q, spec2) for q in q2_hats]
    sup_values = [np.abs(oracle.q2).max()] + [np.abs(_action_value(p, reward, problem.P2, spec2)).max()
                                              for p in pis]
    BQ2 = bound_scale * float(max(sup_values))
    C_pi = regret_constant(problem, oracle, w2, BQ2)
    report.values.update({"B_Q2": BQ2, "C_pi": C_pi})
    worst = -math.inf
    for q, p in zip(q2_hats, pis):
        regret = J_star - regularized_return(p, reward, problem.P2, spec2, w2)
        rhs = C_pi * math.sqrt(weighted_sq_norm(q - oracle.q2, w2))
        worst = max(worst, regret - rhs)
        if regret < -1e-9 * max(1.0, abs(J_star)):
            report.add("regret_nonnegative", -regret, 0.0, 1e-9 * max(1.0, abs(J_star)))
    report.add("regret_conversion", worst, 0.0, 1e-9 * max(1.0, abs(J_star)))

    # (ii) resolvent L2 stability for the source and target evaluation operators
    for name, P, pi, gamma, w in (("source", problem.P1, problem.anchor.mu, problem.gamma1, w1),
                                  ("target", problem.P2, oracle.pi2, spec2.gamma, w2)):
        kappa = occupancy_ratio(P, pi, w, gamma)
        worst = -math.inf
        for k in range(trials):
            f = rng.standard_normal(w.shape) if k else np.full(w.shape, 1.0)
            h = resolvent_apply(P, pi, gamma, f)
            lhs = math.sqrt(weighted_sq_norm(h, w))
            rhs = math.sqrt(kappa) / (1 - gamma) * math.sqrt(weighted_sq_norm(f, w))
            worst = max(worst, (lhs - rhs) / max(1.0, rhs))
        report.add(f"resolvent_stability_{name}", worst, 0.0, 1e-9)

    # (iii) KL -> L2 for clipped policy pairs
    S, A = oracle.q1.shape
    eps = min(epsilon, 1.0 / A)
    state_w = w1.sum(axis=1)
    worst = -math.inf
    for _ in range(trials):
        p = clip_policy_rows(rng.dirichlet(np.ones(A), size=S), eps)
        q = clip_policy_rows(rng.dirichlet(np.ones(A), size=S), eps)
        lhs, kl = kl_to_l2_pair(p, q, state_w)
        worst = max(worst, lhs - 2.0 / eps * kl)
    lhs, kl = kl_to_l2_pair(problem.pi_b1, problem.pi_b1, state_w)
    report.add("kl_to_l2_identical_policies", lhs, 0.0, 1e-15, kind="eq")
    report.add("kl_to_l2", worst, 0.0, 1e-12)

    # (iv) softmax sensitivity
    worst = -math.inf
    for _ in range(trials):
        q = oracle.q2 + rng.standard_normal(oracle.q2.shape)
        q_alt = q + rng.standard_normal(q.shape) * rng.choice([1e-3, 1e-1, 1.0])
        lhs = np.abs(softmax_probs(q, spec2) - softmax_probs(q_alt, spec2)).sum(axis=1)
        rhs = math.sqrt(A) / spec2.tau * np.sqrt(((q - q_alt) ** 2).sum(axis=1))
        worst = max(worst, float(np.max(lhs - rhs)))
    report.add("softmax_sensitivity", worst, 0.0, 1e-12)
    return report


# ---------------------------------------------------------------------------
# orthogonality of the profiled residual


def _fd_step(x) -> float:
    return 1e-5 * (1.0 + float(np.abs(x).max()))


def check_orthogonality(problem: TransferProblem, oracle: Oracle, n_directions: int = 10,
                        seed=0, correction_sign: float = 1.0) -> CertificateReport:
    """Directional derivatives in ``q1`` at the truth: profiled vs plain target residual.

    The profiled residual ``b2 + s (I - Pi_mu)(I - g1 P1^mu)^{-1} b1`` with
    ``s = correction_sign`` (``+1`` is the correct one) must have a vanishing
    derivative; the plain ``b2`` derivative is reported as a contrast.
    """
    rng = _rng(seed)
    mu, g1 = problem.anchor.mu, problem.gamma1

    def profiled(q1):
        b1 = source_residual(q1, problem.u_g, problem.P1, mu, g1)
        b2 = target_residual(q1, oracle.q2, problem.anchor, problem.C, problem.P2, problem.spec2)
        return b2 + correction_sign * anchor_contrast(resolvent_apply(problem.P1, mu, g1, b1, tol=1e-13), mu)

    def plain(q1):
        return target_residual(q1, oracle.q2, problem.anchor, problem.C, problem.P2, problem.spec2)

    t = _fd_step(oracle.q1)
    worst_rel, weakest_plain = 0.0, math.inf
    for _ in range(n_directions):
        h = rng.standard_normal(oracle.q1.shape)
        h /= np.abs(h).max()
        d_prof = (profiled(oracle.q1 + t * h) - profiled(oracle.q1 - t * h)) / (2 * t)
        d_plain = (plain(oracle.q1 + t * h) - plain(oracle.q1 - t * h)) / (2 * t)
        plain_norm = float(np.abs(d_plain).max())
        worst_rel = max(worst_rel, float(np.abs(d_prof).max()) / max(plain_norm, 1e-300))
        weakest_plain = min(weakest_plain, plain_norm)
    report = CertificateReport()
    report.add("profiled_derivative_relative", worst_rel, 0.0, 1e-6)
    report.add("plain_derivative_lower", 0.1, weakest_plain, 0.0)
    return report


# ---------------------------------------------------------------------------
# exact identities


def check_identities(problem: TransferProblem, oracle: Oracle, outputs=(), rho1=None) -> CertificateReport:
    """Anchor normalization, reward-contrast and ``V2`` reconstruction identities."""
    report = CertificateReport()
    mu_r = policy_average(problem.anchor.mu, oracle.r)
    report.add("anchor_normalization", float(np.abs(mu_r - problem.anchor.g).max()), 0.0, 1e-10)
    w1 = np.full(oracle.q1.shape, 1.0 / oracle.q1.size) if rho1 is None else _w(rho1)
    for k, out in enumerate(outputs):
        tag = getattr(out, "method", str(k))
        if problem.anchor.anchor_actions is not None:
            c = anchor_contrast_diagnostic(out, oracle, problem.anchor, w1)
            report.add(f"reward_contrast_{tag}_{k}", c.identity_error, 0.0, 1e-10)
        policy_term, mismatch_term = v2_error_terms(out, oracle)
        direct = state_value(out.q2_hat, out.pi2_hat) - oracle.V2
        report.add(f"v2_reconstruction_{tag}_{k}",
                   float(np.abs(policy_term + mismatch_term - direct).max()), 0.0, 1e-9)
    return report


def certify_problem(problem: TransferProblem, oracle: Oracle, rho1, rho2, beta: float = 100.0,
                    source: EmpiricalModel | None = None, target: EmpiricalModel | None = None,
                    outputs=(), trials: int = 100, seed=0) -> CertificateReport:
    """Run every certificate on one instance and merge the reports."""
    report = CertificateReport()
    report.extend(check_identities(problem, oracle, outputs, rho1), "identities.")
    report.extend(check_orthogonality(problem, oracle, seed=seed), "orthogonality.")
    duals = dual_certificates(problem, oracle, beta, rho1, rho2, seed=seed)
    report.extend(duals.report, "duals.")
    report.extend(check_quadratic_growth(problem, oracle, duals, beta, rho1, rho2, trials=trials,
                                         seed=seed), "growth.")
    if source is not None and target is not None:
        fitted = {getattr(o, "method", str(k)): o for k, o in enumerate(outputs)}
        report.extend(check_first_order_channels(problem, oracle, source, target, fitted or None,
                                                 rho2, seed=seed), "channels.")
    report.extend(check_bound_constants(problem, oracle, rho1, rho2, list(outputs), trials=trials,
                                        seed=seed), "bounds.")
    return report
