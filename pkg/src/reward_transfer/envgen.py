"""Source/target environment pairs with outcome labels and an expert source policy.

The generator stands in for a tabularized clinical simulator: it reproduces the
interface statistics (state/action counts, sparse support, outcome labels, the
per-state-action total-variation size of the source/target shift) rather than
any particular dynamics.
"""

from __future__ import annotations

import dataclasses
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp import Kernel, Policy, tv_shift_stats
from .soft import SoftSpec, softmax_policy, soft_value_iteration
from .transfer import AnchorSpec, TransferProblem, oracle_transfer

# (average, maximum) per-(s, a) TV distance of the two reported target kernels
SHIFT_TARGETS = {"mild": (0.015, 0.026), "large": (0.088, 0.157)}
MAX_ABNORMAL = 4
MAX_MAGNITUDE = 1.0 - 1e-9


@dataclass(frozen=True)
class StateLabels:
    """Per-state count of abnormal variables and discharge flag."""

    abnormal: np.ndarray
    discharge: np.ndarray

    def to_dict(self) -> dict:
        return {"abnormal": [int(x) for x in self.abnormal],
                "discharge": [bool(x) for x in self.discharge]}

    @classmethod
    def from_dict(cls, d: dict) -> "StateLabels":
        return cls(np.asarray(d["abnormal"], dtype=int), np.asarray(d["discharge"], dtype=bool))


@dataclass(frozen=True)
class EnvConfig:
    n_states: int = 128
    n_actions: int = 8
    support_degree: int = 6
    shift_magnitude: float = 0.0
    seed: int = 0
    start_states: tuple | None = None
    reachability_retries: int = 20

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1:
            raise ValueError("n_states and n_actions must be positive")
        if not 1 <= self.support_degree <= self.n_states:
            raise ValueError("support_degree must lie in [1, n_states]")
        if self.shift_magnitude < 0:
            raise ValueError("shift_magnitude must be nonnegative")

    @property
    def start_set(self) -> np.ndarray:
        if self.start_states is None:
            return np.arange(self.n_states)
        return np.asarray(self.start_states, dtype=int)


def assign_labels(n_states: int, rng: np.random.Generator) -> StateLabels:
    abnormal = rng.choice(MAX_ABNORMAL + 1, size=n_states, p=[0.25, 0.3, 0.2, 0.15, 0.1])
    discharge = (abnormal == 0) & (rng.random(n_states) < 0.5)
    return StateLabels(abnormal, discharge)


def reachable_from(P: np.ndarray, start) -> np.ndarray:
    """Boolean mask of states reachable from ``start`` under some action sequence."""
    adj = P.sum(axis=1) > 0
    seen = np.zeros(P.shape[0], dtype=bool)
    queue = deque(int(s) for s in start)
    seen[list(queue)] = True
    while queue:
        s = queue.popleft()
        for t in np.nonzero(adj[s] & ~seen)[0]:
            seen[t] = True
            queue.append(int(t))
    return seen


def _draw_kernel(cfg: EnvConfig, labels: StateLabels, rng: np.random.Generator) -> np.ndarray:
    S, A, k = cfg.n_states, cfg.n_actions, cfg.support_degree
    P = np.zeros((S, A, S))
    # each action moves the abnormal count by a state-specific drift; next states
    # are drawn preferentially near the drifted severity
    drift = rng.integers(-1, 2, size=(S, A))
    for s in range(S):
        for a in range(A):
            target = labels.abnormal[s] + drift[s, a]
            pref = np.exp(-np.abs(labels.abnormal - target))
            support = rng.choice(S, size=k, replace=False, p=pref / pref.sum())
            P[s, a, support] = rng.dirichlet(np.ones(k))
    return P


def generate_mdp(cfg: EnvConfig) -> tuple[Kernel, StateLabels]:
    """Random sparse kernel and labels; every state reachable from the start set."""
    root = np.random.SeedSequence(cfg.seed)
    labels = assign_labels(cfg.n_states, np.random.default_rng(root.spawn(1)[0]))
    for attempt in range(cfg.reachability_retries):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, attempt)))
        P = _draw_kernel(cfg, labels, rng)
        if reachable_from(P, cfg.start_set).all():
            return Kernel(P), labels
    raise RuntimeError(f"no fully reachable kernel after {cfg.reachability_retries} attempts")


def perturb_kernel(P1, magnitude: float, seed: int) -> Kernel:
    """Support-preserving multiplicative log-normal perturbation of ``P1``.

    Each supported entry is multiplied by ``exp(magnitude * xi)`` with standard
    normal ``xi`` and rows are renormalized; zero entries stay exactly zero.
    """
    if not 0.0 <= magnitude < 1.0:
        raise ValueError(f"magnitude must lie in [0, 1), got {magnitude}")
    K = P1.probs if isinstance(P1, Kernel) else np.asarray(P1, dtype=float)
    if magnitude == 0.0:
        return Kernel(K.copy())
    xi = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,))).standard_normal(K.shape)
    raw = np.where(K > 0, K * np.exp(magnitude * xi), 0.0)
    return Kernel(raw / raw.sum(axis=2, keepdims=True))


def calibrate_shift_magnitude(P1, target_tv_avg: float, seed: int, tol: float = 1e-6) -> float:
    """Magnitude at which :func:`perturb_kernel` reaches the requested average TV."""
    if target_tv_avg <= 0:
        return 0.0
    lo, hi = 0.0, 0.05
    while tv_shift_stats(P1, perturb_kernel(P1, hi, seed))[0] < target_tv_avg:
        if hi >= MAX_MAGNITUDE:
            raise ValueError(f"cannot reach average TV {target_tv_avg} with magnitude < 1")
        hi = min(2.0 * hi, MAX_MAGNITUDE)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        tv = tv_shift_stats(P1, perturb_kernel(P1, mid, seed))[0]
        if abs(tv - target_tv_avg) <= tol * target_tv_avg:
            return mid
        lo, hi = (mid, hi) if tv < target_tv_avg else (lo, mid)
    return 0.5 * (lo + hi)


def outcome_reward(labels: StateLabels) -> np.ndarray:
    """Next-state outcome: +1 discharge, -1 at least two abnormal variables, else 0."""
    R = np.zeros(labels.abnormal.shape[0])
    R[labels.abnormal >= 2] = -1.0
    R[labels.discharge] = 1.0
    return R


def expected_outcome(P1, R) -> np.ndarray:
    """``R1(s, a) = sum_{s'} P1(s'|s,a) R(s')``."""
    K = P1.probs if isinstance(P1, Kernel) else np.asarray(P1, dtype=float)
    return K @ np.asarray(R, dtype=float)


def build_expert_policy(P1, R, gamma_b: float = 0.95, tau_b: float = 0.1,
                        tol: float = 1e-10) -> Policy:
    """Soft-optimal policy for the expected outcome reward with a uniform reference."""
    K = P1.probs if isinstance(P1, Kernel) else np.asarray(P1, dtype=float)
    S, A = K.shape[:2]
    spec = SoftSpec(gamma_b, tau_b, Policy.uniform(S, A))
    Q, _ = soft_value_iteration(expected_outcome(K, R), K, spec, tol=tol)
    return softmax_policy(Q, spec)


def mean_top_action_prob(pi) -> float:
    p = pi.probs if isinstance(pi, Policy) else np.asarray(pi)
    return float(p.max(axis=1).mean())


def _bisect_log_tau(top_of_tau, target_top: float, tol: float) -> float:
    # the top-action probability falls as the temperature rises
    lo, hi = np.log(1e-4), np.log(1e3)
    mid = 0.5 * (lo + hi)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        top = top_of_tau(float(np.exp(mid)))
        if abs(top - target_top) <= tol:
            break
        lo, hi = (lo, mid) if top < target_top else (mid, hi)
    return float(np.exp(mid))


def calibrate_expert_temperature(P1, R, gamma_b: float = 0.95, target_top: float = 0.844,
                                 tol: float = 1e-4) -> float:
    """Temperature whose expert policy has the requested mean top-action probability."""
    return _bisect_log_tau(
        lambda t: mean_top_action_prob(build_expert_policy(P1, R, gamma_b, t, tol=1e-9)),
        target_top, tol)


def calibrate_expert_to_target(P1, P2, labels: StateLabels, gamma_b: float, gamma1: float,
                               gamma2: float, tau2: float, target_top: float = 0.844,
                               anchor_action: int = 0, tol: float = 1e-4) -> float:
    """Expert temperature at which the oracle *target* policy at ``tau2`` has the
    requested mean top-action probability."""
    def top(tau_b):
        env = Environment(P1, P2, labels, build_expert_policy(P1, outcome_reward(labels), gamma_b,
                                                              tau_b, tol=1e-9), gamma_b, tau_b, 0.0)
        prob = env.transfer_problem(gamma1, gamma2, tau2, anchor_action)
        return mean_top_action_prob(oracle_transfer(prob, tol=1e-9).pi2)
    return _bisect_log_tau(top, target_top, tol)


@dataclass(frozen=True, eq=False)
class Environment:
    """A generated source/target pair plus the expert that produces source data."""

    P1: Kernel
    P2: Kernel
    labels: StateLabels
    pi_b1: Policy
    gamma_b: float
    tau_b: float
    shift_magnitude: float
    config: EnvConfig = field(default_factory=EnvConfig)

    @property
    def R(self) -> np.ndarray:
        return outcome_reward(self.labels)

    @property
    def tv_stats(self) -> tuple[float, float]:
        return tv_shift_stats(self.P1, self.P2)

    def anchor(self, action: int = 0) -> AnchorSpec:
        """Anchor-action normalization with ``g(s) = R1(s, action)``."""
        g = expected_outcome(self.P1, self.R)[:, action]
        return AnchorSpec.anchor_action(g, self.P1.n_actions, action)

    def transfer_problem(self, gamma1: float, gamma2: float, tau2: float,
                         anchor_action: int = 0) -> TransferProblem:
        """Problem with uniform source/target references; ``C`` left unset."""
        S, A = self.P1.n_states, self.P1.n_actions
        uniform = Policy.uniform(S, A)
        return TransferProblem(self.P1, gamma1, self.pi_b1, uniform, self.P2,
                               SoftSpec(gamma2, tau2, uniform), self.anchor(anchor_action))

    def to_dict(self) -> dict:
        return {"P1": self.P1.to_dict(), "P2": self.P2.to_dict(), "labels": self.labels.to_dict(),
                "pi_b1": self.pi_b1.to_dict(), "gamma_b": self.gamma_b, "tau_b": self.tau_b,
                "shift_magnitude": self.shift_magnitude,
                "tv_avg": self.tv_stats[0], "tv_max": self.tv_stats[1]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


def load_environment(path, gamma_b: float = 0.95, tau_b: float | None = None) -> Environment:
    """Load an environment document.

    Only ``P1`` and ``labels`` are required, so externally tabularized kernels can
    be used; a missing ``P2`` means no shift and a missing expert is rebuilt.
    """
    d = json.loads(Path(path).read_text())
    P1 = Kernel.from_dict(d["P1"])
    labels = StateLabels.from_dict(d["labels"])
    P2 = Kernel.from_dict(d["P2"]) if "P2" in d else P1
    gamma_b = float(d.get("gamma_b", gamma_b))
    R = outcome_reward(labels)
    if tau_b is None:
        tau_b = float(d["tau_b"]) if "tau_b" in d else calibrate_expert_temperature(P1, R, gamma_b)
    pi_b1 = Policy.from_dict(d["pi_b1"]) if "pi_b1" in d else build_expert_policy(P1, R, gamma_b, tau_b)
    return Environment(P1, P2, labels, pi_b1, gamma_b, tau_b, float(d.get("shift_magnitude", 0.0)),
                       EnvConfig(n_states=P1.n_states, n_actions=P1.n_actions))


def build_environment(cfg: EnvConfig, shift: str = "mild", gamma_b: float = 0.95,
                      tau_b: float | None = None, target_top: float = 0.844,
                      calibration: str = "target", gamma1: float = 0.95, gamma2: float = 0.975,
                      tau2: float = 0.05) -> Environment:
    """Generate ``P1``, shift it to ``P2`` and build the expert source policy.

    ``shift`` is ``"mild"`` or ``"large"`` (calibrated to the reported average TV)
    or ``"custom"`` (use ``cfg.shift_magnitude`` as is). With ``tau_b=None`` the
    expert temperature is calibrated: ``calibration="target"`` matches the mean
    top-action probability of the oracle target policy at ``(gamma1, gamma2,
    tau2)`` to ``target_top``; ``calibration="expert"`` matches that of the
    expert itself.
    """
    P1, labels = generate_mdp(cfg)
    if shift == "custom":
        magnitude = cfg.shift_magnitude
    elif shift in SHIFT_TARGETS:
        magnitude = calibrate_shift_magnitude(P1, SHIFT_TARGETS[shift][0], cfg.seed)
    else:
        raise ValueError(f"unknown shift setting {shift!r}")
    P2 = perturb_kernel(P1, magnitude, cfg.seed)
    R = outcome_reward(labels)
    if tau_b is None:
        if calibration == "target":
            tau_b = calibrate_expert_to_target(P1, P2, labels, gamma_b, gamma1, gamma2, tau2, target_top)
        elif calibration == "expert":
            tau_b = calibrate_expert_temperature(P1, R, gamma_b, target_top)
        else:
            raise ValueError(f"unknown calibration {calibration!r}")
    pi_b1 = build_expert_policy(P1, R, gamma_b, tau_b)
    return Environment(P1, P2, labels, pi_b1, gamma_b, tau_b, magnitude, cfg)


def random_problem(n_states: int, n_actions: int, seed: int, gamma1: float = 0.9,
                   gamma2: float = 0.9, tau2: float = 0.5, shift: float = 0.3,
                   anchor_action: int = 0) -> TransferProblem:
    """Small dense instance for property checks, with the oracle shift ``C`` set.

    Kernels and policies have full support; ``P2`` is ``P1`` perturbed by
    :func:`perturb_kernel`; the behavior policy is a random softmax.
    """
    rng = np.random.default_rng(seed)
    P1 = Kernel(rng.dirichlet(np.ones(n_states), size=(n_states, n_actions)))
    P2 = perturb_kernel(P1, shift, seed)
    pi_b1 = Policy(rng.dirichlet(2.0 * np.ones(n_actions), size=n_states))
    uniform = Policy.uniform(n_states, n_actions)
    g = rng.normal(size=n_states)
    problem = TransferProblem(P1, gamma1, pi_b1, uniform, P2, SoftSpec(gamma2, tau2, uniform),
                              AnchorSpec.anchor_action(g, n_actions, anchor_action))
    return dataclasses.replace(problem, C=oracle_transfer(problem).C)
