"""Experiment configuration, the seeded result grid, summaries and certification.

A grid cell is one ``(tau2, d1_fraction, dataset_draw, opt_seed)`` combination;
every requested method is fitted on the same pair of datasets inside a cell.

Seeds are derived from the root seed with ``numpy.random.SeedSequence``:
``derive_seed(root, *keys) = SeedSequence(root, spawn_key=keys).generate_state(1)[0]``,
with keys ``(1, draw)`` for the source data, ``(2, draw)`` for the target data
and ``(3, draw, opt_seed)`` for optimizer noise. The source dataset of a draw
is generated once at the reference size; smaller fractions use its leading
episodes, so the source sets are nested across fractions.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (TransitionDataset, empirical_model, estimate_behavior_policy, mixture_policy,
                   rollout, sampling_distribution)
from .diagnostics import (METRIC_FIELDS, CertificateReport, certify_problem, evaluate_output)
from .envgen import EnvConfig, Environment, build_environment, random_problem
from .estimators import (METHODS, EstimatorOutput, OptimConfig, ReferenceInit, fit_coupled, fit_coupled_offset,
                         fit_modular)
from .transfer import oracle_transfer, with_oracle_shift

log = logging.getLogger(__name__)

SHIFTS = ("mild", "large", "custom")
KEY_FIELDS = ("method", "tau2", "d1_fraction", "dataset_draw", "opt_seed")
RESULT_FIELDS = KEY_FIELDS + ("status",) + METRIC_FIELDS
SUMMARY_METRICS = METRIC_FIELDS


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    shift: str = "mild"
    gamma_b: float = 0.95
    tau_b: float | None = None
    target_top: float = 0.844
    gamma1: float = 0.95
    gamma2: float = 0.975
    tau2: tuple = (0.05, 0.2, 0.4)
    d1_fractions: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    d1_reference_episodes: int = 12_500
    d2_episodes: int = 25_000
    horizon: int = 20
    eps2: float = 0.2
    epsilon_clip: float = 1e-3
    methods: tuple = METHODS
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(init_reference="oracle"))
    n_dataset_draws: int = 10
    n_opt_seeds: int = 10
    root_seed: int = 0
    workers: int = 1
    out_dir: str = "results"

    def __post_init__(self):
        for name in ("tau2", "d1_fractions", "methods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")
        if any(not t > 0 for t in self.tau2):
            raise ValueError("every tau2 must be positive")
        if any(not 0 < f <= 1 for f in self.d1_fractions):
            raise ValueError("d1 fractions must lie in (0, 1]")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if self.shift not in SHIFTS:
            raise ValueError(f"shift must be one of {SHIFTS}")
        if self.tau_b is not None and not self.tau_b > 0:
            raise ValueError("tau_b must be positive")
        for name in ("gamma1", "gamma2", "gamma_b"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        for name in ("d1_reference_episodes", "d2_episodes", "horizon", "n_dataset_draws",
                     "n_opt_seeds", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.eps2 <= 1:
            raise ValueError("eps2 must lie in [0, 1]")

    def d1_episodes(self, fraction: float) -> int:
        return max(1, int(round(fraction * self.d1_reference_episodes)))


PROFILES = {
    # desk scale: 32 states, the lowest temperature, one optimizer seed per draw
    "desk": ExperimentConfig(env=EnvConfig(n_states=32), tau2=(0.05,), n_opt_seeds=1),
    "paper": ExperimentConfig(env=EnvConfig(n_states=128)),
}


# ---------------------------------------------------------------------------
# config files


_SECTIONS = {
    "experiment": ("shift", "gamma_b", "tau_b", "target_top", "gamma1", "gamma2", "tau2",
                   "d1_fractions", "d1_reference_episodes", "d2_episodes", "horizon", "eps2",
                   "epsilon_clip", "methods", "n_dataset_draws", "n_opt_seeds", "root_seed",
                   "workers", "out_dir"),
    "env": ("n_states", "n_actions", "support_degree", "shift_magnitude", "seed",
            "reachability_retries"),
    "optim": tuple(f.name for f in dataclasses.fields(OptimConfig)),
}


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if default and isinstance(default[0], str):
            return tuple(items)
        return tuple(float(t) for t in items)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        if default is None and text.lower() in ("auto", "none", ""):
            return None
        return float(text)
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "auto"
    return str(value)


def load_config(path=None, profile: str = "desk", text: str | None = None) -> ExperimentConfig:
    """Read a key = value config over the defaults of ``profile``.

    Sections are ``[experiment]``, ``[env]`` and ``[optim]``; unknown sections or
    keys raise ``ValueError``.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    base = PROFILES[profile]
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    unknown_sections = set(parser.sections()) - set(_SECTIONS)
    if unknown_sections:
        raise ValueError(f"unknown config sections {sorted(unknown_sections)}")
    parts = {"experiment": base, "env": base.env, "optim": base.optim}
    updates: dict[str, dict] = {name: {} for name in _SECTIONS}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            default = getattr(parts[section], key)
            if section == "env" and key == "shift_magnitude":
                default = 0.0
            updates[section][key] = _parse_value(raw, default)
    env = dataclasses.replace(base.env, **updates["env"])
    optim = dataclasses.replace(base.optim, **updates["optim"])
    return dataclasses.replace(base, env=env, optim=optim, **updates["experiment"])


def dump_config(cfg: ExperimentConfig) -> str:
    """Config text that :func:`load_config` reads back to ``cfg``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parts = {"experiment": cfg, "env": cfg.env, "optim": cfg.optim}
    for section, keys in _SECTIONS.items():
        parser[section] = {k: _format_value(getattr(parts[section], k)) for k in keys}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def with_overrides(cfg: ExperimentConfig, out_dir=None, root_seed=None, methods=None,
                   beta=None, workers=None) -> ExperimentConfig:
    changes = {}
    if out_dir is not None:
        changes["out_dir"] = str(out_dir)
    if root_seed is not None:
        changes["root_seed"] = int(root_seed)
    if methods is not None:
        changes["methods"] = tuple(methods)
    if workers is not None:
        changes["workers"] = int(workers)
    if beta is not None:
        changes["optim"] = dataclasses.replace(cfg.optim, beta=float(beta))
    return dataclasses.replace(cfg, **changes)


# ---------------------------------------------------------------------------
# experiment context


def derive_seed(root_seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_environment(cfg: ExperimentConfig) -> Environment:
    """Environment of a config; the expert is calibrated at the first ``tau2``."""
    return build_environment(cfg.env, cfg.shift, cfg.gamma_b, cfg.tau_b, cfg.target_top,
                             "target", cfg.gamma1, cfg.gamma2, cfg.tau2[0])


@dataclass(frozen=True, eq=False)
class TaskContext:
    """Problem, oracle, evaluation weights and reference initialization for one ``tau2``."""

    problem: object
    oracle: object
    rho1: np.ndarray
    rho2: np.ndarray
    reference: ReferenceInit


@dataclass(eq=False)
class Experiment:
    cfg: ExperimentConfig
    env: Environment
    rho0: np.ndarray
    target_logging: object
    tasks: dict
    _datasets: dict = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: ExperimentConfig, env: Environment | None = None) -> "Experiment":
        env = make_environment(cfg) if env is None else env
        S = env.P1.n_states
        rho0 = np.zeros(S)
        rho0[cfg.env.start_set] = 1.0 / len(cfg.env.start_set)
        logging_policy = mixture_policy(env.pi_b1, cfg.eps2)
        rho1 = sampling_distribution(env.P1, env.pi_b1, rho0, cfg.horizon).weights
        rho2 = sampling_distribution(env.P2, logging_policy, rho0, cfg.horizon).weights
        tasks = {}
        for tau2 in cfg.tau2:
            problem, oracle = with_oracle_shift(env.transfer_problem(cfg.gamma1, cfg.gamma2, tau2))
            ref = ReferenceInit.from_oracle(problem, oracle, rho1, rho2, cfg.optim.beta)
            tasks[tau2] = TaskContext(problem, oracle, rho1, rho2, ref)
        return cls(cfg, env, rho0, logging_policy, tasks)

    def datasets(self, draw: int) -> tuple[TransitionDataset, TransitionDataset]:
        """Full-size source and target datasets of one draw (cached)."""
        if draw not in self._datasets:
            cfg, env = self.cfg, self.env
            d1 = rollout(env.P1, env.pi_b1, self.rho0, cfg.horizon, cfg.d1_reference_episodes,
                         derive_seed(cfg.root_seed, 1, draw))
            d2 = rollout(env.P2, self.target_logging, self.rho0, cfg.horizon, cfg.d2_episodes,
                         derive_seed(cfg.root_seed, 2, draw))
            self._datasets = {draw: (d1, d2)}  # keep only the latest draw
        return self._datasets[draw]


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class Cell:
    tau2: float
    d1_fraction: float
    dataset_draw: int
    opt_seed: int

    @property
    def name(self) -> str:
        return f"tau{self.tau2:g}_f{self.d1_fraction:g}_d{self.dataset_draw}_s{self.opt_seed}"


def grid_cells(cfg: ExperimentConfig) -> list[Cell]:
    return [Cell(t, f, d, s) for d in range(cfg.n_dataset_draws) for t in cfg.tau2
            for f in cfg.d1_fractions for s in range(cfg.n_opt_seeds)]


def _fmt(x: float) -> str:
    return repr(float(x))


def fit_cell(exp: Experiment, cell: Cell, methods=None) -> dict:
    """Fit methods on one cell: ``{method: (EstimatorOutput | Exception, seconds)}``.

    Coupled-Offset reuses the cell's Modular fit when Modular is also requested;
    its time excludes that shared Modular start.
    """
    cfg = exp.cfg
    methods = cfg.methods if methods is None else methods
    task = exp.tasks[cell.tau2]
    d1_full, d2 = exp.datasets(cell.dataset_draw)
    d1 = d1_full.head(cfg.d1_episodes(cell.d1_fraction))
    src, tgt = empirical_model(d1), empirical_model(d2)
    pi_b1_hat = estimate_behavior_policy(d1, cfg.epsilon_clip)
    optim = dataclasses.replace(cfg.optim, seed=derive_seed(cfg.root_seed, 3, cell.dataset_draw,
                                                            cell.opt_seed))
    fns = {
        "modular": lambda: fit_modular(src, tgt, task.problem, optim, pi_b1_hat, task.reference),
        "coupled": lambda: fit_coupled(src, tgt, task.problem, optim, pi_b1_hat, task.reference),
        "coupled_offset": lambda: fit_coupled_offset(
            src, tgt, task.problem, optim, pi_b1_hat, task.reference,
            modular if isinstance(modular, EstimatorOutput) else None),
    }
    modular = None
    outs: dict = {}
    for method in sorted(methods, key=METHODS.index):
        t0 = time.perf_counter()
        try:
            out = fns[method]()
        except Exception as exc:  # recorded in the status column
            log.warning("cell %s method %s failed: %s", cell.name, method, exc)
            out = exc
        outs[method] = (out, time.perf_counter() - t0)
        if method == "modular":
            modular = out
    return outs


def run_cell(exp: Experiment, cell: Cell) -> tuple[list[dict], list[dict]]:
    """Result rows and runtime rows of one cell, in the configured method order."""
    outs = fit_cell(exp, cell)
    task = exp.tasks[cell.tau2]
    rows, times = [], []
    for method in exp.cfg.methods:
        out, seconds = outs[method]
        row = {"method": method, "tau2": _fmt(cell.tau2), "d1_fraction": _fmt(cell.d1_fraction),
               "dataset_draw": str(cell.dataset_draw), "opt_seed": str(cell.opt_seed)}
        values = None
        if not isinstance(out, Exception):
            values = evaluate_output(out, task.oracle, task.problem, task.rho1, task.rho2).to_dict()
            if not all(math.isfinite(values[k]) for k in METRIC_FIELDS):
                out, values = ValueError("nonfinite metric"), None
        if values is None:
            row["status"] = f"error: {type(out).__name__}: {out}".replace("\n", " ")
            row.update({k: "" for k in METRIC_FIELDS})
        else:
            row["status"] = "ok"
            row.update({k: _fmt(values[k]) for k in METRIC_FIELDS})
        rows.append(row)
        times.append({k: row[k] for k in KEY_FIELDS} | {"runtime_s": f"{seconds:.3f}"})
    return rows, times


def write_csv(path, rows: list[dict], fields) -> Path:
    """Write atomically (temporary file, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, path)
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


_WORKER: dict = {}


def _worker_init(cfg: ExperimentConfig):
    _WORKER["exp"] = Experiment.build(cfg)


def _worker_cell(cell: Cell):
    return cell, run_cell(_WORKER["exp"], cell)


def _store_cell(cell_dir: Path, cell: Cell, rows, times) -> None:
    write_csv(cell_dir / f"{cell.name}.csv", rows, RESULT_FIELDS)
    write_csv(cell_dir / f"{cell.name}.time.csv", times, KEY_FIELDS + ("runtime_s",))


def run_grid(cfg: ExperimentConfig, experiment: Experiment | None = None) -> list[dict]:
    """Run every cell, write ``results.csv``, ``runtimes.csv``, ``summary.csv`` and
    ``plot_data.csv`` under ``cfg.out_dir`` and return the result rows.

    Results are ordered by (draw, tau2, fraction, opt_seed, method) and hold no
    timing information, so a rerun with the same root seed is byte-identical;
    wall-clock times go to ``runtimes.csv``.
    """
    out = Path(cfg.out_dir)
    cell_dir = out / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    cells = grid_cells(cfg)
    if cfg.workers > 1 and experiment is None:
        with ProcessPoolExecutor(cfg.workers, initializer=_worker_init, initargs=(cfg,)) as pool:
            for cell, (rows, times) in pool.map(_worker_cell, cells):
                _store_cell(cell_dir, cell, rows, times)
    else:
        exp = Experiment.build(cfg) if experiment is None else experiment
        for cell in cells:
            rows, times = run_cell(exp, cell)
            _store_cell(cell_dir, cell, rows, times)
            log.info("cell %s done", cell.name)
    rows, times = [], []
    for cell in cells:
        rows += read_csv(cell_dir / f"{cell.name}.csv")
        times += read_csv(cell_dir / f"{cell.name}.time.csv")
    write_csv(out / "results.csv", rows, RESULT_FIELDS)
    write_csv(out / "runtimes.csv", times, KEY_FIELDS + ("runtime_s",))
    (out / "config.ini").write_text(dump_config(cfg))
    ok = [r for r in rows if r["status"] == "ok"]
    if ok and "modular" in {r["method"] for r in ok}:
        summary = summarize(ok)
        write_csv(out / "summary.csv", summary, summary_fields())
        write_csv(out / "plot_data.csv", plot_data(summary), PLOT_FIELDS)
    return rows


# ---------------------------------------------------------------------------
# summaries


def summary_fields() -> tuple:
    cols = ["method", "tau2", "d1_fraction", "n"]
    for m in SUMMARY_METRICS:
        cols += [f"{m}_mean", f"{m}_sd", f"{m}_improvement_pct"]
    return tuple(cols)


def summarize(rows: list[dict]) -> list[dict]:
    """Mean, sample sd and improvement over Modular per (method, tau2, fraction).

    Improvement is ``(Modular - Method) / Modular * 100`` on the means. Rows whose
    status is not ``ok`` are skipped.
    """
    rows = [r for r in rows if r.get("status", "ok") == "ok"]
    if not rows:
        raise ValueError("no successful result rows to summarize")
    groups: dict = {}
    for r in rows:
        key = (r["method"], float(r["tau2"]), float(r["d1_fraction"]))
        groups.setdefault(key, []).append(r)
    means = {key: {m: float(np.mean([float(r[m]) for r in grp])) for m in SUMMARY_METRICS}
             for key, grp in groups.items()}
    order = {m: i for i, m in enumerate(METHODS)}
    out = []
    for key in sorted(groups, key=lambda k: (k[1], k[2], order.get(k[0], len(order)), k[0])):
        method, tau2, frac = key
        base = means.get(("modular", tau2, frac))
        if base is None:
            raise ValueError(f"no Modular baseline for tau2={tau2}, fraction={frac}")
        grp = groups[key]
        row = {"method": method, "tau2": _fmt(tau2), "d1_fraction": _fmt(frac), "n": str(len(grp))}
        for m in SUMMARY_METRICS:
            vals = np.array([float(r[m]) for r in grp])
            sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            improvement = (100.0 * (base[m] - means[key][m]) / base[m]) if base[m] != 0 else 0.0
            row.update({f"{m}_mean": _fmt(means[key][m]), f"{m}_sd": _fmt(sd),
                        f"{m}_improvement_pct": _fmt(improvement)})
        out.append(row)
    return out


PLOT_FIELDS = ("tau2", "d1_fraction", "method", "q2_mse_rho2", "v2_mse_unif", "r_mse_rho1",
               "q2_improvement_pct", "v2_improvement_pct", "r_improvement_pct")


def plot_data(summary: list[dict]) -> list[dict]:
    """Absolute metrics and percent improvement against the source fraction."""
    return [{"tau2": r["tau2"], "d1_fraction": r["d1_fraction"], "method": r["method"],
             "q2_mse_rho2": r["q2_mse_rho2_mean"], "v2_mse_unif": r["v2_mse_unif_mean"],
             "r_mse_rho1": r["r_mse_rho1_mean"],
             "q2_improvement_pct": r["q2_mse_rho2_improvement_pct"],
             "v2_improvement_pct": r["v2_mse_unif_improvement_pct"],
             "r_improvement_pct": r["r_mse_rho1_improvement_pct"]} for r in summary]


# ---------------------------------------------------------------------------
# certification


PROPERTY_INSTANCES = ((4, 2, 0), (4, 3, 1), (6, 2, 2))


def certify(cfg: ExperimentConfig, trials: int = 100, data_episodes: int = 200,
            env: Environment | None = None) -> CertificateReport:
    """Certificates on the configured environment (every ``tau2``) and on small
    dense property instances; the configured instance also gets empirical
    models from one seeded draw for the first-order channel checks."""
    if any(not t > 0 for t in cfg.tau2):
        raise ValueError("every tau2 must be positive")
    report = CertificateReport()
    exp = Experiment.build(cfg, env)
    for tau2, task in exp.tasks.items():
        d1 = rollout(exp.env.P1, exp.env.pi_b1, exp.rho0, cfg.horizon, data_episodes,
                     derive_seed(cfg.root_seed, 1, 0))
        d2 = rollout(exp.env.P2, exp.target_logging, exp.rho0, cfg.horizon, data_episodes,
                     derive_seed(cfg.root_seed, 2, 0))
        sub = certify_problem(task.problem, task.oracle, task.rho1, task.rho2, cfg.optim.beta,
                              empirical_model(d1), empirical_model(d2), trials=trials,
                              seed=cfg.root_seed)
        report.extend(sub, f"env_tau{tau2:g}.")
    for S, A, seed in PROPERTY_INSTANCES:
        problem = random_problem(S, A, seed)
        oracle = oracle_transfer(problem)
        rho0 = np.full(S, 1.0 / S)
        rho1 = sampling_distribution(problem.P1, problem.pi_b1, rho0, cfg.horizon)
        rho2 = sampling_distribution(problem.P2, mixture_policy(problem.pi_b1, cfg.eps2), rho0,
                                     cfg.horizon)
        sub = certify_problem(problem, oracle, rho1, rho2, cfg.optim.beta, trials=trials, seed=seed)
        report.extend(sub, f"property_{S}x{A}_s{seed}.")
    return report
