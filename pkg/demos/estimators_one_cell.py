"""Modular vs coupled estimators on one dataset draw.

Draws a source and a target dataset from a 12-state environment, fits the
three estimators with a short optimizer budget and prints their errors
against the oracle.

    python demos/estimators_one_cell.py
"""

from reward_transfer.harness import Cell, Experiment, load_config, run_cell

cfg = load_config(text="""
[experiment]
tau2 = 0.05
d1_fractions = 0.2
d1_reference_episodes = 1000
d2_episodes = 2000
n_dataset_draws = 1
n_opt_seeds = 1
[env]
n_states = 12
[optim]
source_rounds = 5000
target_rounds = 5000
joint_rounds = 5000
""")

exp = Experiment.build(cfg)
rows, times = run_cell(exp, Cell(0.05, 0.2, 0, 0))
print(f"{'method':<16}{'q2 MSE':>10}{'V2 MSE':>10}{'q1 MSE':>10}{'regret':>10}{'sec':>7}")
for row, t in zip(rows, times):
    print(f"{row['method']:<16}{float(row['q2_mse_rho2']):>10.2f}{float(row['v2_mse_unif']):>10.2f}"
          f"{float(row['q1_mse_rho1']):>10.2f}{float(row['regret']):>10.4f}{float(t['runtime_s']):>7.1f}")
