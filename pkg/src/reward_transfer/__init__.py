"""Reward transfer across dynamics shift: source reward recovery, target soft
control, modular and coupled saddle-point estimators, certificates and an
experiment harness."""

__version__ = "0.1.0"
