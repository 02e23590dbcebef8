"""Propensity-score and outcome-model estimators for binary-outcome causal effects."""

__version__ = "0.1.0"
