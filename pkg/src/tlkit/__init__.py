"""Targeted-learning toolkit: penalized propensity models, TMLE, outcome-blind
simulation-based model selection, sensitivity curves, and phenotype prediction."""

__version__ = "0.1.0"
