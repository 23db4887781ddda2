"""Statistically constrained polynomial-transformation attacks on time-series classifiers,
with Rényi-divergence robustness certificates."""

__version__ = "0.1.0"

from . import attacks, autodiff, certify, data, features, models, transform  # noqa: E402,F401
