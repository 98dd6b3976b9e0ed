"""Influence-based sample re-weighting for long-tailed classification.

Small-scale, dependency-light implementation: a numpy MLP with manual
backprop, the influence-balanced (IB) re-weighting and its baselines, a
two-phase trainer, synthetic imbalanced data, and exact-influence oracles
for tiny convex models.
"""

from ibloss.errors import NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = ["NumericalError", "ValidationError", "__version__"]
