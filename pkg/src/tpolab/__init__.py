"""Transfer learning for preference-based bandits: exact KL-regularized tools, TPO runs and bound checks."""

__version__ = "0.1.0"
