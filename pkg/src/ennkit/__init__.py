"""Epistemic neural networks at desk scale: models, joint-prediction metrics,
a synthetic classification testbed, and Thompson-sampling bandit/RL agents."""

__version__ = "0.1.0"
