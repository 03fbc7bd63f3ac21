"""MoPAC: model predictive rollouts feeding a soft actor-critic, with exact tabular bound checks."""

__version__ = "0.1.0"
