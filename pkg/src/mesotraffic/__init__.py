"""Mesoscopic stochastic traffic model with factor-graph state estimation."""

__version__ = "0.1.0"
