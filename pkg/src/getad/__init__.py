"""Trajectory anomaly detection on road networks.

Road segments are embedded with a graph-attention encoder whose attention
is modulated by empirical transition probabilities; an autoregressive
decoder with hop-distance positional encodings models normal movement, and
trajectories are scored by confidence-weighted negative log-likelihood.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .estimator import GetadDetector

__all__ = ["GetadDetector", "__version__"]
