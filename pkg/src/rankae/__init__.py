"""Autoencoders with a soft Jacobian-rank penalty, trained by alternating
Adam steps with truncated-SVD updates of per-anchor rank targets."""

__version__ = "0.1.0"
