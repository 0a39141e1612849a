"""Coordinated optimization of domain alignment and classification for
unsupervised domain adaptation, built on a small float64 autodiff engine."""

__version__ = "0.1.0"
