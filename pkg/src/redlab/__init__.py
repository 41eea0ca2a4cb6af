"""Causal/environmental disentanglement for unsupervised domain adaptation,
with a trainable transition-matrix disagreement estimate and an exact
finite-domain checker for the accompanying target-error bound."""

__version__ = "0.1.0"
