"""Conformal-prediction machine unlearning on desk-scale synthetic data."""
