"""Bayesian human-activity recognition on IMU windows.

Metric-learned variational embeddings, Kalman tracking of the embedding
distribution, a Bayesian fully-connected classifier with uncertainty-based
out-of-distribution rejection, and SHAP-driven model compression.
"""
__version__ = "0.1.0"
