"""Adapter-based teacher-student visual anomaly detection.

A single frozen backbone plays teacher and, with lightweight residual
adapters injected into its stages, student. Per-task adapters plus
prototype routing make the same model serve single-category, multi-class,
and continual deployments.
"""

__version__ = "0.1.0"
