"""Least-squares kernel Kalman filtering toolkit.

Matrix-free approximate Kalman filtering for large spatially-discretized linear
systems, the baseline observers it is compared against, dense small-scale oracles
and a heat-equation experiment harness.
"""

__version__ = "0.0.1"
