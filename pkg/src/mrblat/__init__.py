"""Distributed multi-radar Bayesian localization and tracking (MRBLaT).

Modules: ``geometry`` (frames), ``waveform`` (MIMO signal synthesis),
``kinematics`` (motion model and tracks), ``inference`` (data messages,
Gaussian and gamma updates), ``node`` (per-radar runtime and broadcast bus),
``baseline`` (Capon + Kalman smoother) and ``harness`` (Monte Carlo, metrics).
"""

__version__ = "0.1.0"
