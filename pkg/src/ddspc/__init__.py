"""Data-driven stochastic output-feedback predictive control.

Propagates statistical distributions of inputs and outputs through Hankel
matrices of recorded data, solves a convex chance-constrained optimal control
problem with interpolated initial conditions at every step, and simulates the
closed loop including its averaged-cost bound.
"""

from ddspc.pce import (
    GermFamily,
    GermKind,
    PceBasis,
    PceVector,
    build_joint_basis,
    exact_pce_of_disturbance,
    gaussian_initial_basis,
    moments,
    pce_dynamics_step,
    sample_realization,
)

__version__ = "0.1.0"
