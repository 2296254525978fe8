"""Phase-space transport laboratory.

Forward upwind solver for the forced kinetic transport equation on a
truncated 2D x 2D phase space, characteristic-trajectory oracles, numerical
checks of boundary/energy/weighted integral estimates, boundary-data
stability sweeps for absorption and source coefficients, and an
adjoint-based reconstruction demo.
"""

__version__ = "0.1.0"
