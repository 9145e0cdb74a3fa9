"""Numerical tolerances shared across the package."""

HERMITIAN_TOL = 1e-12
UNITARY_TOL = 1e-10
FIDELITY_SLACK = 1e-12

# Resonator integrator defaults (amperes for the inductor current, volts for
# capacitor voltages).
ODE_ATOL_CURRENT = 1e-10
ODE_ATOL_VOLTAGE = 1e-8
ODE_RTOL = 1e-8

LINE_SEARCH_TOL = 1e-12
