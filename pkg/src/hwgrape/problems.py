"""Named control problems and crosstalk matrices used by the presets."""

from __future__ import annotations

from functools import reduce

import numpy as np

from .quantum import ControlProblem, ValidationError

I2 = np.eye(2, dtype=complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]])
SZ = np.diag([1.0, -1.0]).astype(complex)
PAULI = {"x": SX, "y": SY, "z": SZ}

# Rows and columns ordered Q1x, Q1y, Q2x, Q2y, ... (subsystem-major).
CHI_4Q_EXAMPLE = np.array(
    [
        [1, 0, 0.3, 0.001, 0.05, 0, 0.001, 0],
        [0, 1, 0, 0.1, 0, 0.01, 0, 0.001],
        [0.25, 0, 1, 0, 0.3, -0.005, 0.04, 0],
        [0, 0.2, 0, 1, 0, 0.4, 0, 0],
        [0, 0, 0.2, 0, 1, 0, -0.2, 0],
        [0, -0.04, 0, 0.2, 0, 1, 0, 0.3],
        [0.001, 0, 0.04, 0, 0.3, 0, 1, 0],
        [0, 0, 0, 0.07, 0, -0.3, 0, 1],
    ]
)

CHI_4Q_NEAREST = np.array(
    [
        [1, 0, 0.2, 0, 0, 0, 0, 0],
        [0, 1, 0, 0.3, 0, 0, 0, 0],
        [-0.1, 0, 1, 0, 0.5, 0, 0, 0],
        [0, 0.15, 0, 1, 0, 0.4, 0, 0],
        [0, 0, -0.2, 0, 1, 0, 0.2, 0],
        [0, 0, 0, -0.2, 0, 1, 0, 0.3],
        [0, 0, 0, 0, 0.23, 0, 1, 0],
        [0, 0, 0, 0, 0, 0.7, 0, 1],
    ]
)

CHI_PRESETS = {"crosstalk-4q": CHI_4Q_EXAMPLE, "nearest-neighbour-4q": CHI_4Q_NEAREST}


def embed(op: np.ndarray, site: int, n: int) -> np.ndarray:
    """``op`` acting on qubit ``site`` (0-based) of ``n``."""
    return reduce(np.kron, [op if j == site else I2 for j in range(n)])


def rotation(axis: str, angle: float) -> np.ndarray:
    return np.cos(angle / 2) * I2 - 1j * np.sin(angle / 2) * PAULI[axis]


def pi2_problem(axis: str = "x") -> ControlProblem:
    """One qubit, controls ``sx/2`` and ``sy/2``, target a pi/2 rotation; detuning enters as ``sz/2``."""
    if axis not in ("x", "y"):
        raise ValidationError("rotation axis must be x or y")
    return ControlProblem(np.zeros((2, 2)), (SX / 2, SY / 2), rotation(axis, np.pi / 2), detuning_op=SZ / 2)


def cnot_problem(w1: float = -2 * np.pi * 15, w2: float = 2 * np.pi * 15, J: float = 2 * np.pi * 50) -> ControlProblem:
    """Two Heisenberg-coupled spins with collective x and y controls; target CNOT."""
    k = np.kron
    H0 = w1 / 2 * k(SZ, I2) + w2 / 2 * k(I2, SZ) + J / 4 * (k(SX, SX) + k(SY, SY) + k(SZ, SZ))
    cnot = np.eye(4, dtype=complex)
    cnot[2:, 2:] = SX
    return ControlProblem(H0, (k(SX, I2) + k(I2, SX), k(SY, I2) + k(I2, SY)), cnot, detuning_op=(k(SZ, I2) + k(I2, SZ)) / 2)


def chain_problem(n: int = 4, coupling: float = 2 * np.pi * 20e6, site: int = 2, axis: str = "x") -> ControlProblem:
    """Qubits in a line with ``sz sz`` couplings; pi/2 about ``axis`` on ``site``, identity elsewhere."""
    H0 = sum(coupling * embed(SZ, i, n) @ embed(SZ, i + 1, n) for i in range(n - 1))
    controls = []
    for i in range(n):
        controls += [embed(SX, i, n), embed(SY, i, n)]
    target = embed(rotation(axis, np.pi / 2), site, n)
    return ControlProblem(H0, tuple(controls), target, detuning_op=sum(embed(SZ, i, n) for i in range(n)) / 2)


PROBLEMS = {"pi2": pi2_problem, "cnot": cnot_problem, "chain": chain_problem}


def named_problem(name: str, **kw) -> ControlProblem:
    try:
        return PROBLEMS[name](**kw)
    except KeyError:
        raise ValidationError(f"unknown problem preset {name!r}; choose from {sorted(PROBLEMS)}") from None
