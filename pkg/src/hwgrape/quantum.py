"""Time-slice propagators, the unitary gate objective and its gradient.

Conventions: Hamiltonians are in angular frequency (rad/s), time in seconds,
and hbar = 1, so ``dt * H`` is dimensionless.  A distorted pulse ``q`` has
shape ``(M, L)``; control ``l`` multiplies ``controls[l]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import FIDELITY_SLACK, HERMITIAN_TOL, UNITARY_TOL


class ValidationError(ValueError):
    """Input failed a structural or numerical precondition."""


class DimensionError(ValidationError):
    """Array shapes do not agree."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def check_hermitian(a, tol: float = HERMITIAN_TOL, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} has non-finite entries")
    if np.max(np.abs(a - a.conj().T), initial=0.0) > tol:
        raise ValidationError(f"{name} is not Hermitian within {tol:g}")
    return a


def check_unitary(u, tol: float = UNITARY_TOL, name: str = "matrix") -> np.ndarray:
    u = np.asarray(u, dtype=complex)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {u.shape}")
    err = np.max(np.abs(u.conj().T @ u - np.eye(u.shape[0])))
    if not np.isfinite(err) or err > tol:
        raise ValidationError(f"{name} is not unitary within {tol:g}")
    return u


@dataclass(frozen=True)
class Pulse:
    """Piecewise-constant program of ``N`` steps on ``K`` channels."""

    values: np.ndarray
    dt: float
    unit: str = "rad/s"
    bound: float | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DimensionError(f"pulse values must be (N, K), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("pulse has non-finite values")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValidationError("pulse step width must be positive")
        if self.bound is not None and np.max(np.abs(v)) > self.bound * (1 + 1e-12):
            raise ValidationError("pulse exceeds its amplitude bound")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def duration(self) -> float:
        return self.values.shape[0] * self.dt


@dataclass(frozen=True)
class DistortedPulse:
    """Control amplitudes (rad/s) seen by the quantum system, ``M`` steps of ``dt``."""

    values: np.ndarray
    dt: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise DimensionError(f"distorted pulse must be (M, L), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("distorted pulse has non-finite values")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValidationError("distorted pulse step width must be positive")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class ControlProblem:
    """Drift, control Hamiltonians and target gate.

    ``detuning_op`` is the operator multiplied by a detuning error when a
    problem is perturbed with :meth:`perturbed`; for a qubit it is ``sz/2``.
    """

    H0: np.ndarray
    controls: tuple
    U_target: np.ndarray
    detuning_op: np.ndarray | None = field(default=None)

    def __post_init__(self):
        h0 = check_hermitian(self.H0, name="H0")
        d = h0.shape[0]
        ctrls = tuple(check_hermitian(h, name=f"control {i}") for i, h in enumerate(self.controls))
        if len(ctrls) < 1:
            raise ValidationError("at least one control Hamiltonian is required")
        for i, h in enumerate(ctrls):
            if h.shape != (d, d):
                raise DimensionError(f"control {i} has shape {h.shape}, expected {(d, d)}")
        u = check_unitary(self.U_target, name="U_target")
        if u.shape != (d, d):
            raise DimensionError("U_target dimension does not match H0")
        object.__setattr__(self, "H0", _readonly(h0))
        object.__setattr__(self, "controls", tuple(_readonly(h) for h in ctrls))
        object.__setattr__(self, "U_target", _readonly(u))
        if self.detuning_op is not None:
            dop = check_hermitian(self.detuning_op, name="detuning_op")
            if dop.shape != (d, d):
                raise DimensionError("detuning_op dimension does not match H0")
            object.__setattr__(self, "detuning_op", _readonly(dop))

    @property
    def d(self) -> int:
        return self.H0.shape[0]

    @property
    def n_controls(self) -> int:
        return len(self.controls)

    def perturbed(self, detuning: float = 0.0, power_error: float = 0.0) -> "ControlProblem":
        """Problem with ``detuning * detuning_op`` added and controls scaled by ``1 + power_error``."""
        if detuning == 0.0 and power_error == 0.0:
            return self
        h0 = self.H0
        if detuning != 0.0:
            if self.detuning_op is None:
                raise ValidationError("problem has no detuning operator")
            h0 = h0 + detuning * self.detuning_op
        return ControlProblem(
            h0,
            tuple((1.0 + power_error) * h for h in self.controls),
            self.U_target,
            self.detuning_op,
        )


def _expm_eig(h: np.ndarray, t: float):
    """Return ``exp(-i t h)`` for a stack of Hermitian ``h`` plus its eigensystem."""
    evals, evecs = np.linalg.eigh(h)
    phases = np.exp(-1j * t * evals)
    u = (evecs * phases[..., None, :]) @ np.swapaxes(evecs.conj(), -1, -2)
    return u, evals, evecs, phases


def matrix_exp_skew_hermitian(A, t: float) -> np.ndarray:
    """``exp(-i t A)`` for Hermitian ``A``, via eigendecomposition."""
    A = check_hermitian(A, name="generator")
    if not np.isfinite(t):
        raise ValidationError("t must be finite")
    return _expm_eig(0.5 * (A + A.conj().T), t)[0]


def _check_q(q: DistortedPulse, prob: ControlProblem) -> np.ndarray:
    if q.values.shape[1] != prob.n_controls:
        raise DimensionError(
            f"distorted pulse has {q.values.shape[1]} channels, problem has {prob.n_controls} controls"
        )
    return q.values


def _hamiltonians(q: np.ndarray, prob: ControlProblem) -> np.ndarray:
    ctrl = np.stack(prob.controls)
    return prob.H0[None] + np.einsum("ml,lij->mij", q, ctrl)


def propagators(q: DistortedPulse, prob: ControlProblem) -> np.ndarray:
    """Step unitaries ``U_m = exp(-i dt (H0 + sum_l q[m,l] H_l))`` as an ``(M, d, d)`` array."""
    qv = _check_q(q, prob)
    return _expm_eig(_hamiltonians(qv, prob), q.dt)[0]


def total_propagator(q: DistortedPulse, prob: ControlProblem) -> np.ndarray:
    u = np.eye(prob.d, dtype=complex)
    for um in propagators(q, prob):
        u = um @ u
    return u


def fidelity(q: DistortedPulse, prob: ControlProblem) -> float:
    """Gate fidelity ``|Tr(U_target^dag U_M ... U_1)|^2 / d^2``."""
    u = total_propagator(q, prob)
    z = np.trace(prob.U_target.conj().T @ u)
    phi = float(abs(z) ** 2) / prob.d**2
    return min(phi, 1.0 + FIDELITY_SLACK)


def _step_derivatives(q: np.ndarray, dt: float, prob: ControlProblem):
    """Exact ``dU_m/dq_{m,l}`` from the eigensystem of each step generator.

    In the eigenbasis, the derivative of ``exp(-i dt H)`` along ``H_l`` is the
    Hadamard product of ``V^dag H_l V`` with the divided differences of
    ``exp(-i dt lambda)``.
    """
    u, lam, vec, _ = _expm_eig(_hamiltonians(q, prob), dt)
    # divided differences of exp(-i dt lam), written via sinc to stay stable
    # for (near-)degenerate eigenvalues
    dl = lam[:, :, None] - lam[:, None, :]
    mean = 0.5 * (lam[:, :, None] + lam[:, None, :])
    g = -1j * dt * np.exp(-1j * dt * mean) * np.sinc(dt * dl / (2 * np.pi))
    vh = np.swapaxes(vec.conj(), -1, -2)
    ctrl = np.stack(prob.controls)
    # (M, L, d, d): V^dag H_l V per step
    hl = np.einsum("mai,lab,mbj->mlij", vec.conj(), ctrl, vec)
    du = np.einsum("mia,mlab,mbj->mlij", vec, hl * g[:, None], vh)
    return u, du


def fidelity_gradient(q: DistortedPulse, prob: ControlProblem, method: str = "exact") -> np.ndarray:
    """Gradient of :func:`fidelity` with respect to ``q``, shape ``(M, L)``.

    ``method="exact"`` differentiates each step exponential exactly.
    ``method="first_order"`` uses the classic GRAPE approximation
    ``dU_m ~ -i dt H_l U_m``, which is accurate only for small ``dt ||H||``.
    Both use ``<A|B> = Tr(A^dag B)/d``.
    """
    qv = _check_q(q, prob)
    M = qv.shape[0]
    d = prob.d
    if method == "exact":
        u, du = _step_derivatives(qv, q.dt, prob)
    elif method == "first_order":
        u = _expm_eig(_hamiltonians(qv, prob), q.dt)[0]
        ctrl = np.stack(prob.controls)
        du = -1j * q.dt * np.einsum("lab,mbc->mlac", ctrl, u)
    else:
        raise ValueError(f"unknown gradient method {method!r}")

    # X_m = U_m ... U_1 (forward), Pd_m = U_target^dag U_M ... U_{m+1} (backward)
    fwd = np.empty((M + 1, d, d), dtype=complex)
    fwd[0] = np.eye(d)
    for m in range(M):
        fwd[m + 1] = u[m] @ fwd[m]
    bwd = np.empty((M + 1, d, d), dtype=complex)
    bwd[M] = prob.U_target.conj().T
    for m in range(M - 1, -1, -1):
        bwd[m] = bwd[m + 1] @ u[m]
    z = np.trace(bwd[0])
    # dz/dq_{m,l} = Tr(Pd_{m+1} dU_{m,l} X_{m-1})
    dz = np.einsum("mab,mlbc,mca->ml", bwd[1:], du, fwd[:-1])
    return 2.0 * np.real(np.conj(z) * dz) / d**2
