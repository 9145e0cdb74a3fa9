"""Nonlinear tuned-and-matched resonator as a distortion operator.

The circuit state ``x = (I_L, V_Cm, V_Ct)`` is a complex envelope in a frame
rotating at ``omega_r``.  It obeys ``dx/dt = A(x) x + alpha(t) b`` where only
the inductor row of ``A`` depends on the state, through the kinetic-inductance
laws ``L = L0 (1 + alpha_L |I|^2)`` and ``R = R0 (1 + alpha_R |I|^eta)``.

Input pulses are two-channel voltages (in-phase, quadrature).  The distorted
pulse is ``kappa * (Re I_L, Im I_L)`` sampled at output-step midpoints, in
rad/s.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import numpy as np
from scipy.linalg import expm, expm_frechet

from . import _dopri
from .constants import ODE_ATOL_CURRENT, ODE_ATOL_VOLTAGE, ODE_RTOL
from .distortion import DistortionJacobian, DistortionOperator, output_steps
from .quantum import DimensionError, Pulse, ValidationError

log = logging.getLogger(__name__)


class IntegrationError(RuntimeError):
    """The adaptive integrator could not continue; ``t_last`` is the last good time."""

    def __init__(self, msg: str, t_last: float):
        super().__init__(f"{msg} (last good time {t_last:.6g} s)")
        self.t_last = t_last


class ConvergenceError(RuntimeError):
    """A steady state was not reached."""


class DegenerateDirectionError(RuntimeError):
    """A compensation step has no influence on the weighted state."""


@dataclass(frozen=True)
class ResonatorModel:
    """Circuit parameters in SI units (ohm, henry, farad, rad/s, s).

    ``kappa`` converts rotating-frame inductor current (A) into a Rabi
    amplitude (rad/s); ``tau_r`` is the rise time applied to the drive.
    """

    R0: float
    L0: float
    Cm: float
    Ct: float
    RL: float
    alpha_L: float = 0.0
    alpha_R: float = 0.0
    eta: float = 2.0
    omega_r: float = 0.0
    kappa: float = 1.0
    tau_r: float = 0.0

    def __post_init__(self):
        for name in ("R0", "L0", "Cm", "Ct", "RL", "eta", "kappa"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be positive, got {v}")
        for name in ("alpha_L", "alpha_R", "tau_r", "omega_r"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be non-negative, got {v}")

    # --- construction helpers

    @classmethod
    def from_dict(cls, d: dict) -> "ResonatorModel":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known - {"comment", "notes"}
        if extra:
            raise ValidationError(f"unknown resonator fields: {sorted(extra)}")
        return cls(**{k: float(v) for k, v in d.items() if k in known})

    @classmethod
    def from_json(cls, path) -> "ResonatorModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "ResonatorModel":
        return replace(self, **kw)

    def linearized(self) -> "ResonatorModel":
        return replace(self, alpha_L=0.0, alpha_R=0.0)

    @property
    def is_linear(self) -> bool:
        return self.alpha_L == 0.0 and self.alpha_R == 0.0

    @property
    def params(self) -> np.ndarray:
        return np.array(
            [self.R0, self.L0, self.Cm, self.Ct, self.RL, self.alpha_L, self.alpha_R, self.eta, self.omega_r]
        )

    # --- circuit matrices

    @property
    def b(self) -> np.ndarray:
        return np.array([0.0, 1.0 / (self.RL * self.Cm), 1.0 / (self.RL * self.Ct)], dtype=complex)

    def inductance(self, current) -> float:
        return self.L0 * (1.0 + self.alpha_L * abs(current) ** 2)

    def resistance(self, current) -> float:
        return self.R0 * (1.0 + self.alpha_R * abs(current) ** self.eta)

    def A(self, x=None) -> np.ndarray:
        I = 0.0 if x is None else x[0]
        L = self.inductance(I)
        R = self.resistance(I)
        rlcm = 1.0 / (self.RL * self.Cm)
        rlct = 1.0 / (self.RL * self.Ct)
        a = np.array(
            [[-R / L, 0.0, 1.0 / L], [0.0, -rlcm, rlcm], [-1.0 / self.Ct, -rlct, rlct]],
            dtype=complex,
        )
        return a - 1j * self.omega_r * np.eye(3)

    def dA_ds(self, x) -> np.ndarray:
        """Derivative of ``A(x)`` with respect to ``s = |I_L|^2``."""
        s = abs(x[0]) ** 2
        L = self.inductance(x[0])
        R = self.resistance(x[0])
        dL = self.L0 * self.alpha_L
        dR = self.R0 * self.alpha_R * 0.5 * self.eta * s ** (0.5 * self.eta - 1) if (self.alpha_R and s > 0) else 0.0
        out = np.zeros((3, 3), dtype=complex)
        out[0, 0] = -(dR * L - R * dL) / L**2
        out[0, 2] = -dL / L**2
        return out

    def linear_modes(self) -> np.ndarray:
        """Eigenvalues of the lab-frame linear circuit matrix (rad/s)."""
        return np.linalg.eigvals(self.linearized().A() + 1j * self.omega_r * np.eye(3))

    def resonance(self) -> tuple[float, float]:
        """Linear resonance (rad/s) and loaded quality factor."""
        ev = self.linear_modes()
        osc = ev[np.argmax(ev.imag)]
        return float(osc.imag), float(osc.imag / (-2 * osc.real))


def reference_model() -> ResonatorModel:
    """The documented reference resonator (see ``presets/reference_resonator.json``)."""
    with resources.files("hwgrape").joinpath("presets", "reference_resonator.json").open() as fh:
        return ResonatorModel.from_dict(json.load(fh))


# --- forcing -----------------------------------------------------------------------


@dataclass(frozen=True)
class PiecewiseForcing:
    """Complex drive with amplitude ``amps[i]`` on ``[edges[i], edges[i+1])``.

    Transitions are smoothed by ``1 - exp(-(t - edge)/tau_r)``; the drive is
    zero before ``edges[0]`` and after ``edges[-1]``.
    """

    edges: np.ndarray
    amps: np.ndarray
    tau_r: float = 0.0

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        a = np.asarray(self.amps, dtype=complex)
        if e.ndim != 1 or a.ndim != 1 or e.size != a.size + 1:
            raise DimensionError("need len(edges) == len(amps) + 1")
        if np.any(np.diff(e) <= 0):
            raise ValidationError("forcing edges must increase")
        if not np.all(np.isfinite(a)):
            raise ValidationError("forcing amplitudes must be finite")
        if self.tau_r < 0:
            raise ValidationError("tau_r must be non-negative")
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "amps", a)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        padded = np.concatenate([[0.0], self.amps, [0.0]])
        # segment index: 0 before the first edge, i+1 inside segment i
        idx = np.searchsorted(self.edges, t, side="right")
        cur = padded[idx]
        prev = padded[np.maximum(idx - 1, 0)]
        start = np.concatenate([[-np.inf], self.edges])[idx]
        if self.tau_r > 0:
            since = np.where(np.isfinite(start), t - start, np.inf)
            rise = -np.expm1(-since / self.tau_r)
        else:
            rise = 1.0
        return prev + (cur - prev) * rise

    def segments(self, t_end: float):
        """Edges and (prev, cur) amplitudes covering ``[edges[0], max(t_end, edges[-1])]``."""
        edges = list(self.edges)
        amps = list(self.amps)
        if t_end > edges[-1] * (1 + 1e-12):
            edges.append(float(t_end))
            amps.append(0.0)
        amps = np.asarray(amps, dtype=complex)
        prev = np.concatenate([[0.0], amps[:-1]])
        return np.asarray(edges), prev, amps


def forcing_from_pulse(p: Pulse, tau_r: float = 0.0) -> PiecewiseForcing:
    """Two-channel voltage pulse -> complex drive ``p[:,0] + i p[:,1]``."""
    v = p.values if isinstance(p, Pulse) else np.asarray(p, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2:
        raise DimensionError(f"resonator input must have 2 channels, got shape {v.shape}")
    dt = p.dt
    n = v.shape[0]
    return PiecewiseForcing(np.arange(n + 1) * dt, v[:, 0] + 1j * v[:, 1], tau_r)


# --- integration -----------------------------------------------------------------


@dataclass
class SolverOptions:
    atol_current: float = ODE_ATOL_CURRENT
    atol_voltage: float = ODE_ATOL_VOLTAGE
    rtol: float = ODE_RTOL
    max_steps: int = 5_000_000
    hmin: float = 1e-22

    @property
    def atol(self) -> np.ndarray:
        return np.array([self.atol_current, self.atol_voltage, self.atol_voltage])

    def scaled_abs(self, factor: float) -> "SolverOptions":
        return replace(self, atol_current=self.atol_current * factor, atol_voltage=self.atol_voltage * factor)

    def scaled(self, factor: float) -> "SolverOptions":
        return replace(
            self, atol_current=self.atol_current * factor, atol_voltage=self.atol_voltage * factor, rtol=self.rtol * factor
        )


def _initial_step(model: ResonatorModel) -> float:
    ev = np.abs(np.linalg.eigvals(model.A()))
    return 0.05 / max(ev.max(), 1.0)


def _integrate(model, opts, Z0, edges, prev, cur, t_eval, dense=False):
    """Run the compiled integrator; returns ``(Z_eval, Z_edges, dense_data)``."""
    Z0 = np.ascontiguousarray(Z0, dtype=np.complex128)
    t_eval = np.ascontiguousarray(t_eval, dtype=float)
    if t_eval.size and (np.any(np.diff(t_eval) < 0) or t_eval[-1] > edges[-1] * (1 + 1e-12)):
        raise ValidationError("sample times must be sorted and inside the integration window")
    out = np.zeros((t_eval.size,) + Z0.shape, dtype=np.complex128)
    cap = 4096 if dense else 1
    while True:
        dt_buf = np.zeros(cap)
        dh_buf = np.zeros(cap)
        drc = np.zeros((cap, 5, 3), dtype=np.complex128)
        status, steps, t_fail, Z_edges, nd = _dopri.integrate(
            Z0,
            np.ascontiguousarray(edges, dtype=float),
            np.ascontiguousarray(prev, dtype=np.complex128),
            np.ascontiguousarray(cur, dtype=np.complex128),
            float(model.tau_r),
            model.params,
            opts.atol,
            float(opts.rtol),
            _initial_step(model),
            float(opts.hmin),
            int(opts.max_steps),
            t_eval,
            out,
            dense,
            dt_buf,
            dh_buf,
            drc,
        )
        if status == _dopri.STATUS_UNDERFLOW:
            raise IntegrationError("step size underflow (stiff or singular dynamics)", t_fail)
        if status == _dopri.STATUS_MAXSTEPS:
            raise IntegrationError("maximum number of steps exceeded", t_fail)
        if status == _dopri.STATUS_NONFINITE:
            raise IntegrationError("non-finite state", t_fail)
        if not dense or nd <= cap:
            break
        cap = nd
    dense_data = (dt_buf[:nd], dh_buf[:nd], drc[:nd]) if dense else None
    return out, Z_edges, dense_data


class Trajectory:
    """Dense solution of the circuit; call with times to get ``(len(t), 3)`` states."""

    def __init__(self, t0: float, t_end: float, steps_t, steps_h, coeffs, edges, edge_states):
        self.t0, self.t_end = float(t0), float(t_end)
        self._t = steps_t
        self._h = steps_h
        self._rc = coeffs
        self.edges = edges
        self.edge_states = edge_states

    @property
    def n_steps(self) -> int:
        return self._t.size

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < self.t0 - 1e-15) or np.any(t > self.t_end * (1 + 1e-12)):
            raise ValueError("query time outside the solved window")
        i = np.clip(np.searchsorted(self._t, t, side="right") - 1, 0, self._t.size - 1)
        theta = ((t - self._t[i]) / self._h[i])[:, None]
        rc = self._rc[i]
        t1 = 1.0 - theta
        return rc[:, 0] + theta * (rc[:, 1] + t1 * (rc[:, 2] + theta * (rc[:, 3] + t1 * rc[:, 4])))

    def to_csv(self, path, times) -> None:
        x = self(times)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "re_I_L", "im_I_L", "re_V_Cm", "im_V_Cm", "re_V_Ct", "im_V_Ct"])
            for t, row in zip(np.atleast_1d(times), x):
                w.writerow([repr(float(t))] + [repr(float(f(v))) for v in row for f in (np.real, np.imag)])


def solve_circuit(
    forcing: PiecewiseForcing,
    model: ResonatorModel,
    t_end: float,
    x0=None,
    options: SolverOptions | None = None,
) -> Trajectory:
    """Integrate the rotating-frame circuit from ``forcing.edges[0]`` to ``t_end``.

    The forcing's ``tau_r`` overrides the model's.  Segment edges are hit
    exactly, so drive discontinuities never fall inside a step.
    """
    opts = options or SolverOptions()
    x0 = np.zeros(3, dtype=complex) if x0 is None else np.asarray(x0, dtype=complex)
    if x0.shape != (3,) or not np.all(np.isfinite(x0)):
        raise ValidationError("x0 must be a finite complex 3-vector")
    edges, prev, cur = forcing.segments(t_end)
    if not np.all(np.isfinite(cur)):
        raise ValidationError("forcing is not finite")
    m = model.replace(tau_r=forcing.tau_r)
    _, Z_edges, dense = _integrate(m, opts, x0[None, :], edges, prev[:, None], cur[:, None], np.zeros(0), dense=True)
    return Trajectory(edges[0], edges[-1], *dense, edges, Z_edges[:, 0, :])


# --- ringdown compensation --------------------------------------------------------------


@dataclass(frozen=True)
class RingdownConfig:
    """Compensation steps appended after a pulse.

    ``r`` is the fraction of the weighted state each step should leave behind;
    ``P`` weights the state components (default: inductor current only).
    """

    dt_rd: tuple
    r: float = 0.0
    P: np.ndarray = field(default_factory=lambda: np.diag([1.0, 0.0, 0.0]))

    def __post_init__(self):
        dts = tuple(float(x) for x in self.dt_rd)
        if not dts or any(not (x > 0) for x in dts):
            raise ValidationError("compensation step widths must be positive")
        if not 0.0 <= self.r <= 1.0:
            raise ValidationError("r must be in [0, 1]")
        P = np.asarray(self.P, dtype=complex)
        if P.shape != (3, 3):
            raise DimensionError("P must be 3x3")
        if np.max(np.abs(P - P.conj().T)) > 1e-12 or np.linalg.eigvalsh(0.5 * (P + P.conj().T)).min() < -1e-12:
            raise ValidationError("P must be positive semi-definite")
        object.__setattr__(self, "dt_rd", dts)
        object.__setattr__(self, "P", P)

    @property
    def n_rd(self) -> int:
        return len(self.dt_rd)

    @property
    def duration(self) -> float:
        return float(sum(self.dt_rd))


def _solve(a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        warnings.warn("singular circuit matrix; using pseudo-inverse", RuntimeWarning, stacklevel=3)
        return np.linalg.pinv(a) @ rhs


def _step_response(A, b, t, tau_r):
    """``(g_prev, g_cur)``: state change from unit previous / current amplitudes over one step."""
    eA = expm(t * A)
    eye = np.eye(3)
    step = _solve(A, (eA - eye) @ b)  # A^-1 (e^{tA} - 1) b
    if tau_r > 0:
        lag = _solve(A + eye / tau_r, (eA - math.exp(-t / tau_r) * eye) @ b)
    else:
        lag = np.zeros(3, dtype=complex)
    # x(t) = e^{tA} x0 + p_cur * (step - lag) + p_prev * lag
    return eA, lag, step - lag


def compensation_amplitude(A, b, x0, p_prev, t, r, P, tau_r) -> complex:
    """Drive amplitude minimising ``||P (x(t) - r x0)||`` for a constant circuit matrix ``A``."""
    eA, lag, gain = _step_response(A, b, t, tau_r)
    w = P @ ((eA - r * np.eye(3)) @ x0 + p_prev * lag)
    v = -(P @ gain)
    vv = np.vdot(v, v).real
    if vv <= 1e-300:
        raise DegenerateDirectionError("compensation step cannot affect the weighted state")
    return complex(np.vdot(v, w) / vv)


def propagate_constant_A(A, b, x0, p_prev, p_cur, t, tau_r) -> np.ndarray:
    """Closed-form state after one step with frozen ``A``."""
    eA, lag, gain = _step_response(A, b, t, tau_r)
    return eA @ x0 + p_cur * gain + p_prev * lag


def ringdown_steps(x0, p_prev, cfg: RingdownConfig, model: ResonatorModel) -> list[complex]:
    """Amplitudes for ``cfg.n_rd`` compensation steps starting from state ``x0``.

    Within each step ``A`` is frozen at its value for the state at the end of
    the previous step; that state is predicted with the same frozen-``A``
    propagation.
    """
    x = np.asarray(x0, dtype=complex)
    prev = complex(p_prev)
    amps = []
    for t in cfg.dt_rd:
        A = model.A(x)
        c = compensation_amplitude(A, model.b, x, prev, t, cfg.r, cfg.P, model.tau_r)
        amps.append(c)
        x = propagate_constant_A(A, model.b, x, prev, c, t, model.tau_r)
        prev = c
    return amps


def _compensation_derivatives(model: ResonatorModel, x0, p_prev, t, r, P):
    """Amplitude ``c`` and its sensitivities.

    ``dc = gx . dx0 + gp * dp_prev + gs * ds`` with ``ds = 2 Re(conj(I0) dI0)``.
    """
    tau_r = model.tau_r
    A = model.A(x0)
    E = model.dA_ds(x0)
    b = model.b
    eye = np.eye(3)
    eA = expm(t * A)
    dE = expm_frechet(t * A, t * E, compute_expm=False)
    Ainv = _solve(A, eye)
    step = Ainv @ (eA - eye) @ b
    dstep = (-Ainv @ E @ Ainv @ (eA - eye) + Ainv @ dE) @ b
    if tau_r > 0:
        Binv = _solve(A + eye / tau_r, eye)
        decay = math.exp(-t / tau_r)
        lag = Binv @ (eA - decay * eye) @ b
        dlag = (-Binv @ E @ Binv @ (eA - decay * eye) + Binv @ dE) @ b
    else:
        lag = np.zeros(3, dtype=complex)
        dlag = np.zeros(3, dtype=complex)
    w = P @ ((eA - r * eye) @ x0 + p_prev * lag)
    dw = P @ (dE @ x0 + p_prev * dlag)
    v = P @ (lag - step)
    dv = P @ (dlag - dstep)
    vv = np.vdot(v, v).real
    if vv <= 1e-300:
        raise DegenerateDirectionError("compensation step cannot affect the weighted state")
    c = np.vdot(v, w) / vv
    gx = (v.conj() @ P @ (eA - r * eye)) / vv
    gp = np.vdot(v, P @ lag) / vv
    gs = (np.vdot(dv, w) + np.vdot(v, dw)) / vv - c * (2 * np.vdot(v, dv).real) / vv
    return complex(c), gx, complex(gp), complex(gs)


# --- the distortion operator ---------------------------------------------------------------


class ResonatorDistortion(DistortionOperator):
    """Resonator circuit as ``g: R^N (x) R^2 (volts) -> R^M (x) R^2 (rad/s)``.

    With a :class:`RingdownConfig` the compensation steps are computed from
    the circuit state at the end of the pulse and appended to the drive
    inside the operator, so the output window covers pulse plus compensation
    (plus ``tail``).
    """

    def __init__(
        self,
        model: ResonatorModel,
        n: int,
        dt: float,
        dt_out: float,
        m_out: int | None = None,
        tail: float = 0.0,
        ringdown: RingdownConfig | None = None,
        options: SolverOptions | None = None,
        jacobian_mode: str = "zero-order",
        epsilon: float | None = None,
        threads: int = 1,
    ):
        if model.tau_r >= dt / 10:
            raise ValidationError("forcing rise time must be below dt/10")
        span = n * dt + (ringdown.duration if ringdown else 0.0)
        if m_out is None:
            m_out = output_steps(1, span, dt_out, tail)
        if m_out * dt_out < span * (1 - 1e-12) and ringdown is not None:
            raise ValidationError("output window must cover the compensation steps")
        super().__init__(n, 2, dt, m_out, 2, dt_out)
        self.model = model
        self.ringdown = ringdown
        self.options = options or SolverOptions()
        if jacobian_mode not in ("zero-order", "exact"):
            raise ValueError(f"unknown Jacobian mode {jacobian_mode!r}")
        self.jacobian_mode = jacobian_mode
        self.epsilon = epsilon
        self.threads = max(1, int(threads))
        self._j0: DistortionJacobian | None = None
        self.last_state: np.ndarray | None = None
        self.last_compensation: list[complex] = []

    # window helpers

    @property
    def sample_times(self) -> np.ndarray:
        return (np.arange(self.m_out) + 0.5) * self.dt_out

    @property
    def pulse_end(self) -> float:
        return self.n_in * self.dt_in

    @property
    def window_end(self) -> float:
        end = self.pulse_end + (self.ringdown.duration if self.ringdown else 0.0)
        return max(end, self.m_out * self.dt_out)

    def _with_options(self, options: SolverOptions) -> "ResonatorDistortion":
        g = self.with_model(self.model)
        g.options = options
        return g

    def with_model(self, model: ResonatorModel) -> "ResonatorDistortion":
        return ResonatorDistortion(
            model,
            self.n_in,
            self.dt_in,
            self.dt_out,
            self.m_out,
            ringdown=self.ringdown,
            options=self.options,
            jacobian_mode=self.jacobian_mode,
            epsilon=self.epsilon,
            threads=self.threads,
        )

    # simulation

    def _edges(self):
        e = list(np.arange(self.n_in + 1) * self.dt_in)
        if self.ringdown:
            for w in self.ringdown.dt_rd:
                e.append(e[-1] + w)
        if self.window_end > e[-1] * (1 + 1e-12):
            e.append(self.window_end)
        return np.asarray(e)

    def simulate(self, v: np.ndarray, n_sens: int = 0, sens_forcing=None):
        """Drive the circuit with pulse ``v``; returns ``(Z_samples, Z_edges, amplitudes, comp_data)``.

        ``sens_forcing(seg_amps_row0) -> (prev, cur)`` supplies sensitivity
        forcing columns when ``n_sens > 0``.
        """
        model = self.model
        edges = self._edges()
        n_seg = edges.size - 1
        n = self.n_in
        n_rd = self.ringdown.n_rd if self.ringdown else 0
        amps = np.zeros(n_seg, dtype=complex)
        amps[:n] = v[:, 0] + 1j * v[:, 1]
        ts = self.sample_times
        rows = 1 + n_sens
        Z_samples = np.zeros((ts.size, rows, 3), dtype=complex)
        Z_edges = np.zeros((n_seg + 1, rows, 3), dtype=complex)
        sprev, scur = sens_forcing if n_sens else (np.zeros((n_seg, 0)), np.zeros((n_seg, 0)))

        def run(seg_lo, seg_hi, Z0):
            prev = np.concatenate([np.concatenate([[0.0], amps[:-1]])[seg_lo:seg_hi, None], sprev[seg_lo:seg_hi]], axis=1)
            cur = np.concatenate([amps[seg_lo:seg_hi, None], scur[seg_lo:seg_hi]], axis=1)
            e = edges[seg_lo : seg_hi + 1]
            lo = np.searchsorted(ts, e[0], side="right") if seg_lo > 0 else 0
            hi = np.searchsorted(ts, e[-1], side="right") if seg_hi < n_seg else ts.size
            out, Ze, _ = _integrate(model, self.options, Z0, e, prev, cur, ts[lo:hi])
            Z_samples[lo:hi] = out
            Z_edges[seg_lo : seg_hi + 1] = Ze
            return Ze[-1]

        Z = np.zeros((rows, 3), dtype=complex)
        comp = []
        if n_rd == 0:
            run(0, n_seg, Z)
        else:
            Z = run(0, n, Z)
            cfg = self.ringdown
            for j in range(n_rd):
                x0 = Z[0]
                p_prev = amps[n + j - 1]
                A = model.A(x0)
                c = compensation_amplitude(A, model.b, x0, p_prev, cfg.dt_rd[j], cfg.r, cfg.P, model.tau_r)
                amps[n + j] = c
                comp.append((x0.copy(), p_prev))
                Z = run(n + j, n + j + 1, Z)
            if n_seg > n + n_rd:
                run(n + n_rd, n_seg, Z)
        self.last_compensation = list(amps[n : n + n_rd])
        return Z_samples, Z_edges, amps, comp

    def _output(self, Z_samples_row: np.ndarray) -> np.ndarray:
        I = Z_samples_row[:, 0]
        return self.model.kappa * np.stack([I.real, I.imag], axis=1)

    def _apply(self, v):
        Zs, Ze, _, _ = self.simulate(v)
        self.last_state = Ze[-1, 0].copy()
        return self._output(Zs[:, 0])

    def distort(self, p) -> np.ndarray:
        return self.apply(p).values

    # Jacobians

    def _jacobian(self, v):
        if self.jacobian_mode == "exact":
            return self.jacobian_exact(v)
        return self.jacobian_zero_order()

    def default_epsilon(self) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return 1e-3 * linear_voltage_scale(self.model)

    def linearity_metric(self, eps: float) -> float:
        """``||A(eps ||b|| / ||A0||) - A0|| / ||A0||`` for a state of that current."""
        m = self.model
        A0 = m.A()
        nb = np.linalg.norm(m.b)
        n0 = np.linalg.norm(A0, 2)
        I = eps * nb / n0
        return float(np.linalg.norm(m.A(np.array([I, 0, 0])) - A0, 2) / n0)

    def jacobian_zero_order(self, eps: float | None = None) -> DistortionJacobian:
        """Columns ``g(eps e_{n,k}) / eps``; cached per operator because it is pulse-independent."""
        if eps is None and self._j0 is not None:
            return self._j0
        e = self.default_epsilon() if eps is None else float(eps)
        metric = self.linearity_metric(e)
        log.info("zero-order Jacobian: eps=%.3g V, linearity metric %.3g", e, metric)
        if metric > 1e-3:
            warnings.warn(f"eps={e:g} may be outside the linear regime (metric {metric:.3g})", RuntimeWarning, stacklevel=2)
        cols = [(n, k) for n in range(self.n_in) for k in range(2)]

        # absolute tolerances are scaled with the probe so the columns are as
        # accurate, relatively, as a unit-volt solve
        probe = self._with_options(self.options.scaled_abs(min(e, 1.0)))

        def column(nk):
            p = np.zeros((self.n_in, 2))
            p[nk] = e
            self._count()
            return probe._apply(p) / e

        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as ex:
                res = list(ex.map(column, cols))
        else:
            res = [column(c) for c in cols]
        t = np.zeros((self.m_out, 2, self.n_in, 2))
        for (n, k), col in zip(cols, res):
            t[:, :, n, k] = col
        jac = DistortionJacobian(t, exact=self.model.is_linear and self.ringdown is None)
        if eps is None:
            self._j0 = jac
        return jac

    def jacobian_exact(self, p) -> DistortionJacobian:
        """Jacobian from forward sensitivity equations along the trajectory of ``p``.

        One sensitivity column per real input (``2N``); with ringdown, two
        more per compensation step, combined afterwards with the derivative
        of each compensation amplitude with respect to the state it was
        computed from.
        """
        v = self._check(p)
        n = self.n_in
        n_rd = self.ringdown.n_rd if self.ringdown else 0
        n_seg = self._edges().size - 1
        n_in_cols = 2 * (n + n_rd)
        sprev = np.zeros((n_seg, n_in_cols), dtype=complex)
        scur = np.zeros((n_seg, n_in_cols), dtype=complex)
        for seg in range(n + n_rd):
            for k, u in enumerate((1.0, 1j)):
                col = 2 * seg + k
                scur[seg, col] = u
                if seg + 1 < n_seg:
                    sprev[seg + 1, col] = u
        self._count()
        Zs, Ze, amps, comp = self.simulate(v, n_in_cols, (sprev, scur))
        Ys = Zs[:, 1:, :]  # (M, cols, 3)
        Ye = Ze[:, 1:, :]  # (edges, cols, 3)
        n_p = 2 * n
        # total derivative of each sampled state w.r.t. the real pulse entries
        dX = Ys[:, :n_p, :].copy()
        if n_rd:
            cfg = self.ringdown
            dc = np.zeros((n_rd, n_p), dtype=complex)
            for j in range(n_rd):
                x0, p_prev = comp[j]
                edge = n + j
                dx0 = Ye[edge, :n_p, :].copy()
                for i in range(j):
                    dx0 += Ye[edge, n_p + 2 * i, :][None, :] * dc[i].real[:, None]
                    dx0 += Ye[edge, n_p + 2 * i + 1, :][None, :] * dc[i].imag[:, None]
                if j == 0:
                    dpp = np.zeros(n_p, dtype=complex)
                    dpp[2 * (n - 1)] = 1.0
                    dpp[2 * (n - 1) + 1] = 1j
                else:
                    dpp = dc[j - 1]
                _, gx, gp, gs = _compensation_derivatives(self.model, x0, p_prev, cfg.dt_rd[j], cfg.r, cfg.P)
                ds = 2.0 * (x0[0].real * dx0[:, 0].real + x0[0].imag * dx0[:, 0].imag)
                dc[j] = dx0 @ gx + gp * dpp + gs * ds
            for j in range(n_rd):
                dX += Ys[:, n_p + 2 * j, None, :] * dc[j].real[None, :, None]
                dX += Ys[:, n_p + 2 * j + 1, None, :] * dc[j].imag[None, :, None]
        kap = self.model.kappa
        dI = dX[:, :, 0]  # (M, 2N)
        t = np.zeros((self.m_out, 2, n, 2))
        t[:, 0] = kap * dI.real.reshape(self.m_out, n, 2)
        t[:, 1] = kap * dI.imag.reshape(self.m_out, n, 2)
        return DistortionJacobian(t, exact=True)


def resonator_distort(p: Pulse, model: ResonatorModel, dt_out: float, m_out: int | None = None, tail: float = 0.0, **kw):
    """One-shot distortion of a voltage pulse through ``model``."""
    g = ResonatorDistortion(model, p.values.shape[0], p.dt, dt_out, m_out=m_out, tail=tail, **kw)
    return g.apply(p)


def linear_steady_state(V: complex, model: ResonatorModel) -> np.ndarray:
    """Fixed point of the linearized circuit under constant drive ``V``."""
    lin = model.linearized()
    return _solve(lin.A(), -lin.b * V)


def linear_voltage_scale(model: ResonatorModel) -> float:
    """Drive voltage at which kinetic-inductance detuning equals the linewidth (linear estimate)."""
    if model.is_linear:
        return 1.0
    w0, Q = model.resonance()
    gain = abs(linear_steady_state(1.0, model)[0])
    # alpha_L |I|^2 ~ 1/Q  =>  |I| ~ (Q alpha_L)^(-1/2)
    terms = []
    if model.alpha_L > 0:
        terms.append((1.0 / (Q * model.alpha_L)) ** 0.5)
    if model.alpha_R > 0:
        terms.append((1.0 / (Q * model.alpha_R)) ** (1.0 / model.eta))
    return min(terms) / gain


def steady_state_response(
    V: float,
    model: ResonatorModel,
    rel_tol: float = 1e-6,
    max_time: float | None = None,
    options: SolverOptions | None = None,
) -> float:
    """Steady-state Rabi frequency ``kappa |I_L| / 2 pi`` (Hz) under constant drive ``V``.

    The circuit is driven from rest in chunks of a few ringdown times until
    ``|I_L|`` changes by less than ``rel_tol`` over one carrier period, then
    the fixed point is polished with Newton iterations.
    """
    if not V > 0:
        raise ValidationError("drive voltage must be positive")
    opts = options or SolverOptions()
    w0, Q = model.resonance()
    tau = 2 * Q / w0
    period = 2 * np.pi / max(model.omega_r, w0)
    chunk = 5 * tau
    max_time = 400 * tau if max_time is None else max_time
    m = model.replace(tau_r=0.0)
    x = np.zeros(3, dtype=complex)
    t = 0.0
    history = []
    while True:
        edges = np.array([0.0, chunk])
        prev = np.array([[V if t > 0 else 0.0]], dtype=complex)
        cur = np.array([[V]], dtype=complex)
        out, Ze, _ = _integrate(m, opts, x[None, :], edges, prev, cur, np.array([chunk - period, chunk]))
        x = Ze[-1, 0]
        t += chunk
        a0, a1 = abs(out[0, 0, 0]), abs(out[1, 0, 0])
        history.append(a1)
        if a1 > 0 and abs(a1 - a0) / a1 < rel_tol and (len(history) < 2 or abs(history[-1] - history[-2]) / a1 < 10 * rel_tol):
            break
        if t >= max_time:
            raise ConvergenceError(
                f"inductor current did not settle within {max_time:.3g} s at {V} V; last |I| values {history[-4:]}"
            )
    x = _newton_fixed_point(m, V, x)
    return float(model.kappa * abs(x[0]) / (2 * np.pi))


def _newton_fixed_point(model: ResonatorModel, V: complex, x: np.ndarray, iters: int = 30) -> np.ndarray:
    """Solve ``A(x) x + V b = 0`` in real coordinates starting near ``x``."""

    def F(z):
        xc = z[:3] + 1j * z[3:]
        f = model.A(xc) @ xc + V * model.b
        return np.concatenate([f.real, f.imag])

    z = np.concatenate([x.real, x.imag])
    scale = np.maximum(np.abs(z), 1e-12)
    for _ in range(iters):
        f = F(z)
        Jm = np.empty((6, 6))
        for i in range(6):
            h = 1e-7 * scale[i]
            e = np.zeros(6)
            e[i] = h
            Jm[:, i] = (F(z + e) - F(z - e)) / (2 * h)
        dz = np.linalg.solve(Jm, -f)
        z = z + dz
        if np.max(np.abs(dz) / scale) < 1e-13:
            break
    return z[:3] + 1j * z[3:]
