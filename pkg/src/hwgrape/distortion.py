"""Discretized distortion operators ``g: R^N (x) R^K -> R^M (x) R^L`` and their Jacobians.

Jacobian tensors use index order ``(m, l, n, k)``: output step, output
channel, input step, input channel.  Output samples sit at the step midpoints
``(m - 1/2) * dt_out``; input step ``n`` spans ``[(n - 1) dt, n dt)``.
Flattened (subsystem, channel) indices are subsystem-major.
"""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .quantum import DimensionError, DistortedPulse, Pulse, ValidationError


class CompositionError(DimensionError):
    """Range of the inner operator does not match the domain of the outer one."""


@dataclass(frozen=True)
class DistortionJacobian:
    """Sensitivities ``dq[m, l] / dp[n, k]``."""

    tensor: np.ndarray
    exact: bool = True

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=float)
        if t.ndim != 4:
            raise DimensionError(f"Jacobian must be rank 4, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValidationError("Jacobian has non-finite entries")
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "tensor", t)

    @property
    def flag(self) -> str:
        return "exact" if self.exact else "zero-order-approximation"

    @property
    def shape(self):
        return self.tensor.shape

    def pullback(self, grad_q: np.ndarray) -> np.ndarray:
        """Contract an ``(M, L)`` gradient over ``m, l``, giving ``(N, K)``."""
        return np.einsum("ml,mlnk->nk", grad_q, self.tensor)

    def push(self, dp: np.ndarray) -> np.ndarray:
        """Contract an ``(N, K)`` perturbation over ``n, k``, giving ``(M, L)``."""
        return np.einsum("mlnk,nk->ml", self.tensor, dp)


def _values(p) -> np.ndarray:
    if isinstance(p, (Pulse, DistortedPulse)):
        return p.values
    v = np.asarray(p, dtype=float)
    return v[:, None] if v.ndim == 1 else v


class DistortionOperator:
    """Base class: subclasses implement ``_apply`` and ``_jacobian`` on raw arrays.

    ``calls`` counts evaluations of the operator.
    """

    linear = False

    def __init__(self, n_in: int, k_in: int, dt_in: float, m_out: int, l_out: int, dt_out: float):
        if min(n_in, k_in, m_out, l_out) < 1:
            raise ValidationError("operator shapes must be positive")
        if not (dt_in > 0 and dt_out > 0):
            raise ValidationError("step widths must be positive")
        self.n_in, self.k_in, self.dt_in = int(n_in), int(k_in), float(dt_in)
        self.m_out, self.l_out, self.dt_out = int(m_out), int(l_out), float(dt_out)
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def domain(self) -> tuple[int, int, float]:
        return (self.n_in, self.k_in, self.dt_in)

    @property
    def range(self) -> tuple[int, int, float]:
        return (self.m_out, self.l_out, self.dt_out)

    @property
    def calls(self) -> int:
        return self._calls

    def _count(self, n: int = 1) -> None:
        with self._lock:
            self._calls += n

    def reset_calls(self) -> None:
        with self._lock:
            self._calls = 0

    def _check(self, p) -> np.ndarray:
        v = _values(p)
        if v.shape != (self.n_in, self.k_in):
            raise DimensionError(f"pulse shape {v.shape} does not match operator domain {(self.n_in, self.k_in)}")
        if isinstance(p, Pulse) and not math.isclose(p.dt, self.dt_in, rel_tol=1e-12):
            raise DimensionError(f"pulse step {p.dt} does not match operator step {self.dt_in}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("pulse has non-finite values")
        return v

    def apply(self, p) -> DistortedPulse:
        v = self._check(p)
        self._count()
        return DistortedPulse(self._apply(v), self.dt_out)

    def jacobian(self, p) -> DistortionJacobian:
        return self._jacobian(self._check(p))

    def _apply(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _jacobian(self, v: np.ndarray) -> DistortionJacobian:
        raise NotImplementedError

    def __call__(self, p) -> DistortedPulse:
        return self.apply(p)


class LinearOperator(DistortionOperator):
    """``q = phi . p`` for a fixed rank-4 tensor ``phi``."""

    linear = True

    def __init__(self, tensor: np.ndarray, dt_in: float, dt_out: float):
        t = np.asarray(tensor, dtype=float)
        if t.ndim != 4:
            raise DimensionError("linear operator tensor must be rank 4")
        if not np.all(np.isfinite(t)):
            raise ValidationError("tensor has non-finite entries")
        m, l, n, k = t.shape
        super().__init__(n, k, dt_in, m, l, dt_out)
        self.tensor = t
        self.tensor.setflags(write=False)

    def _apply(self, v):
        return np.einsum("mlnk,nk->ml", self.tensor, v)

    def _jacobian(self, v):
        return DistortionJacobian(self.tensor, exact=True)


class IdentityOperator(LinearOperator):
    """Resampling operator: every input step repeated ``substeps`` times."""

    def __init__(self, n: int, k: int, dt: float, substeps: int = 1):
        s = int(substeps)
        if s < 1:
            raise ValidationError("substeps must be >= 1")
        t = np.zeros((n * s, k, n, k))
        for m in range(n * s):
            t[m, np.arange(k), m // s, np.arange(k)] = 1.0
        super().__init__(t, dt, dt / s)
        self.substeps = s

    def _apply(self, v):
        return np.repeat(v, self.substeps, axis=0)


class CrosstalkOperator(LinearOperator):
    """Time-independent mixing ``q[n, (i,l)] = sum_{j,k} chi[(i,l), (j,k)] p[n, (j,k)]``."""

    def __init__(self, chi: np.ndarray, n: int, dt: float):
        chi = np.asarray(chi, dtype=float)
        if chi.ndim != 2 or chi.shape[0] != chi.shape[1]:
            raise ValidationError(f"crosstalk matrix must be square, got {chi.shape}")
        if not np.all(np.isfinite(chi)):
            raise ValidationError("crosstalk matrix has non-finite entries")
        c = chi.shape[0]
        t = np.zeros((n, c, n, c))
        for m in range(n):
            t[m, :, m, :] = chi
        super().__init__(t, dt, dt)
        self.chi = chi

    def _apply(self, v):
        return v @ self.chi.T


def crosstalk_operator(chi: np.ndarray, n: int, dt: float) -> CrosstalkOperator:
    return CrosstalkOperator(chi, n, dt)


class ComposedOperator(DistortionOperator):
    """``outer . inner``; the Jacobian follows the chain rule over the intermediate indices."""

    def __init__(self, outer: DistortionOperator, inner: DistortionOperator):
        n2, k2, dt2 = outer.domain
        m1, l1, dt1 = inner.range
        if (n2, k2) != (m1, l1) or not math.isclose(dt2, dt1, rel_tol=1e-12):
            raise CompositionError(f"inner range {inner.range} does not match outer domain {outer.domain}")
        super().__init__(inner.n_in, inner.k_in, inner.dt_in, outer.m_out, outer.l_out, outer.dt_out)
        self.outer, self.inner = outer, inner
        self.linear = outer.linear and inner.linear

    def _apply(self, v):
        return self.outer.apply(self.inner.apply(v).values).values

    def _jacobian(self, v):
        j1 = self.inner.jacobian(v)
        mid = self.inner.apply(v).values if not self.outer.linear else np.zeros((self.inner.m_out, self.inner.l_out))
        j2 = self.outer.jacobian(mid)
        t = np.einsum("mlab,abnk->mlnk", j2.tensor, j1.tensor)
        return DistortionJacobian(t, exact=j1.exact and j2.exact)


def compose(outer: DistortionOperator, inner: DistortionOperator) -> ComposedOperator:
    return ComposedOperator(outer, inner)


# --- convolution kernels -------------------------------------------------------


def output_steps(n: int, dt: float, dt_out: float, tail: float = 0.0) -> int:
    """Number of output steps needed to cover ``n * dt + tail``."""
    return int(math.ceil((n * dt + tail) / dt_out - 1e-9))


def exponential_kernel(taus: Sequence[float]) -> Callable[[float], np.ndarray]:
    """Diagonal causal kernel ``exp(-t/tau_k) / tau_k`` (unit integral per channel)."""
    taus = np.asarray(taus, dtype=float)

    def kernel(t):
        if t < 0:
            return np.zeros((taus.size, taus.size))
        return np.diag(np.exp(-t / taus) / taus)

    return kernel


def convolution_tensor(
    kernel: Callable[[float], np.ndarray],
    n: int,
    dt: float,
    m: int,
    dt_out: float,
    breakpoints: Sequence[float] = (0.0,),
    epsabs: float = 1e-10,
) -> np.ndarray:
    """Entries ``int_{(n-1)dt}^{n dt} phi_{l,k}((m - 1/2) dt_out - tau) dtau`` by adaptive quadrature.

    ``kernel(t)`` returns an ``(L, K)`` array; ``breakpoints`` lists kernel
    times where it is discontinuous, which are handed to the integrator.
    """
    k0 = np.asarray(kernel(0.5 * dt), dtype=float)
    if k0.ndim != 2:
        raise DimensionError("kernel must return an (L, K) matrix")
    n_l, n_k = k0.shape
    # reject kernels that are non-finite anywhere on the window we integrate over
    span = np.linspace(-n * dt, m * dt_out, 257)
    if not all(np.all(np.isfinite(np.asarray(kernel(t), dtype=float))) for t in span):
        raise ValidationError("kernel has non-finite samples")
    bps = np.asarray(breakpoints, dtype=float)
    out = np.zeros((m, n_l, n, n_k))
    for mi in range(m):
        tm = (mi + 0.5) * dt_out
        for ni in range(n):
            # substitute u = tm - tau: integrate phi(u) over [tm - n dt, tm - (n-1) dt]
            a, b = tm - (ni + 1) * dt, tm - ni * dt
            pts = [p for p in bps if a < p < b]
            for li in range(n_l):
                for ki in range(n_k):
                    val, _ = integrate.quad(
                        lambda u: kernel(u)[li, ki], a, b, points=pts or None, epsabs=epsabs, epsrel=0.0, limit=200
                    )
                    out[mi, li, ni, ki] = val
    return out


def risetime_tensor(taus: Sequence[float], n: int, dt: float, m: int | None = None, dt_out: float | None = None) -> np.ndarray:
    """Closed-form convolution tensor of independent exponential rise times per channel.

    With ``x = t'_m - t_{n-1}`` the entry is 0 for ``x <= 0``, ``1 - e^{-x/tau}``
    while the step is still on (``x < dt``), and ``e^{-(x-dt)/tau} - e^{-x/tau}``
    once it has ended.  The expression is continuous in ``x``, so coincident
    sample and step-edge times need no tie-break.
    """
    taus = np.asarray(taus, dtype=float)
    if taus.ndim != 1 or taus.size < 1:
        raise ValidationError("need one rise time per channel")
    if np.any(~np.isfinite(taus)) or np.any(taus <= 0):
        raise ValidationError("rise times must be positive")
    dt_out = dt if dt_out is None else dt_out
    if m is None:
        m = output_steps(n, dt, dt_out, tail=10 * taus.max())
    k = taus.size
    tp = (np.arange(m) + 0.5) * dt_out
    x = tp[:, None] - np.arange(n)[None, :] * dt  # (m, n)
    out = np.zeros((m, k, n, k))
    for c, tau in enumerate(taus):
        on = (x > 0) & (x < dt)
        off = x >= dt
        vals = np.zeros_like(x)
        vals[on] = -np.expm1(-x[on] / tau)
        vals[off] = np.exp(-(x[off] - dt) / tau) - np.exp(-x[off] / tau)
        out[:, c, :, c] = vals
    return out


class RiseTimeOperator(LinearOperator):
    """Per-channel exponential rise time (a diagonal convolution)."""

    def __init__(self, taus: Sequence[float], n: int, dt: float, m: int | None = None, dt_out: float | None = None):
        dt_out = dt if dt_out is None else dt_out
        super().__init__(risetime_tensor(taus, n, dt, m, dt_out), dt, dt_out)
        self.taus = tuple(float(t) for t in taus)


# --- serialization ---------------------------------------------------------------


def save_tensor(path, tensor: np.ndarray) -> None:
    """Write a rank-4 tensor as ``.npy`` (binary) or CSV rows ``m,l,n,k,value``.

    Both layouts are row-major in ``(m, l, n, k)`` with 0-based indices.
    """
    path = Path(path)
    t = np.asarray(tensor, dtype=float)
    if path.suffix == ".npy":
        np.save(path, t)
        return
    with open(path, "w", newline="") as fh:
        fh.write("# shape=" + ",".join(str(s) for s in t.shape) + "\n")
        w = csv.writer(fh)
        w.writerow(["m", "l", "n", "k", "value"])
        for idx in np.ndindex(*t.shape):
            w.writerow([*idx, repr(float(t[idx]))])


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    shape = None
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("# shape="):
                shape = tuple(int(s) for s in line[8:].strip().split(","))
            elif line.startswith("#") or line.startswith("m,"):
                continue
            elif line.strip():
                rows.append(line.strip().split(","))
    if shape is None:
        raise ValidationError("tensor CSV lacks a '# shape=' header")
    out = np.zeros(shape)
    for r in rows:
        out[tuple(int(v) for v in r[:4])] = float(r[4])
    return out


def load_crosstalk_csv(path) -> np.ndarray:
    """Read a square crosstalk matrix in block layout (rows ``(i,l)``, columns ``(j,k)``).

    Lines starting with ``#`` are skipped, as are a header row and a leading
    label column when they are not numeric.
    """
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].lstrip().startswith("#"):
                continue
            rows.append([c.strip() for c in rec if c.strip() != ""])

    def numeric(s):
        try:
            float(s)
            return True
        except ValueError:
            return False

    rows = [r for r in rows if any(numeric(c) for c in r)]
    mat = [[float(c) for c in r if numeric(c)] for r in rows]
    chi = np.array(mat, dtype=float)
    if chi.ndim != 2 or chi.shape[0] != chi.shape[1]:
        raise ValidationError(f"crosstalk CSV is not square: {chi.shape}")
    return chi
