"""Distortion-aware GRAPE with conjugate directions, robustness averaging and bookkeeping."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .constants import LINE_SEARCH_TOL
from .distortion import DistortionJacobian, DistortionOperator
from .quantum import ControlProblem, DimensionError, DistortedPulse, Pulse, ValidationError, fidelity, fidelity_gradient

log = logging.getLogger(__name__)

GOLDEN = 0.5 * (1 + math.sqrt(5))

DistortionFamily = Callable[..., DistortionOperator]


class GradientCheckError(RuntimeError):
    """The analytic gradient disagrees with finite differences beyond the allowed error."""


@dataclass(frozen=True)
class HypothesisSample:
    """One parameter hypothesis: detuning (rad/s), power error, distortion overrides, weight."""

    detuning: float = 0.0
    power_error: float = 0.0
    overrides: dict = field(default_factory=dict)
    weight: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.weight) and self.weight >= 0):
            raise ValidationError("sample weight must be non-negative")
        if not (np.isfinite(self.detuning) and np.isfinite(self.power_error)):
            raise ValidationError("sample parameters must be finite")
        object.__setattr__(self, "overrides", dict(self.overrides))

    @property
    def key(self) -> tuple:
        return tuple(sorted(self.overrides.items()))


NOMINAL = (HypothesisSample(),)


def normalize_samples(samples: Sequence[HypothesisSample] | None) -> tuple[HypothesisSample, ...]:
    if samples is None:
        return NOMINAL
    samples = tuple(samples)
    if not samples:
        raise ValidationError("at least one hypothesis sample is required")
    total = math.fsum(s.weight for s in samples)
    if not total > 0:
        raise ValidationError("sample weights sum to zero")
    if abs(total - 1.0) > 1e-12:
        samples = tuple(
            HypothesisSample(s.detuning, s.power_error, s.overrides, s.weight / total) for s in samples
        )
    return samples


def uniform_samples(values: Sequence[float], parameter: str = "detuning") -> tuple[HypothesisSample, ...]:
    """Equal-weight samples over one parameter (``detuning``, ``power_error`` or an override name)."""
    w = 1.0 / len(values)
    out = []
    for v in values:
        if parameter == "detuning":
            out.append(HypothesisSample(detuning=float(v), weight=w))
        elif parameter == "power_error":
            out.append(HypothesisSample(power_error=float(v), weight=w))
        else:
            out.append(HypothesisSample(overrides={parameter: float(v)}, weight=w))
    return tuple(out)


class OperatorPool:
    """Resolves the distortion operator for each hypothesis.

    A plain operator serves every sample (its overrides must be empty); a
    family is called as ``family(**overrides)`` once per distinct override set.
    """

    def __init__(self, g: DistortionOperator | DistortionFamily):
        self._fixed = g if isinstance(g, DistortionOperator) else None
        self._family = None if self._fixed is not None else g
        self._cache: dict[tuple, DistortionOperator] = {}

    def get(self, sample: HypothesisSample) -> DistortionOperator:
        if self._fixed is not None:
            if sample.overrides:
                raise ValidationError("distortion overrides need an operator family, not a fixed operator")
            return self._fixed
        key = sample.key
        if key not in self._cache:
            self._cache[key] = self._family(**sample.overrides)
        return self._cache[key]

    def operators(self) -> list[DistortionOperator]:
        return [self._fixed] if self._fixed is not None else list(self._cache.values())

    @property
    def calls(self) -> int:
        return sum(op.calls for op in self.operators())


def _pool(g) -> OperatorPool:
    return g if isinstance(g, OperatorPool) else OperatorPool(g)


# --- ringdown penalty ------------------------------------------------------------------


def ringdown_penalty(q, m0: int, scale: float = 1.0) -> tuple[float, np.ndarray]:
    """``scale * sum_{m >= m0, l} q[m,l]^2`` with 1-based ``m0`` and its gradient."""
    v = q.values if isinstance(q, DistortedPulse) else np.asarray(q, dtype=float)
    M = v.shape[0]
    if not (1 <= m0 <= M + 1):
        raise ValidationError(f"m0 must be in [1, {M + 1}], got {m0}")
    tail = v[m0 - 1 :]
    grad = np.zeros_like(v)
    grad[m0 - 1 :] = 2.0 * scale * tail
    return float(scale * np.sum(tail * tail)), grad


@dataclass(frozen=True)
class PenaltySpec:
    m0: int
    scale: float


# --- averaged objective ----------------------------------------------------------------


def _sample_value(q: DistortedPulse, prob: ControlProblem, s: HypothesisSample, penalty: PenaltySpec | None) -> float:
    val = fidelity(q, prob.perturbed(s.detuning, s.power_error))
    if penalty is not None:
        val -= ringdown_penalty(q, penalty.m0, penalty.scale)[0]
    return val


def average_utility(
    p: Pulse, g, prob: ControlProblem, samples=None, penalty: PenaltySpec | None = None
) -> tuple[float, list[float]]:
    """Weighted mean of per-hypothesis objectives, summed in sample order."""
    samples = normalize_samples(samples)
    pool = _pool(g)
    values = []
    for s in samples:
        q = pool.get(s).apply(p)
        values.append(_sample_value(q, prob, s, penalty))
    total = 0.0
    for s, v in zip(samples, values):
        total += s.weight * v
    return total, values


def _jacobian(op: DistortionOperator, p, mode: str, iteration: int = 0, every: int = 1) -> DistortionJacobian:
    if hasattr(op, "jacobian_exact"):
        if mode == "exact" or (mode == "exact-every-k" and iteration % every == 0):
            return op.jacobian_exact(p)
        if mode in ("zero-order", "exact-every-k"):
            return op.jacobian_zero_order()
        raise ValidationError(f"unknown Jacobian mode {mode!r}")
    return op.jacobian(p)


def average_gradient(
    p: Pulse,
    g,
    prob: ControlProblem,
    samples=None,
    penalty: PenaltySpec | None = None,
    jacobian: str = "zero-order",
    iteration: int = 0,
    exact_every: int = 1,
) -> np.ndarray:
    """``sum_i w_i grad_q Phi(q | x_i) . J_p(g | x_i)``; returns an ``(N, K)`` array."""
    samples = normalize_samples(samples)
    pool = _pool(g)
    jac_cache: dict[int, DistortionJacobian] = {}
    total = None
    for s in samples:
        op = pool.get(s)
        q = op.apply(p)
        dq = fidelity_gradient(q, prob.perturbed(s.detuning, s.power_error))
        if penalty is not None:
            dq = dq - ringdown_penalty(q, penalty.m0, penalty.scale)[1]
        if id(op) not in jac_cache:
            jac_cache[id(op)] = _jacobian(op, p, jacobian, iteration, exact_every)
        J = jac_cache[id(op)]
        if J.tensor.shape[:2] != dq.shape:
            raise DimensionError("Jacobian range does not match the distorted pulse")
        contrib = s.weight * J.pullback(dq)
        total = contrib if total is None else total + contrib
    return total


def check_gradient(
    p: Pulse, g, prob, samples=None, penalty=None, jacobian="zero-order", h: float | None = None, n_dirs: int = 3, seed: int = 0
) -> float:
    """Worst relative error of directional derivatives against central differences."""
    grad = average_gradient(p, g, prob, samples, penalty, jacobian)
    scale = max(np.max(np.abs(p.values)), p.bound or 0.0, 1e-300)
    h = 1e-6 * scale if h is None else h
    rng = np.random.default_rng(seed)
    dirs = [grad / (np.linalg.norm(grad) or 1.0)] + [rng.normal(size=p.values.shape) for _ in range(n_dirs - 1)]
    worst = 0.0
    for v in dirs:
        v = v / np.linalg.norm(v)
        up = average_utility(Pulse(p.values + h * v, p.dt, p.unit), g, prob, samples, penalty)[0]
        dn = average_utility(Pulse(p.values - h * v, p.dt, p.unit), g, prob, samples, penalty)[0]
        fd = (up - dn) / (2 * h)
        an = float(np.sum(grad * v))
        ref = max(abs(fd), np.linalg.norm(grad) * 1e-3, 1e-12)
        worst = max(worst, abs(fd - an) / ref)
    return worst


# --- optimizer -------------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    target: float = 0.999
    max_iter: int = 200
    bound: float = 1.0
    seed: int = 0
    init_scale: float = 0.1
    line_search_evals: int = 20
    bracket_growth: float = GOLDEN
    line_search_rtol: float = 1e-3
    initial_step: float = 0.1
    jacobian: str = "zero-order"
    exact_every: int = 5
    stall_tol: float = 1e-10
    stall_iters: int = 3
    gradient_check: bool = False
    penalty_m0: int | None = None
    penalty_scale: float = 0.0

    def __post_init__(self):
        if not 0 < self.target <= 1:
            raise ValidationError("target fidelity must be in (0, 1]")
        if not self.bound > 0:
            raise ValidationError("amplitude bound must be positive")
        if self.max_iter < 0 or self.line_search_evals < 2 or self.bracket_growth <= 1:
            raise ValidationError("invalid iteration limits")
        if self.jacobian not in ("zero-order", "exact", "exact-every-k"):
            raise ValidationError(f"unknown Jacobian mode {self.jacobian!r}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")

    @property
    def penalty(self) -> PenaltySpec | None:
        if self.penalty_m0 is None or self.penalty_scale == 0:
            return None
        return PenaltySpec(int(self.penalty_m0), float(self.penalty_scale))

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown optimizer fields: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    status: str
    pulse: np.ndarray
    dt: float
    unit: str
    trace: list = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)
    ringdown_mode: str = "none"
    gradient_check: float | None = None
    message: str = ""

    @property
    def utility(self) -> float:
        return self.trace[-1]["utility"] if self.trace else float("nan")

    @property
    def calls(self) -> int:
        return self.trace[-1]["calls"] if self.trace else 0

    @property
    def iterations(self) -> int:
        return self.trace[-1]["iteration"] if self.trace else 0

    def final_pulse(self) -> Pulse:
        return Pulse(self.pulse, self.dt, self.unit)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "message": self.message,
            "seed": self.seed,
            "ringdown_mode": self.ringdown_mode,
            "gradient_check": self.gradient_check,
            "config": self.config,
            "dt": self.dt,
            "unit": self.unit,
            "pulse": np.asarray(self.pulse).tolist(),
            "trace": self.trace,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=True)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "utility", "step", "calls"])
        for r in self.trace:
            w.writerow([r["iteration"], repr(r["utility"]), repr(r["step"]), r["calls"]])
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        d = json.loads(text)
        return cls(
            status=d["status"],
            pulse=np.asarray(d["pulse"], dtype=float),
            dt=d["dt"],
            unit=d["unit"],
            trace=d["trace"],
            seed=d["seed"],
            config=d["config"],
            ringdown_mode=d["ringdown_mode"],
            gradient_check=d["gradient_check"],
            message=d["message"],
        )


def initial_guess(shape, cfg: OptimizerConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    a = cfg.init_scale * cfg.bound
    return rng.uniform(-a, a, size=shape)


def line_search(
    f: Callable[[float], float], f0: float, a0: float, max_evals: int = 20, growth: float = GOLDEN, rtol: float = 1e-3
):
    """Maximise ``f`` over ``alpha >= 0`` by bracketing then golden-section refinement.

    Refinement stops once the bracket is narrower than ``rtol`` times its
    upper end.  Returns ``(alpha, f(alpha), evaluations)``; ``alpha = 0``
    when no evaluated point beats ``f0``.
    """
    evals = 0
    best_a, best_f = 0.0, f0

    def ev(a):
        nonlocal evals, best_a, best_f
        evals += 1
        v = f(a)
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite utility at step {a:g}")
        if v > best_f:
            best_a, best_f = a, v
        return v

    fa = ev(a0)
    if fa > f0:
        lo, mid, fmid = 0.0, a0, fa
        hi = a0 * growth
        fhi = ev(hi)
        while fhi > fmid and evals < max_evals:
            lo, mid, fmid = mid, hi, fhi
            hi = hi * growth
            fhi = ev(hi)
    else:
        hi, mid = a0, a0 / growth
        fmid = ev(mid)
        while fmid <= f0 and evals < max_evals:
            hi, mid = mid, mid / growth
            fmid = ev(mid)
        if fmid <= f0:
            return 0.0, f0, evals
        lo = 0.0
    # golden-section on [lo, hi] around mid
    inv = 1.0 / GOLDEN
    while evals < max_evals and (hi - lo) > max(rtol, LINE_SEARCH_TOL) * hi:
        if hi - mid > mid - lo:
            x = mid + (1 - inv) * (hi - mid)
            fx = ev(x)
            if fx > fmid:
                lo, mid, fmid = mid, x, fx
            else:
                hi = x
        else:
            x = mid - (1 - inv) * (mid - lo)
            fx = ev(x)
            if fx > fmid:
                hi, mid, fmid = mid, x, fx
            else:
                lo = x
    return best_a, best_f, evals


def grape_optimize(
    prob: ControlProblem,
    g,
    cfg: OptimizerConfig,
    samples=None,
    initial: np.ndarray | None = None,
    ringdown_mode: str | None = None,
) -> RunRecord:
    """Conjugate-gradient ascent on the averaged objective of ``prob`` composed with ``g``.

    ``g`` is a distortion operator or a family ``factory(**overrides)``.
    Each accepted update is clipped to the amplitude box ``[-B, B]``.
    """
    samples = normalize_samples(samples)
    pool = _pool(g)
    op0 = pool.get(samples[0])
    n, k, dt = op0.domain
    if ringdown_mode is None:
        ringdown_mode = "in-distortion" if getattr(op0, "ringdown", None) is not None else "none"
        if cfg.penalty is not None:
            ringdown_mode = "penalty"
    B = cfg.bound
    unit = "V" if hasattr(op0, "model") else "rad/s"
    p = initial_guess((n, k), cfg) if initial is None else np.clip(np.asarray(initial, dtype=float), -B, B)
    if p.shape != (n, k):
        raise DimensionError(f"initial pulse shape {p.shape} does not match operator domain {(n, k)}")
    penalty = cfg.penalty
    calls0 = pool.calls

    def U(v):
        return average_utility(Pulse(v, dt, unit), pool, prob, samples, penalty)[0]

    record = RunRecord("max-iter", p, dt, unit, seed=cfg.seed, config=cfg.to_dict(), ringdown_mode=ringdown_mode)

    def log_iter(it, val, step):
        record.trace.append({"iteration": it, "utility": float(val), "step": float(step), "calls": int(pool.calls - calls0)})

    if cfg.gradient_check:
        err = check_gradient(Pulse(p, dt, unit), pool, prob, samples, penalty, cfg.jacobian)
        record.gradient_check = err
        limit = 1e-3 if cfg.jacobian == "zero-order" else 1e-5
        if err > limit:
            raise GradientCheckError(f"gradient check failed: relative error {err:.3g} > {limit:g}")

    try:
        phi = U(p)
    except FloatingPointError as exc:
        record.status, record.message = "aborted", str(exc)
        return record
    if not np.isfinite(phi):
        record.status, record.message = "aborted", "non-finite utility at the initial pulse"
        return record
    log_iter(0, phi, 0.0)
    if phi >= cfg.target:
        record.status = "reached-target"
        return record

    d_prev = None
    s_prev = None
    small = 0
    for it in range(1, cfg.max_iter + 1):
        d = average_gradient(Pulse(p, dt, unit), pool, prob, samples, penalty, cfg.jacobian, it - 1, cfg.exact_every)
        if d_prev is None:
            beta = 0.0
        else:
            beta = max(0.0, float(np.sum(d * (d - d_prev))) / max(float(np.sum(d_prev * d_prev)), 1e-300))
        s = d if beta == 0.0 else d + beta * s_prev
        if np.sum(s * d) <= 0:
            s = d
        smax = np.max(np.abs(s))
        if not np.isfinite(smax):
            record.status, record.message = "aborted", "non-finite gradient"
            break
        if smax == 0:
            alpha, phi_new = 0.0, phi
        else:
            a0 = cfg.initial_step * B / smax
            try:
                alpha, phi_new, _ = line_search(
                    lambda a: U(np.clip(p + a * s, -B, B)), phi, a0, cfg.line_search_evals, cfg.bracket_growth, cfg.line_search_rtol
                )
            except FloatingPointError as exc:
                record.status, record.message = "aborted", str(exc)
                break
        p_new = np.clip(p + alpha * s, -B, B)
        step = float(np.max(np.abs(p_new - p)))
        p, phi = p_new, phi_new
        record.pulse = p
        log_iter(it, phi, step)
        log.debug("iteration %d: utility %.10f step %.3g beta %.3g", it, phi, step, beta)
        if phi >= cfg.target:
            record.status = "reached-target"
            break
        small = small + 1 if step < cfg.stall_tol * B else 0
        if small >= cfg.stall_iters:
            record.status = "stalled"
            break
        d_prev, s_prev = d, s
    record.pulse = p
    return record


# --- scans and studies ---------------------------------------------------------------------------


@dataclass
class ScanTable:
    parameter: str
    values: np.ndarray
    fidelities: np.ndarray

    def rows(self):
        return list(zip(self.values.tolist(), self.fidelities.tolist()))

    def window(self, threshold: float, center: float) -> tuple[float, float] | None:
        """Extent of the contiguous run of points above ``threshold`` containing the point nearest ``center``."""
        ok = self.fidelities > threshold
        i = int(np.argmin(np.abs(self.values - center)))
        if not ok[i]:
            return None
        lo = i
        while lo > 0 and ok[lo - 1]:
            lo -= 1
        hi = i
        while hi < ok.size - 1 and ok[hi + 1]:
            hi += 1
        return float(self.values[lo]), float(self.values[hi])


def robustness_scan(
    p: Pulse, g, prob: ControlProblem, parameter: str, values: Sequence[float], base: HypothesisSample | None = None
) -> ScanTable:
    """Fidelity of a fixed pulse as one hypothesis parameter is swept."""
    base = base or HypothesisSample()
    vals = np.asarray(values, dtype=float)
    if vals.ndim != 1 or vals.size == 0 or not np.all(np.isfinite(vals)):
        raise ValidationError("scan grid must be a non-empty finite list")
    pool = _pool(g)
    out = []
    for v in vals:
        if parameter == "detuning":
            s = HypothesisSample(v, base.power_error, base.overrides)
        elif parameter == "power_error":
            s = HypothesisSample(base.detuning, v, base.overrides)
        else:
            s = HypothesisSample(base.detuning, base.power_error, {**base.overrides, parameter: float(v)})
        out.append(average_utility(p, pool, prob, [s])[0])
    return ScanTable(parameter, vals, np.asarray(out))


@dataclass
class LandscapeRow:
    bound: float
    f_ss: float
    t_pulse: float
    trials: int
    failures: int
    q16: float
    q50: float
    q84: float
    seeds: list
    calls: list
    statuses: list

    @property
    def failure_fraction(self) -> float:
        return self.failures / self.trials


def trial_seeds(seed: int, trials: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(trials)]


def landscape_study(
    bounds: Sequence[float],
    trials: int,
    model,
    cfg: OptimizerConfig,
    n_steps: int = 16,
    ringdown_fractions: Sequence[float] = (0.5, 0.25, 0.125),
    success: float = 0.99,
    threads: int = 1,
    oversample: int = 4,
) -> list[LandscapeRow]:
    """Failure fraction and distortion-call quantiles per voltage bound.

    For each bound the pulse length is ``0.25 / f_ss(bound)`` split into
    ``n_steps`` steps, followed by compensation steps of the given fractions
    of that length.  Each trial gets a fresh operator, so its call count
    includes building the Jacobian.
    """
    from .problems import pi2_problem
    from .resonator import ResonatorDistortion, RingdownConfig, steady_state_response

    if trials < 1 or not bounds:
        raise ValidationError("need at least one bound and one trial")
    prob = pi2_problem()
    rows = []
    for B in bounds:
        f_ss = steady_state_response(float(B), model)
        T = 0.25 / f_ss
        dt = T / n_steps
        rd = RingdownConfig(tuple(T * f for f in ringdown_fractions))
        seeds = trial_seeds(cfg.seed + int(round(1000 * B)), trials)

        def run(seed):
            g = ResonatorDistortion(model, n_steps, dt, dt / oversample, ringdown=rd, jacobian_mode=cfg.jacobian)
            c = OptimizerConfig(**{**cfg.to_dict(), "bound": float(B), "seed": seed, "target": success})
            return grape_optimize(prob, g, c)

        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                recs = list(ex.map(run, seeds))
        else:
            recs = [run(s) for s in seeds]
        ok = [r.calls for r in recs if r.status == "reached-target"]
        q = np.quantile(ok, [0.16, 0.5, 0.84]) if ok else [float("nan")] * 3
        rows.append(
            LandscapeRow(
                float(B), f_ss, T, trials, trials - len(ok), float(q[0]), float(q[1]), float(q[2]),
                seeds, [r.calls for r in recs], [r.status for r in recs],
            )
        )
        log.info("bound %g V: %d/%d failed, median calls %s", B, trials - len(ok), trials, q[1])
    return rows
