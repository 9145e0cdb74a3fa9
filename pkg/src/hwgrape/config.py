"""Experiment configuration: JSON in, validated in-memory objects out.

Every builder raises :class:`ConfigError` with the dotted path of the
offending field, so the CLI can point at it.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .distortion import (
    DistortionOperator,
    IdentityOperator,
    LinearOperator,
    RiseTimeOperator,
    compose,
    crosstalk_operator,
    load_crosstalk_csv,
    load_tensor,
)
from .optimizer import HypothesisSample, OptimizerConfig, normalize_samples
from .problems import CHI_PRESETS, named_problem
from .quantum import ControlProblem, ValidationError
from .resonator import ResonatorDistortion, ResonatorModel, RingdownConfig, SolverOptions, reference_model

PRESET_NAMES = ("pi2-resonator", "fig3a-square", "cnot-risetime", "crosstalk-4q", "landscape-desk")


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


def preset_path(name: str):
    return resources.files("hwgrape").joinpath("presets", f"{name}.json")


def load_config(ref: str) -> tuple[dict, Path | None]:
    """Read a config from a file path or a preset name; returns ``(dict, base_dir)``."""
    p = Path(ref)
    if p.exists():
        text, base = p.read_text(), p.resolve().parent
    elif ref in PRESET_NAMES:
        text, base = preset_path(ref).read_text(), None
    else:
        raise ConfigError("", f"no such config file or preset: {ref!r}")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("", "top level must be a JSON object")
    return cfg, base


def _get(d: dict, key: str, path: str, default: Any = ..., kind=None):
    if key not in d:
        if default is ...:
            raise ConfigError(f"{path}.{key}".lstrip("."), "required field missing")
        return default
    v = d[key]
    if kind is not None:
        try:
            v = kind(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}.{key}".lstrip("."), f"expected {kind.__name__}, got {v!r}") from None
    return v


def _matrix(v, path: str) -> np.ndarray:
    """Real nested list, or ``{"re": ..., "im": ...}``."""
    try:
        if isinstance(v, dict):
            re = np.asarray(v.get("re", 0.0), dtype=float)
            im = np.asarray(v.get("im", 0.0), dtype=float)
            m = re + 1j * im
        else:
            m = np.asarray(v, dtype=float).astype(complex)
    except (TypeError, ValueError):
        raise ConfigError(path, "matrix entries must be numbers") from None
    if m.ndim != 2:
        raise ConfigError(path, f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _resolve_path(p: str, base: Path | None) -> Path:
    q = Path(p)
    return q if q.is_absolute() or base is None else base / q


# --- problem --------------------------------------------------------------------------


def build_problem(spec: dict, path: str = "problem") -> ControlProblem:
    if not isinstance(spec, dict):
        raise ConfigError(path, "must be an object")
    try:
        if "preset" in spec:
            kw = {k: v for k, v in spec.items() if k != "preset"}
            return named_problem(spec["preset"], **kw)
        H0 = _matrix(_get(spec, "H0", path), f"{path}.H0")
        ctrls = _get(spec, "controls", path)
        if not isinstance(ctrls, list) or not ctrls:
            raise ConfigError(f"{path}.controls", "must be a non-empty list of matrices")
        controls = tuple(_matrix(c, f"{path}.controls[{i}]") for i, c in enumerate(ctrls))
        U = _matrix(_get(spec, "target", path), f"{path}.target")
        dop = spec.get("detuning_op")
        dop = _matrix(dop, f"{path}.detuning_op") if dop is not None else None
        return ControlProblem(H0, controls, U, dop)
    except ConfigError:
        raise
    except (ValidationError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


# --- distortion --------------------------------------------------------------------------


def build_model(spec, path: str, base: Path | None, overrides: dict | None = None) -> ResonatorModel:
    if spec in (None, "reference"):
        m = reference_model()
    elif isinstance(spec, str):
        m = ResonatorModel.from_json(_resolve_path(spec, base))
    elif isinstance(spec, dict):
        d = dict(spec)
        start = reference_model().to_dict() if d.pop("base", None) == "reference" else {}
        try:
            m = ResonatorModel.from_dict({**start, **d})
        except (ValidationError, TypeError) as exc:
            raise ConfigError(path, str(exc)) from None
    else:
        raise ConfigError(path, "expected 'reference', a file path, or an object")
    if overrides:
        try:
            m = m.replace(**overrides)
        except TypeError as exc:
            raise ConfigError(path, f"bad override: {exc}") from None
    return m


def build_distortion(
    spec: dict,
    n: int,
    k: int,
    dt: float,
    base: Path | None = None,
    overrides: dict | None = None,
    jacobian: str = "zero-order",
    threads: int = 1,
    path: str = "distortion",
) -> DistortionOperator:
    """Operator for ``n`` steps of ``k`` channels of width ``dt``.

    ``overrides`` come from hypothesis samples: ``tau`` sets rise times and
    resonator-model field names update the model.
    """
    if not isinstance(spec, dict):
        raise ConfigError(path, "must be an object")
    kind = _get(spec, "kind", path, kind=str)
    ov = dict(overrides or {})
    try:
        if kind == "identity":
            op = IdentityOperator(n, k, dt, int(spec.get("substeps", 1)))
        elif kind == "risetime":
            tau = ov.pop("tau", spec.get("tau"))
            if tau is None:
                raise ConfigError(f"{path}.tau", "required field missing")
            taus = [float(tau)] * k if np.isscalar(tau) else [float(t) for t in tau]
            dt_out = dt / float(spec.get("oversample", 1))
            m = spec.get("m_out")
            if m is None and "tau_window" in spec:
                m = 2 * n + math.ceil(10 * float(spec["tau_window"]) / dt)
            op = RiseTimeOperator(taus, n, dt, None if m is None else int(m), dt_out)
        elif kind == "crosstalk":
            if "chi" in spec:
                chi = np.asarray(spec["chi"], dtype=float)
            elif "chi_csv" in spec:
                chi = load_crosstalk_csv(_resolve_path(spec["chi_csv"], base))
            elif "chi_preset" in spec:
                try:
                    chi = CHI_PRESETS[spec["chi_preset"]]
                except KeyError:
                    raise ConfigError(f"{path}.chi_preset", f"unknown preset; choose from {sorted(CHI_PRESETS)}") from None
            else:
                raise ConfigError(path, "crosstalk needs chi, chi_csv or chi_preset")
            op = crosstalk_operator(chi, n, dt)
        elif kind == "tensor":
            t = load_tensor(_resolve_path(_get(spec, "path", path, kind=str), base))
            op = LinearOperator(t, dt, dt / float(spec.get("oversample", 1)))
        elif kind == "resonator":
            if k != 2:
                raise ConfigError(path, "resonator input needs exactly 2 channels")
            model = build_model(spec.get("model", "reference"), f"{path}.model", base, ov)
            ov = {}
            rd = spec.get("ringdown")
            ring = None
            if rd is not None:
                ring = RingdownConfig(
                    tuple(_get(rd, "dt_rd", f"{path}.ringdown")),
                    float(rd.get("r", 0.0)),
                    _matrix(rd["P"], f"{path}.ringdown.P") if "P" in rd else np.diag([1.0, 0.0, 0.0]),
                )
            opts = SolverOptions(**spec.get("solver", {}))
            op = ResonatorDistortion(
                model,
                n,
                dt,
                dt / float(spec.get("oversample", 4)),
                m_out=spec.get("m_out"),
                tail=float(spec.get("tail", 0.0)),
                ringdown=ring,
                options=opts,
                jacobian_mode="exact" if jacobian == "exact" else "zero-order",
                epsilon=spec.get("epsilon"),
                threads=threads,
            )
        elif kind == "compose":
            stages = _get(spec, "stages", path)
            if not isinstance(stages, list) or not stages:
                raise ConfigError(f"{path}.stages", "must be a non-empty list, innermost first")
            op = None
            for i, st in enumerate(stages):
                if op is None:
                    op = build_distortion(st, n, k, dt, base, ov, jacobian, threads, f"{path}.stages[{i}]")
                else:
                    m, l, dto = op.range
                    outer = build_distortion(st, m, l, dto, base, ov, jacobian, threads, f"{path}.stages[{i}]")
                    op = compose(outer, op)
            ov = {}
        else:
            raise ConfigError(f"{path}.kind", f"unknown distortion kind {kind!r}")
    except ConfigError:
        raise
    except (ValidationError, TypeError, ValueError, OSError) as exc:
        raise ConfigError(path, str(exc)) from None
    if ov:
        raise ConfigError(path, f"overrides {sorted(ov)} do not apply to a {kind} distortion")
    return op


# --- experiment -----------------------------------------------------------------------------


@dataclass
class Experiment:
    raw: dict
    base: Path | None
    problem: ControlProblem | None
    n: int
    k: int
    dt: float
    optimizer: OptimizerConfig
    samples: tuple
    threads: int

    def distortion(self, **overrides) -> DistortionOperator:
        return build_distortion(
            self.raw["distortion"], self.n, self.k, self.dt, self.base, overrides, self.optimizer.jacobian, self.threads
        )

    def family(self):
        """Operator for nominal samples, or a factory when samples override distortion parameters."""
        if any(s.overrides for s in self.samples):
            return lambda **ov: self.distortion(**ov)
        return self.distortion()


def build_samples(spec, path: str = "samples") -> tuple:
    if spec is None:
        return normalize_samples(None)
    try:
        if isinstance(spec, dict):
            param = _get(spec, "parameter", path, kind=str)
            vals = spec.get("values")
            if vals is None and "center" in spec:
                c = float(spec["center"])
                rel = np.linspace(-float(spec["spread"]), float(spec["spread"]), int(spec["points"]))
                vals = list(c * (1 + rel))
            if not vals:
                raise ConfigError(f"{path}.values", "need a non-empty list (or center/spread/points)")
            from .optimizer import uniform_samples

            return uniform_samples([float(v) for v in vals], param)
        if isinstance(spec, list):
            return normalize_samples(
                [
                    HypothesisSample(
                        float(s.get("detuning", 0.0)),
                        float(s.get("power_error", 0.0)),
                        dict(s.get("overrides", {})),
                        float(s.get("weight", 1.0)),
                    )
                    for s in spec
                ]
            )
    except ConfigError:
        raise
    except (ValidationError, TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(path, str(exc)) from None
    raise ConfigError(path, "expected an object or a list")


def resolve(cfg: dict, seed: int | None = None, jacobian: str | None = None, threads: int | None = None) -> dict:
    """Apply command-line overrides to a config, returning a new dict."""
    out = copy.deepcopy(cfg)
    opt = out.setdefault("optimizer", {})
    if seed is not None:
        opt["seed"] = int(seed)
    if jacobian is not None:
        opt["jacobian"] = jacobian
    if threads is not None:
        out["threads"] = int(threads)
    return out


def build_experiment(cfg: dict, base: Path | None, need_problem: bool = True) -> Experiment:
    pulse = _get(cfg, "pulse", "")
    n = _get(pulse, "n", "pulse", kind=int)
    k = _get(pulse, "channels", "pulse", kind=int)
    dt = _get(pulse, "dt", "pulse", kind=float)
    if n < 1 or k < 1 or not dt > 0:
        raise ConfigError("pulse", "n, channels and dt must be positive")
    problem = build_problem(_get(cfg, "problem", "")) if need_problem or "problem" in cfg else None
    try:
        opt = OptimizerConfig.from_dict(cfg.get("optimizer", {}))
    except (ValidationError, TypeError) as exc:
        raise ConfigError("optimizer", str(exc)) from None
    samples = build_samples(cfg.get("samples"))
    if "distortion" not in cfg:
        raise ConfigError("distortion", "required field missing")
    exp = Experiment(cfg, base, problem, n, k, dt, opt, samples, int(cfg.get("threads", 1)))
    # build once so shape errors surface before any computation
    fam = exp.family()
    op = fam(**samples[0].overrides) if callable(fam) and not isinstance(fam, DistortionOperator) else fam
    if problem is not None and op.l_out != problem.n_controls:
        raise ConfigError("distortion", f"produces {op.l_out} channels but the problem has {problem.n_controls} controls")
    return exp
