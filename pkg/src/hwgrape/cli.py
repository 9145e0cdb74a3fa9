"""``hwgrape`` command line: optimize, distort, scan, landscape, steady-state.

Exit codes: 0 success, 1 error (bad config, shape mismatch, solver failure),
2 optimization stalled or did not converge.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, build_experiment, build_model, load_config, resolve
from .optimizer import grape_optimize, landscape_study, robustness_scan
from .quantum import DistortedPulse, Pulse, ValidationError
from .resonator import ConvergenceError, IntegrationError, steady_state_response

log = logging.getLogger("hwgrape")

EXIT_OK, EXIT_ERROR, EXIT_STALL = 0, 1, 2


def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --- file output ---------------------------------------------------------------------


class Outputs:
    """Collects files in memory and writes them atomically at the end of a command."""

    def __init__(self, out_dir: Path, config: dict):
        self.dir = out_dir
        self.files: dict[str, str] = {}
        # the thread count never changes results, so it stays out of the echo
        # and outputs are byte-identical across thread counts
        echo = {k: v for k, v in config.items() if k != "threads"}
        self.header = f"# hwgrape {version_string()}\n# config: {json.dumps(echo, sort_keys=True, separators=(',', ':'))}\n"

    def csv(self, name: str, columns: list[str], rows, meta: dict | None = None) -> None:
        buf = io.StringIO()
        buf.write(self.header)
        for k, v in (meta or {}).items():
            buf.write(f"# {k}: {json.dumps(v)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
        self.files[name] = buf.getvalue()

    def json(self, name: str, payload: dict) -> None:
        doc = {"hwgrape_version": version_string(), **payload}
        self.files[name] = json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def commit(self) -> list[Path]:
        self.dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in self.files.items():
            target = self.dir / name
            fd, tmp = tempfile.mkstemp(dir=self.dir, prefix=f".{name}.", suffix=".tmp")
            try:
                with os.fdopen(fd, "w", newline="") as fh:
                    fh.write(text)
                os.replace(tmp, target)
            except BaseException:
                Path(tmp).unlink(missing_ok=True)
                raise
            written.append(target)
        return written


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def pulse_rows(values: np.ndarray):
    return [[i, *row] for i, row in enumerate(values)]


def waveform_rows(q: DistortedPulse):
    t = (np.arange(q.values.shape[0]) + 0.5) * q.dt
    return [[t[i], *row] for i, row in enumerate(q.values)]


def read_pulse_csv(path: Path, dt: float, unit: str = "rad/s", channels: int | None = None) -> Pulse:
    """Pulse CSV: ``#`` metadata lines, a header row, then ``step, ch0, ch1, ...``."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#") and ln.strip()]
    if len(lines) < 2:
        raise ValidationError(f"{path}: no pulse rows")
    try:
        data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValidationError(f"{path}: expected a step column and at least one channel")
    v = data[:, 1:]
    if channels is not None and v.shape[1] != channels:
        raise ValidationError(f"{path}: has {v.shape[1]} channels, config declares {channels}")
    return Pulse(v, dt, unit)


# --- commands -------------------------------------------------------------------------------


def _unit(exp) -> str:
    return "V" if exp.raw["distortion"].get("kind") == "resonator" else "rad/s"


def cmd_optimize(args, cfg, base, out: Outputs) -> int:
    exp = build_experiment(cfg, base)
    g = exp.family()
    rec = grape_optimize(exp.problem, g, exp.optimizer, exp.samples)
    p = rec.final_pulse()
    nominal = exp.distortion()
    q = nominal.apply(p)
    out.csv("pulse.csv", ["step"] + [f"ch{k}" for k in range(exp.k)], pulse_rows(p.values), {"dt": exp.dt, "unit": rec.unit})
    out.csv("distorted.csv", ["time_s"] + [f"ch{l}" for l in range(q.values.shape[1])], waveform_rows(q), {"dt": q.dt})
    extra = {}
    if getattr(nominal, "ringdown", None) is not None:
        amps = nominal.last_compensation
        extra["compensation"] = [[a.real, a.imag] for a in amps]
        extra["pulse_end"] = nominal.pulse_end
        out.csv(
            "compensation.csv",
            ["step", "ch0", "ch1", "width_s"],
            [[i, a.real, a.imag, w] for i, (a, w) in enumerate(zip(amps, nominal.ringdown.dt_rd))],
        )
    out.json("record.json", {**rec.to_dict(), **extra})
    out.files["trace.csv"] = out.header + rec.trace_csv()
    print(f"{rec.status}: utility {rec.utility:.6f} after {rec.iterations} iterations, {rec.calls} distortion calls")
    return EXIT_OK if rec.status == "reached-target" else (EXIT_ERROR if rec.status == "aborted" else EXIT_STALL)


def _square_pulse(spec: dict, exp) -> Pulse:
    amp = np.asarray(spec.get("amplitude", 1.0), dtype=float)
    v = np.zeros((exp.n, exp.k))
    on = int(spec.get("steps", exp.n))
    v[:on] = amp
    return Pulse(v, exp.dt, _unit(exp))


def cmd_distort(args, cfg, base, out: Outputs) -> int:
    exp = build_experiment(cfg, base, need_problem=False)
    g = exp.distortion()
    inputs = []
    if args.pulse:
        inputs.append(("distorted.csv", read_pulse_csv(Path(args.pulse), exp.dt, _unit(exp), exp.k)))
    else:
        specs = cfg.get("inputs")
        if not specs:
            raise ConfigError("inputs", "give --pulse or a list of inputs in the config")
        for i, s in enumerate(specs):
            name = s.get("name", f"input{i}")
            if "pulse_csv" in s:
                p = read_pulse_csv(Path(s["pulse_csv"]) if base is None else base / s["pulse_csv"], exp.dt, _unit(exp), exp.k)
            elif "square" in s:
                p = _square_pulse(s["square"], exp)
            else:
                raise ConfigError(f"inputs[{i}]", "needs pulse_csv or square")
            inputs.append((f"{name}.csv", p))
    for fname, p in inputs:
        q = g.apply(p)
        out.csv(fname, ["time_s"] + [f"ch{l}" for l in range(q.values.shape[1])], waveform_rows(q), {"dt": q.dt})
    print(f"distorted {len(inputs)} pulse(s)")
    return EXIT_OK


def cmd_scan(args, cfg, base, out: Outputs) -> int:
    exp = build_experiment(cfg, base)
    scan = cfg.get("scan")
    if not isinstance(scan, dict):
        raise ConfigError("scan", "required object with parameter and values")
    param = scan.get("parameter")
    vals = scan.get("values")
    if vals is None and "center" in scan:
        c = float(scan["center"])
        vals = list(c * (1 + np.linspace(-float(scan["spread"]), float(scan["spread"]), int(scan["points"]))))
    if not param or not vals:
        raise ConfigError("scan", "needs parameter and values")
    src = args.pulse or scan.get("pulse_csv")
    if not src:
        raise ConfigError("scan.pulse_csv", "give --pulse or scan.pulse_csv")
    path = Path(src) if args.pulse or base is None else base / src
    p = read_pulse_csv(path, exp.dt, _unit(exp), exp.k)
    if param in ("detuning", "power_error"):
        g = exp.distortion()
    else:
        g = lambda **ov: exp.distortion(**ov)  # noqa: E731
    table = robustness_scan(p, g, exp.problem, param, vals)
    out.csv("scan.csv", [param, "fidelity"], table.rows(), {"parameter": param, "grid": [float(v) for v in vals]})
    print(f"scanned {len(vals)} values of {param}; max fidelity {table.fidelities.max():.6f}")
    return EXIT_OK


def cmd_landscape(args, cfg, base, out: Outputs) -> int:
    spec = cfg.get("landscape")
    if not isinstance(spec, dict):
        raise ConfigError("landscape", "required object")
    from .optimizer import OptimizerConfig

    model = build_model(spec.get("model", "reference"), "landscape.model", base)
    try:
        opt = OptimizerConfig.from_dict(cfg.get("optimizer", {}))
    except (ValidationError, TypeError) as exc:
        raise ConfigError("optimizer", str(exc)) from None
    bounds = [float(b) for b in spec.get("bounds", [])]
    trials = int(spec.get("trials", 16))
    if not bounds or trials < 1:
        raise ConfigError("landscape", "needs a non-empty bounds list and trials >= 1")
    rows = landscape_study(
        bounds,
        trials,
        model,
        opt,
        n_steps=int(spec.get("n_steps", 16)),
        ringdown_fractions=tuple(spec.get("ringdown_fractions", (0.5, 0.25, 0.125))),
        success=float(spec.get("success", 0.99)),
        threads=int(cfg.get("threads", 1)),
    )
    out.csv(
        "landscape.csv",
        ["bound_V", "f_ss_Hz", "t_pulse_s", "trials", "failure_fraction", "calls_q16", "calls_q50", "calls_q84"],
        [[r.bound, r.f_ss, r.t_pulse, r.trials, r.failure_fraction, r.q16, r.q50, r.q84] for r in rows],
    )
    out.csv(
        "trials.csv",
        ["bound_V", "trial", "seed", "status", "calls"],
        [[r.bound, i, s, st, c] for r in rows for i, (s, st, c) in enumerate(zip(r.seeds, r.statuses, r.calls))],
    )
    for r in rows:
        print(f"{r.bound:g} V: failure {r.failure_fraction:.3f}, median calls {r.q50:g}")
    return EXIT_OK


def cmd_steady_state(args, cfg, base, out: Outputs) -> int:
    spec = cfg.get("steady_state", {})
    model = build_model(spec.get("model", cfg.get("model", "reference")), "steady_state.model", base)
    volts = [float(v) for v in spec.get("voltages", [1, 2, 3, 4, 5, 6, 7, 8, 9, 10])]
    if not volts or min(volts) <= 0:
        raise ConfigError("steady_state.voltages", "need positive voltages")
    rows = [[v, steady_state_response(v, model)] for v in volts]
    out.csv("steady_state.csv", ["voltage_V", "f_ss_Hz"], rows)
    for v, f in rows:
        print(f"{v:g} V: {f / 1e6:.4f} MHz")
    return EXIT_OK


COMMANDS = {
    "optimize": cmd_optimize,
    "distort": cmd_distort,
    "scan": cmd_scan,
    "landscape": cmd_landscape,
    "steady-state": cmd_steady_state,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hwgrape", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"hwgrape {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="config file or preset name")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--jacobian", choices=["zero-order", "exact", "exact-every-k"], default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("distort", "scan"):
            sp.add_argument("--pulse", default=None, help="input pulse CSV")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_ERROR
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        raw, base = load_config(args.config)
        cfg = resolve(raw, args.seed, args.jacobian, args.threads)
        out = Outputs(Path(args.out), cfg)
        status = COMMANDS[args.command](args, cfg, base, out)
        if status != EXIT_ERROR:
            out.commit()
        return status
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except (ValidationError, IntegrationError, ConvergenceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
