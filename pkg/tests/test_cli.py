import json
import subprocess
import sys

import numpy as np
import pytest

from hwgrape.cli import main, read_pulse_csv
from hwgrape.distortion import RiseTimeOperator

IDENTITY_TARGET = {
    "problem": {
        "H0": [[0, 0], [0, 0]],
        "controls": [[[0, 0.5], [0.5, 0]], {"re": [[0, 0], [0, 0]], "im": [[0, -0.5], [0.5, 0]]}],
        "target": [[1, 0], [0, 1]],
    },
    "pulse": {"n": 4, "channels": 2, "dt": 1.0},
    "distortion": {"kind": "identity"},
    "optimizer": {"target": 0.999, "bound": 1.0, "max_iter": 50, "seed": 3},
}

RISETIME = {
    "problem": {"preset": "pi2"},
    "pulse": {"n": 6, "channels": 2, "dt": 1.0},
    "distortion": {"kind": "risetime", "tau": 0.4, "oversample": 2, "m_out": 16},
    "optimizer": {"target": 0.999, "bound": 1.0, "max_iter": 100, "seed": 1},
}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def data_rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])


def test_identity_target(tmp_path):
    cfg = write(tmp_path / "c.json", IDENTITY_TARGET)
    assert main(["optimize", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rec = json.loads((tmp_path / "o" / "record.json").read_text())
    assert rec["status"] == "reached-target" and rec["trace"][-1]["utility"] >= 0.999
    for name in ("pulse.csv", "distorted.csv", "trace.csv"):
        assert (tmp_path / "o" / name).exists()


def test_malformed_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"pulse": {"n": 4,, }}')
    out = tmp_path / "o"
    assert main(["optimize", "--config", str(bad), "--out", str(out)]) == 1
    assert "line 1" in capsys.readouterr().err
    assert not out.exists()


def test_missing_field(tmp_path, capsys):
    cfg = dict(IDENTITY_TARGET, pulse={"n": 4, "channels": 2})
    assert main(["optimize", "--config", write(tmp_path / "c.json", cfg), "--out", str(tmp_path / "o")]) == 1
    assert "dt" in capsys.readouterr().err


def test_shape_mismatch(tmp_path):
    pulse = tmp_path / "p.csv"
    pulse.write_text("step,ch0\n0,1.0\n1,2.0\n")
    cfg = write(tmp_path / "c.json", RISETIME)
    assert main(["distort", "--config", cfg, "--pulse", str(pulse), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_zero_pulse_distort(tmp_path):
    cfg = write(tmp_path / "c.json", {**RISETIME, "inputs": [{"name": "zero", "square": {"amplitude": 0.0}}]})
    assert main(["distort", "--config", cfg, "--out", str(tmp_path)]) == 0
    q = data_rows(tmp_path / "zero.csv")
    assert q.shape == (16, 3) and not np.any(q[:, 1:])


def test_distort_matches_library(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.uniform(-1, 1, size=(6, 2))
    pulse = tmp_path / "p.csv"
    pulse.write_text("step,ch0,ch1\n" + "".join(f"{i},{float(a)!r},{float(b)!r}\n" for i, (a, b) in enumerate(v)))
    cfg = write(tmp_path / "c.json", RISETIME)
    assert main(["distort", "--config", cfg, "--pulse", str(pulse), "--out", str(tmp_path / "o")]) == 0
    q = data_rows(tmp_path / "o" / "distorted.csv")
    ref = RiseTimeOperator([0.4, 0.4], 6, 1.0, m=16, dt_out=0.5).apply(v).values
    assert np.max(np.abs(q[:, 1:] - ref)) < 1e-12
    assert np.allclose(q[:, 0], (np.arange(16) + 0.5) * 0.5)


def test_single_point_scan(tmp_path):
    cfg = write(tmp_path / "c.json", RISETIME)
    assert main(["optimize", "--config", cfg, "--out", str(tmp_path)]) == 0
    scan_cfg = write(tmp_path / "s.json", {**RISETIME, "scan": {"parameter": "tau", "values": [0.4]}})
    assert main(["scan", "--config", scan_cfg, "--pulse", str(tmp_path / "pulse.csv"), "--out", str(tmp_path / "s")]) == 0
    rows = data_rows(tmp_path / "s" / "scan.csv")
    rec = json.loads((tmp_path / "record.json").read_text())
    assert rows.shape == (1, 2) and rows[0, 1] == pytest.approx(rec["trace"][-1]["utility"], abs=1e-12)


def test_stall_exit_code(tmp_path):
    cfg = {**RISETIME, "optimizer": {"target": 0.999, "bound": 0.01, "max_iter": 5}}
    assert main(["optimize", "--config", write(tmp_path / "c.json", cfg), "--out", str(tmp_path)]) == 2
    assert (tmp_path / "record.json").exists()


def test_header_echoes_config(tmp_path):
    cfg = write(tmp_path / "c.json", RISETIME)
    main(["optimize", "--config", cfg, "--out", str(tmp_path), "--seed", "9"])
    lines = (tmp_path / "pulse.csv").read_text().splitlines()
    assert lines[0].startswith("# hwgrape ")
    echoed = json.loads(lines[1].removeprefix("# config: "))
    assert echoed["optimizer"]["seed"] == 9 and echoed["distortion"] == RISETIME["distortion"]


def test_pulse_csv_roundtrip(tmp_path):
    cfg = write(tmp_path / "c.json", RISETIME)
    main(["optimize", "--config", cfg, "--out", str(tmp_path)])
    p = read_pulse_csv(tmp_path / "pulse.csv", 1.0, channels=2)
    rec = json.loads((tmp_path / "record.json").read_text())
    assert np.array_equal(p.values, np.array(rec["pulse"]))


@pytest.mark.parametrize("threads", [["--threads", "1"], ["--threads", "3"]])
def test_determinism(tmp_path, threads):
    cfg = {**RISETIME, "samples": {"parameter": "tau", "values": [0.3, 0.4, 0.5]}}
    path = write(tmp_path / "c.json", cfg)
    outs = []
    for i, extra in enumerate([[], threads]):
        d = tmp_path / f"run{i}"
        main(["optimize", "--config", path, "--out", str(d), "--seed", "4"] + extra)
        outs.append(d)
    for name in ("pulse.csv", "distorted.csv", "trace.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    r0 = json.loads((outs[0] / "record.json").read_text())
    r1 = json.loads((outs[1] / "record.json").read_text())
    assert r0["pulse"] == r1["pulse"] and r0["trace"] == r1["trace"]


def test_steady_state_command(tmp_path):
    cfg = write(tmp_path / "c.json", {"steady_state": {"voltages": [1.0, 2.0]}})
    assert main(["steady-state", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = data_rows(tmp_path / "steady_state.csv")
    assert rows.shape == (2, 2) and rows[1, 1] > rows[0, 1] > 0


def test_small_landscape(tmp_path):
    cfg = {
        "landscape": {"bounds": [1.0], "trials": 1, "n_steps": 4},
        "optimizer": {"max_iter": 2, "seed": 0},
    }
    assert main(["landscape", "--config", write(tmp_path / "c.json", cfg), "--out", str(tmp_path)]) == 0
    assert data_rows(tmp_path / "landscape.csv").shape == (1, 8)
    trials = [ln for ln in (tmp_path / "trials.csv").read_text().splitlines() if not ln.startswith("#")]
    assert len(trials) == 2


def test_pi2_preset_writes_compensation(tmp_path):
    assert main(["optimize", "--config", "pi2-resonator", "--out", str(tmp_path)]) in (0, 2)
    comp = data_rows(tmp_path / "compensation.csv")
    assert comp.shape == (3, 4)
    assert np.allclose(comp[:, 3], [4e-9, 2e-9, 1e-9])
    rec = json.loads((tmp_path / "record.json").read_text())
    assert rec["ringdown_mode"] == "in-distortion" and len(rec["compensation"]) == 3


def test_fig3a_preset(tmp_path):
    assert main(["distort", "--config", "fig3a-square", "--out", str(tmp_path)]) == 0
    low = data_rows(tmp_path / "square_0.1V.csv")
    high = data_rows(tmp_path / "square_10V.csv")
    assert np.abs(high[:, 1:]).max() / 10 < np.abs(low[:, 1:]).max() / 0.1


def test_unknown_preset(tmp_path, capsys):
    assert main(["optimize", "--config", "no-such-preset", "--out", str(tmp_path)]) == 1
    assert "no-such-preset" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "hwgrape.cli", "steady-state", "--config", write(tmp_path / "c.json", {"steady_state": {"voltages": [1.0]}}), "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert res.returncode == 0 and "MHz" in res.stdout
