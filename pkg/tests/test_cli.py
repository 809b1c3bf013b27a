import csv
import json

import numpy as np
import pytest
import yaml

from spinedit.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, main
from spinedit.prop import HardPulse, PulseProgram, save_program


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def write_config(path, **overrides):
    cfg = {
        "systems": {"citrate": "citrate"},
        "program": {"segments": 12, "duration_s": 2e-3},
        "objective": {"tasks": [{"system": "citrate", "kind": "state_fidelity", "target": "I1x"}]},
        "optimizer": {"epochs": 6, "step_size": 0.02, "amp_max_hz": 500, "seed": 3, "snapshot_every": 3},
        "outputs": {"directory": "run"},
    }
    cfg.update(overrides)
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture
def ninety(tmp_path):
    p = tmp_path / "ninety.yaml"
    save_program(PulseProgram((HardPulse(np.pi / 2, 0.0),)), p)
    return p


# --- simulate ---------------------------------------------------------------------


def test_simulate_state(tmp_path):
    out = tmp_path / "sim"
    rc = main(["simulate", "--system", "glutamine", "--state=-4*I1z.I2z.I5x", "--out", str(out),
               "--fid", "--quiet"])
    assert rc == EXIT_OK
    rows = read_csv(out / "spectrum.csv")
    assert rows[0] == ["freq_hz", "ppm", "real", "imag"]
    assert len(rows) == 4096 * 2 + 1
    assert (out / "fid.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["verb"] == "simulate"
    assert "sha256" in json.dumps(manifest["inputs"])


def test_simulate_pulse(tmp_path, ninety):
    rc = main(["simulate", "--system", "citrate", "--pulse", str(ninety), "--out", str(tmp_path / "s"), "--quiet"])
    assert rc == EXIT_OK


@pytest.mark.parametrize("argv", [
    ["simulate", "--system", "no_such_system", "--state", "I1x"],
    ["simulate", "--system", "citrate"],
    ["simulate", "--system", "citrate", "--state", "I9x"],
    ["simulate", "--system", "citrate", "--state", "I1x", "--points", "100"],
    ["simulate", "--system", "citrate", "--pulse", "missing.yaml"],
])
def test_simulate_invalid_leaves_no_output(tmp_path, argv, capsys):
    out = tmp_path / "never"
    assert main(argv + ["--out", str(out)]) == EXIT_INVALID
    assert not out.exists()
    assert "error" in capsys.readouterr().err


# --- optimize ---------------------------------------------------------------------


def test_dry_run(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.run")
    assert main(["optimize", "--config", str(cfg), "--dry-run"]) == EXIT_OK
    plan = yaml.safe_load(capsys.readouterr().out)
    assert plan["trainable_segments"] == 12
    assert plan["optimizer"]["epochs"] == 6
    assert not (tmp_path / "run").exists()


def test_optimize_outputs_and_rerun(tmp_path):
    cfg = write_config(tmp_path / "c.run")
    assert main(["optimize", "--config", str(cfg), "--quiet"]) == EXIT_OK
    out = tmp_path / "run"
    for name in ("manifest.json", "history.csv", "best_pulse.yaml", "best_pulse.csv", "checkpoint.npz",
                 "snapshot_epoch1.csv", "snapshot_epoch3.csv", "snapshot_epoch6.csv"):
        assert (out / name).exists(), name
    hist = read_csv(out / "history.csv")
    assert hist[0][:2] == ["epoch", "loss"]
    assert len(hist) == 7
    # re-running from the manifest reproduces the run bit for bit
    again = tmp_path / "again"
    assert main(["optimize", "--config", str(out / "manifest.json"), "--out", str(again), "--quiet"]) == EXIT_OK
    assert (again / "history.csv").read_bytes() == (out / "history.csv").read_bytes()
    assert (again / "best_pulse.yaml").read_bytes() == (out / "best_pulse.yaml").read_bytes()


def test_optimize_resume(tmp_path):
    full = write_config(tmp_path / "full.run", outputs={"directory": "full"})
    assert main(["optimize", "--config", str(full), "--quiet"]) == EXIT_OK
    opt = {"epochs": 3, "step_size": 0.02, "amp_max_hz": 500, "seed": 3, "snapshot_every": 3}
    part = write_config(tmp_path / "part.run", optimizer=opt, outputs={"directory": "part"})
    assert main(["optimize", "--config", str(part), "--quiet"]) == EXIT_OK
    rest = write_config(tmp_path / "rest.run", outputs={"directory": "part"})
    assert main(["optimize", "--config", str(rest), "--resume", "--quiet"]) == EXIT_OK
    a = np.array(read_csv(tmp_path / "full" / "history.csv")[1:], dtype=float)
    b = np.array(read_csv(tmp_path / "part" / "history.csv")[1:], dtype=float)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_optimize_seed_flag_changes_run(tmp_path):
    cfg = write_config(tmp_path / "c.run")
    main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "1", "--quiet"])
    main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "2", "--quiet"])
    assert (tmp_path / "a" / "history.csv").read_bytes() != (tmp_path / "b" / "history.csv").read_bytes()


def test_config_errors_are_collected(tmp_path, capsys):
    cfg = tmp_path / "bad.run"
    cfg.write_text(yaml.safe_dump({
        "systems": {"x": "no_such_system"},
        "program": {"segments": 0, "duration_s": 1e-3},
        "objective": {"tasks": [{"system": "x", "kind": "bogus"}]},
        "optimizer": {"epochs": -1, "learning": 1},
        "extra": 1,
    }))
    assert main(["optimize", "--config", str(cfg)]) == EXIT_INVALID
    err = capsys.readouterr().err
    for key in ("systems", "program", "optimizer", "extra"):
        assert key in err
    assert err.count("error:") >= 4


def test_config_missing_file(tmp_path):
    assert main(["optimize", "--config", str(tmp_path / "none.run")]) == EXIT_INVALID


# --- analyze ----------------------------------------------------------------------


def test_analyze_ninety(tmp_path, ninety, capsys):
    out = tmp_path / "a"
    assert main(["analyze", "--system", "citrate", "--pulse", str(ninety), "--top", "2", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "I1y" in text and "I2y" in text
    rows = read_csv(out / "decomposition.csv")
    assert {r[0] for r in rows[1:]} == {"I1y", "I2y"}
    assert all(float(r[1]) == pytest.approx(-1.0) for r in rows[1:])


def test_analyze_top_zero(tmp_path, ninety, capsys):
    assert main(["analyze", "--system", "citrate", "--pulse", str(ninety), "--top", "0",
                 "--out", str(tmp_path / "a")]) == EXIT_INVALID
    assert "top must be >= 1" in capsys.readouterr().err


# --- gradcheck ----------------------------------------------------------------------


def test_gradcheck_pass_and_corrupt(tmp_path, capsys):
    assert main(["gradcheck", "--segments", "8", "--probes", "6", "--out", str(tmp_path / "g")]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    first = (tmp_path / "g" / "gradcheck.csv").read_bytes()
    assert main(["gradcheck", "--segments", "8", "--probes", "6", "--out", str(tmp_path / "h"), "--quiet"]) == 0
    assert (tmp_path / "h" / "gradcheck.csv").read_bytes() == first
    assert main(["gradcheck", "--segments", "8", "--probes", "6", "--corrupt"]) == EXIT_NUMERICAL
    assert "FAIL" in capsys.readouterr().out


# --- export -------------------------------------------------------------------------


def test_export(tmp_path, ninety):
    out = tmp_path / "e"
    assert main(["export", "--pulse", str(ninety), "--system", "citrate", "--fid", "--spectrum",
                 "--out", str(out), "--quiet"]) == EXIT_OK
    for name in ("pulse_shape.csv", "pulse.yaml", "fid.csv", "spectrum.csv", "manifest.json"):
        assert (out / name).exists()
    assert main(["export", "--pulse", str(ninety), "--fid", "--out", str(tmp_path / "f")]) == EXIT_INVALID


def test_threads_flag_validated(ninety):
    assert main(["export", "--pulse", str(ninety), "--threads", "0"]) == EXIT_INVALID
