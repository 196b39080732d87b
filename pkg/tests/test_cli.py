import json
import subprocess
import sys

import pytest
import yaml

from gaussgreen import cli
from gaussgreen.config import ConfigError, load_config, parse_config

TRACE = {
    "schema_version": 1,
    "command": "trace",
    "field": {"name": "whitney"},
    "set": {"kind": "Box", "lo": [0, 0], "hi": [1, 1]},
    "schedule": {"start": 0.125, "ratio": 0.5, "count": 5},
    "resolution": 1 / 256,
}


def write(tmp_path, data, name="cfg.yaml"):
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data) if name.endswith(".yaml") else json.dumps(data))
    return path


def run(tmp_path, data, command=None, *extra):
    path = write(tmp_path, data)
    out = tmp_path / "out"
    code = cli.main([command or data["command"], "--config", str(path), "--out", str(out), *extra])
    summary = json.loads((out / "summary.json").read_text()) if (out / "summary.json").exists() else None
    return code, summary, out


def test_trace_command(tmp_path):
    code, summary, out = run(tmp_path, TRACE)
    assert code == 0 and summary["exit_status"] == 0
    assert abs(summary["limit"]) < 1e-3 and summary["volume_side"] == 0 and summary["residual"] < 1e-3
    lines = (out / "trace.csv").read_text().splitlines()
    assert lines[0] == "eps,boundary_integral,good_flag" and len(lines) == 6
    assert lines[1].split(",")[0] == "1.2500000000000000e-01"


def test_csv_is_bit_identical_across_runs(tmp_path):
    a = run(tmp_path / "a", TRACE)[2]
    b = run(tmp_path / "b", TRACE)[2]
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()


def test_exterior_side_via_json_config(tmp_path):
    data = dict(TRACE, side="exterior")
    path = write(tmp_path, data, "cfg.json")
    code = cli.main(["trace", "--config", str(path), "--out", str(tmp_path)])
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert code == 0 and abs(summary["trace"] - 6.283185307179586) < 1e-9


def test_failing_check_exits_one(tmp_path):
    data = dict(TRACE, field={"name": "smooth_linear"}, set={"kind": "Ball", "center": [0, 0], "radius": 1.0},
                tolerances={"residual": 1e-12})
    code, summary, _ = run(tmp_path, data)
    assert code == 1 and summary["checks"]["residual"]["pass"] is False


def test_malformed_schedule_exits_two(tmp_path, capsys):
    code, summary, _ = run(tmp_path, dict(TRACE, schedule=[0.1, 0.2, 0.05]))
    assert code == 2 and summary is None
    assert "schedule" in capsys.readouterr().err


@pytest.mark.parametrize("patch, where", [
    ({"bogus": 1}, "bogus"),
    ({"schema_version": 2}, "schema_version"),
    ({"field": {"name": "nope"}}, "field.name"),
    ({"set": {"kind": "Torus"}}, "set"),
    ({"phi": {"kind": "hat", "center": [0, 0]}}, "phi"),
    ({"resolution": -1}, "resolution"),
    ({"field": None}, "needs"),
])
def test_config_rejections(patch, where):
    with pytest.raises(ConfigError) as exc:
        parse_config({**TRACE, **patch})
    assert where in str(exc.value)


def test_command_mismatch_and_missing_file(tmp_path, capsys):
    path = write(tmp_path, TRACE)
    assert cli.main(["regdist", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert cli.main(["trace", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == 2
    assert cli.main(["trace", "--config", str(path), "--seed", "-1"]) == 2
    assert "command" in capsys.readouterr().err


def test_runtime_failure_exits_three(tmp_path, capsys):
    # a schedule entirely beyond the inradius leaves nothing to extrapolate
    code, _, _ = run(tmp_path, dict(TRACE, schedule=[0.9, 0.8]))
    assert code == 3
    assert "InsufficientScheduleError" in capsys.readouterr().err


def test_exit_status_is_a_function_of_checks():
    assert cli.exit_status({"checks": {"a": {"pass": True}}}) == 0
    assert cli.exit_status({"checks": {"a": {"pass": True}, "b": {"pass": False}}}) == 1
    assert cli.exit_status({"checks": {}}) == 0


def test_tolerance_from_environment(monkeypatch):
    cfg = parse_config(TRACE)
    monkeypatch.setenv("GAUSSGREEN_TOL", "1e-5")
    assert cfg.quadrature_tol() == 1e-5
    assert parse_config({**TRACE, "tolerances": {"quadrature": 1e-7}}).quadrature_tol() == 1e-7


def test_check_gauss_green(tmp_path):
    data = dict(TRACE, command="check-gauss-green", set={"kind": "Box", "lo": [-0.3, 0.0], "hi": [0.6, 0.7]},
                phi={"kind": "bump", "center": [0.1, 0.1], "radius": 0.9}, resolution=1 / 512,
                schedule={"start": 0.0625, "ratio": 0.5, "count": 6})
    code, summary, out = run(tmp_path, data)
    assert code == 0, summary
    assert abs(summary["exterior_minus_interior"] - summary["boundary_atoms"]) < 1e-3
    assert (out / "gauss_green_interior.csv").exists() and (out / "gauss_green_exterior.csv").exists()


def test_coarea_command(tmp_path):
    data = {"schema_version": 1, "command": "coarea-check", "set": {"kind": "Ball", "center": [0, 0], "radius": 1},
            "resolution": 1 / 512}
    code, summary, out = run(tmp_path, data)
    assert code == 0 and summary["max_relative_error"] <= 1e-4


def test_regdist_command(tmp_path):
    data = {"schema_version": 1, "command": "regdist", "set": {"kind": "GraphDomain", "teeth": 5},
            "regdist": {"samples": 300, "deformation_eps": 0.05, "deformation_samples": 50}}
    code, summary, out = run(tmp_path, data, None, "--seed", "7")
    assert code == 0, summary
    assert summary["seed"] == 7 and summary["deformation_residual"] <= 1e-8
    assert 0.5 <= summary["ratio_min"] <= summary["ratio_max"] <= 2.0
    assert len((out / "regdist.csv").read_text().splitlines()) == 301


def test_reconstruct_flux_command(tmp_path):
    data = {"schema_version": 1, "command": "reconstruct-flux", "field": {"name": "smooth_linear"},
            "flux": {"grid": {"lo": [-0.5, -0.5], "hi": [0.5, 0.5], "spacing": 0.25}, "windows": [0.125, 0.0625]}}
    code, summary, out = run(tmp_path, data)
    assert code == 0
    assert summary["checks"]["order"]["exact"] is True
    assert max(summary["rms_errors"]) < 1e-10


def test_reconstruct_from_table(tmp_path):
    rows = ["axis,s,c1,d1,value"]
    for axis in (1, 2):
        for k in range(17):
            s = 0.25 + k * 0.5 / 16
            rows.append(f"{axis},{s!r},0.25,0.75,{-s * 0.5!r}")
    table = tmp_path / "flux.csv"
    table.write_text("\n".join(rows))
    data = {"schema_version": 1, "command": "reconstruct-flux",
            "flux": {"source": "table", "table": str(table),
                     "grid": {"lo": [0.5, 0.5], "hi": [0.5, 0.5], "spacing": 1.0}, "windows": [0.5]}}
    code, summary, out = run(tmp_path, data)
    assert code == 0
    row = (out / "reconstruction.csv").read_text().splitlines()[1].split(",")
    assert [float(v) for v in row] == pytest.approx([0.5, 0.5, 0.5, 0.5], abs=1e-12)


def test_diagnostics_command(tmp_path):
    data = {"schema_version": 1, "command": "diagnostics", "field": {"name": "rotational"},
            "set": {"kind": "Box", "lo": [-1, -1], "hi": [1, 0]}, "schedule": [0.1, 0.05, 0.025],
            "diagnostics": {"probes": [[0.5, 0.0]], "radii": [0.1, 0.05], "p": 1.0}, "tolerances": {"quadrature": 1e-6}}
    code, summary, out = run(tmp_path, data)
    assert code == 0
    vals = summary["necessary"]["values"][0]
    assert abs(vals[0]) == pytest.approx(0.02, rel=0.1)


def test_module_entry_point(tmp_path):
    path = write(tmp_path, TRACE)
    proc = subprocess.run([sys.executable, "-m", "gaussgreen.cli", "trace", "--config", str(path),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "gaussgreen.cli", "--help"], capture_output=True, text=True)
    assert "check-gauss-green" in proc.stdout


def test_load_config_round_trip(tmp_path):
    cfg = load_config(write(tmp_path, TRACE))
    assert cfg.build_schedule().values[-1] == 0.125 / 16
    assert cfg.build_set().kind == "Box"
