import hashlib
import json
from pathlib import Path

import pytest

from plap.cli import main
from plap.config import ConfigError, RunConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, body, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(dict({"schema": "plap-config/1"}, **body), indent=2))
    return path


def run(tmp_path, command, body, *extra):
    cfg = write(tmp_path, body)
    out = tmp_path / "out"
    return main([command, "--config", str(cfg), "--out", str(out), *extra]), out


INTERVAL = {"mesh": {"family": "interval", "n_cells": 64}, "data": "constant:1", "p": 2}


def test_solve_smoke(tmp_path):
    code, out = run(tmp_path, "solve", INTERVAL)
    assert code == 0
    assert {p.name for p in out.iterdir()} == {"solution.csv", "outcome.json", "manifest.json"}
    assert json.loads((out / "outcome.json").read_text())["converged"] is True
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["exit_status"] == 0 and manifest["config"]["p"] == 2
    for art in manifest["artifacts"]:
        assert hashlib.sha256((out / art["file"]).read_bytes()).hexdigest() == art["sha256"]


def test_p_below_one_rejected(tmp_path, capsys):
    code, out = run(tmp_path, "solve", dict(INTERVAL, p=0.9))
    assert code == 1
    err = capsys.readouterr().err
    assert "p must exceed 1" in err
    # anchored to the line holding the key
    assert "cfg.json:" in err and not out.exists()


def test_zero_mean_on_bounded_mesh(tmp_path, capsys):
    code, _ = run(tmp_path, "solve", dict(INTERVAL, solver={"bc_mode": "zero_mean"}))
    assert code == 1
    assert "closed" in capsys.readouterr().err


def test_missing_schedule_named(tmp_path, capsys):
    code, _ = run(tmp_path, "entropy", INTERVAL)
    assert code == 1
    assert "'schedule'" in capsys.readouterr().err


@pytest.mark.parametrize("text, needle, line", [
    ('{\n  "schema": "plap-config/1",\n  "p": 2,\n}', "invalid JSON", 4),
    ('{\n  "schema": "plap-config/1",\n  "mesh": {"family": "interval"},\n  "p": 2,\n'
     '  "colour": 1\n}', "unknown key", 5),
    ('{\n  "schema": "plap-config/1",\n  "mesh": {"family": "cube"},\n  "p": 2\n}', "family", 3),
])
def test_config_errors_are_line_anchored(text, needle, line):
    with pytest.raises(ConfigError) as exc:
        RunConfig.from_text(text, "convergence")
    assert needle in str(exc.value)
    assert exc.value.line == line


def test_incompatible_data_is_config_error(tmp_path):
    body = {"mesh": {"family": "torus", "nx": 6, "ny": 6}, "data": "constant:1", "p": 2}
    code, out = run(tmp_path, "solve", body)
    assert code == 1
    assert json.loads((out / "manifest.json").read_text())["exit_status"] == 1


def test_non_convergence_exit_2(tmp_path):
    body = {"mesh": {"family": "rectangle", "nx": 8, "ny": 8}, "data": "spike:center", "p": 1.3,
            "solver": {"max_iter": 1}}
    code, _ = run(tmp_path, "solve", body)
    assert code == 2


def test_entropy_bounded_data(tmp_path):
    code, out = run(tmp_path, "entropy", dict(INTERVAL, p=1.5, schedule={"levels": [2.0, 4.0]}))
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["certificate_max_scaled"] <= 5e-7
    report = json.loads((out / "report.json").read_text())
    assert len(report["stages"]) == 2


def test_convergence_command(tmp_path):
    body = dict(INTERVAL, convergence={"n_values": [32, 64, 128, 256], "p_values": [2]})
    code, out = run(tmp_path, "convergence", body)
    assert code == 0
    fit = json.loads((out / "convergence.json").read_text())["fits"][0]
    assert fit["fitted_order"] >= 1.5
    assert (out / "convergence.csv").read_text().startswith("p,n,h,linf_error,nodal_error,converged")


def test_picone_default_and_seed(tmp_path):
    body = {"mesh": {"family": "torus", "nx": 5, "ny": 5}, "p": 2, "picone": {"samples": 10}}
    code, out = run(tmp_path, "picone", body)
    assert code == 0
    doc = json.loads((out / "picone.json").read_text())
    assert all(e["invalid_identity_cells"] == 0 for e in doc["pointwise"])
    first = (out / "picone.csv").read_bytes()
    code, out2 = run(tmp_path, "picone", body, "--seed", "17")
    assert code == 0 and (out2 / "picone.csv").read_bytes() != first
    assert json.loads((out2 / "manifest.json").read_text())["seed"] == 17


def test_seed_out_of_range(tmp_path):
    code, _ = run(tmp_path, "solve", INTERVAL, "--seed", str(2 ** 64))
    assert code == 1


def test_compare_command(tmp_path):
    body = {"mesh": {"family": "rectangle", "nx": 12, "ny": 12}, "data": "spike:center", "p": 1.5,
            "schedule": {"levels": [2, 8]}, "schedule_b": {"levels": [3, 12]},
            "compare": {"q": 0.25}}
    code, out = run(tmp_path, "compare", body)
    assert code == 0
    doc = json.loads((out / "compare.json").read_text())
    assert doc["passed"] and doc["comparison"]["violations"] == 0


def test_shipped_configs_validate():
    commands = {"solve_interval": "solve", "solve_sphere": "solve", "entropy_bounded_1d": "entropy",
                "entropy_spike": "entropy", "estimates_spike": "estimates", "picone_torus": "picone",
                "compare_spike": "compare", "convergence": "convergence"}
    for name, command in commands.items():
        RunConfig.load(CONFIGS / f"{name}.json", command)


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "plap" in capsys.readouterr().out
