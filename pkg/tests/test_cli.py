import json

import pytest

from start import main

SMALL = {
    "schema": 1,
    "chart": {"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5], "shape": [8, 8, 8]},
    "materials": {"m1": {"omega": 1.3, "eps": "1 + 0.2*bump(sqrt(x1**2 + (r - 1)**2)/0.3)"}},
    "seed": 5,
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def _run_dirs(root):
    return sorted(p for p in root.iterdir() if p.is_dir())


def test_missing_config_exits_2(tmp_path):
    assert main(["calc", "verify", "--config", str(tmp_path / "none.json")]) == 2


def test_bad_tolerance_override_exits_2(config_path, tmp_path):
    argv = ["calc", "verify", "--config", str(config_path), "--out", str(tmp_path / "runs"),
            "--tol-override", "identity"]
    assert main(argv) == 2


def test_report_needs_a_manifest(tmp_path):
    assert main(["report", str(tmp_path)]) == 2


def test_calc_verify_is_reproducible(config_path, tmp_path):
    out = tmp_path / "runs"
    argv = ["calc", "verify", "--config", str(config_path), "--out", str(out)]
    assert main(argv) == 0
    assert main(argv) == 0

    first, second = _run_dirs(out)
    assert (first / "identities.csv").read_bytes() == (second / "identities.csv").read_bytes()

    manifest = json.loads((first / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert manifest["seed"] == 5
    assert "identities.csv" in [a["path"] for a in manifest["artifacts"]]

    header = (first / "identities.csv").read_text().splitlines()[0]
    assert header == "identity,relative_residual,tolerance,passed"


def test_seed_flag_changes_the_draw(config_path, tmp_path):
    out = tmp_path / "runs"
    base = ["calc", "verify", "--config", str(config_path), "--out", str(out)]
    assert main(base) == 0
    assert main(base + ["--seed", "6"]) == 0
    first, second = _run_dirs(out)
    assert json.loads((second / "manifest.json").read_text())["seed"] == 6
    assert (first / "identities.csv").read_bytes() != (second / "identities.csv").read_bytes()


def test_report_checks_artifacts(config_path, tmp_path):
    out = tmp_path / "runs"
    assert main(["calc", "verify", "--config", str(config_path), "--out", str(out)]) == 0
    run_dir = _run_dirs(out)[0]

    assert main(["report", str(run_dir)]) == 0
    report = (run_dir / "report" / "report.csv").read_text().splitlines()
    assert report[0] == "artifact,sha256_ok,rows"
    assert any(line.startswith("identities.csv,True,") for line in report[1:])
