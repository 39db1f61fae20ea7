import json
from pathlib import Path

import pytest

from config import TOLERANCES
from models.run_config import RunConfig, load_run_config, parse_tol_overrides
from utils.errors import ConfigInvalid

DATA = Path(__file__).resolve().parents[1] / "src" / "data"


def _minimal(**extra):
    data = {"schema": 1, "chart": {"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                                   "shape": [8, 8, 8]}}
    data.update(extra)
    return data


@pytest.mark.parametrize("name", ["flatdisc.json", "pipeline.json", "ball_logpolar.json"])
def test_shipped_configs_load(name):
    config = load_run_config(str(DATA / name))
    assert config.seed == 0
    assert "m1" in config.materials


@pytest.mark.parametrize("data", [
    _minimal(schema=2),
    _minimal(plot={}),
    {"schema": 1},
    {"schema": 1, "chart": {"surface": "flat_disc", "shape": [8, 8, 8], "r_range": [0.5, 1.5]}},
    _minimal(materials={"m1": {"eps": "2"}}),
    _minimal(materials={"m1": {"omega": 1.0, "eps_file": "missing.bin"}}),
    _minimal(seed="abc"),
    [],
])
def test_invalid_configs(data):
    with pytest.raises(ConfigInvalid):
        RunConfig.from_dict(data)


def test_field_file_paths_resolve_against_the_config(tmp_path):
    (tmp_path / "eps.bin").write_bytes(b"")
    path = tmp_path / "run.json"
    path.write_text(json.dumps(_minimal(materials={"m1": {"omega": 1.0, "eps_file": "eps.bin"}})))
    config = load_run_config(str(path))
    assert config.material("m1")["eps_file"] == str(tmp_path / "eps.bin")
    with pytest.raises(ConfigInvalid):
        config.material("m2")


def test_missing_and_unreadable_files(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_run_config(str(tmp_path / "absent.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigInvalid):
        load_run_config(str(broken))


def test_tolerance_overrides():
    assert parse_tol_overrides(["solver=1e-6", " cg = 2e-8"]) == {"solver": 1e-6, "cg": 2e-8}
    for bad in (["solver"], ["nonsense=1"], ["solver=tight"]):
        with pytest.raises(ConfigInvalid):
            parse_tol_overrides(bad)


def test_flags_override_file_values():
    config = RunConfig.from_dict(_minimal(seed=4, tolerances={"newton": 1e-8}))
    assert config.tolerances["newton"] == 1e-8
    updated = config.with_overrides(seed=9, out="elsewhere", tol_overrides=["identity=1e-9"])
    assert (updated.seed, updated.out) == (9, "elsewhere")
    assert updated.tolerances["identity"] == 1e-9
    assert updated.tolerances["newton"] == 1e-8
    assert config.tolerances["identity"] == TOLERANCES["identity"]
    assert config.with_overrides().seed == 4
