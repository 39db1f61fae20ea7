import json

import numpy as np
import pytest

from utils.errors import ConfigInvalid
from utils.field_io import file_sha256, read_csv, read_field, write_csv, write_field, write_json


def test_field_file_keeps_values_and_metadata(tmp_path):
    values = np.arange(24, dtype=float).reshape(2, 3, 4) * (1 - 0.5j)
    path = write_field(tmp_path / "f.bin", values, chart_hash="abc123", extra={"note": "test"})

    assert path.stat().st_size == values.size * 16
    loaded, meta = read_field(path)
    assert np.array_equal(loaded, values)
    assert meta["shape"] == [2, 3, 4]
    assert meta["chart_hash"] == "abc123"
    assert meta["note"] == "test"
    assert meta["sha256"] == file_sha256(path)


def test_missing_sidecar_is_invalid(tmp_path):
    path = write_field(tmp_path / "f.bin", np.ones(3))
    path.with_suffix(".bin.json").unlink()
    with pytest.raises(ConfigInvalid):
        read_field(path)


def test_truncated_field_is_invalid(tmp_path):
    path = write_field(tmp_path / "f.bin", np.ones((2, 2)))
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(ConfigInvalid):
        read_field(path)


def test_csv_uses_fixed_float_format(tmp_path):
    path = write_csv(tmp_path / "t.csv", [{"name": "a", "value": 1.0, "ok": True}, {"name": "b", "value": 0.25}],
                     ["name", "value", "ok"])
    text = path.read_text()
    assert text.splitlines()[0] == "name,value,ok"
    assert "a,1.000000000000e+00,True" in text
    rows = read_csv(path)
    assert rows[1] == {"name": "b", "value": "2.500000000000e-01", "ok": ""}


def test_json_serializes_numpy_and_complex(tmp_path):
    path = write_json(tmp_path / "r.json", {"x": np.float64(1.5), "z": 1 + 2j, "a": np.arange(3)})
    data = json.loads(path.read_text())
    assert data == {"a": [0, 1, 2], "x": 1.5, "z": [1.0, 2.0]}
