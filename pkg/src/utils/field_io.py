"""
Field and table persistence.

Binary fields are little-endian float64 (re, im) pairs in C order with a
JSON sidecar holding shape, frame and chart hash. Tables are CSV with
fixed float formatting so identical runs give identical bytes.
"""

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from utils.errors import ConfigInvalid

logger = logging.getLogger(__name__)

FIELD_FORMAT = "complex128-le-pairs"


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_field(path, values: np.ndarray, frame: str = "orthonormal",
                chart_hash: Optional[str] = None, extra: Optional[Dict] = None) -> Path:
    """
    Write a complex array as (re, im) float64 pairs plus a JSON sidecar.

    Returns:
        Path of the binary file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values, dtype=complex)
    pairs = np.stack([values.real, values.imag], axis=-1).astype("<f8")
    path.write_bytes(np.ascontiguousarray(pairs).tobytes())

    meta = {"shape": list(values.shape), "format": FIELD_FORMAT, "frame": frame,
            "chart_hash": chart_hash, "sha256": file_sha256(path)}
    if extra:
        meta.update(extra)
    write_json(_sidecar(path), meta)
    return path


def read_field(path) -> Tuple[np.ndarray, Dict]:
    """
    Read a field written by write_field.

    Raises:
        ConfigInvalid: if the file or its sidecar is missing or inconsistent
    """
    path = Path(path)
    sidecar = _sidecar(path)
    if not path.exists() or not sidecar.exists():
        raise ConfigInvalid(f"field file {path} or its sidecar is missing")
    meta = json.loads(sidecar.read_text())
    if meta.get("format") != FIELD_FORMAT:
        raise ConfigInvalid(f"{path}: unsupported field format {meta.get('format')}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    shape = tuple(meta["shape"])
    if raw.size != 2 * int(np.prod(shape)):
        raise ConfigInvalid(f"{path}: {raw.size} values do not match shape {shape}")
    pairs = raw.reshape(shape + (2,))
    return pairs[..., 0] + 1j * pairs[..., 1], meta


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (complex, np.complexfloating)):
        return [float(np.real(value)), float(np.imag(value))]
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.12e}"
    if isinstance(value, (complex, np.complexfloating)):
        return f"{value.real:.12e}{value.imag:+.12e}j"
    return str(value)


def write_csv(path, rows: Iterable[Dict], columns: Optional[List[str]] = None) -> Path:
    """Write dict rows with a fixed column order and float format."""
    rows = list(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format_cell(row.get(k, "")) for k in columns})
    logger.debug(f"Wrote {len(rows)} rows to {path}")
    return path


def read_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
