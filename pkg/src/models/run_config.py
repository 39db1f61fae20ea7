"""
Run configuration model for one command-line run.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from config import CONFIG_SCHEMA_VERSION, DEFAULT_SEED, OUTPUT_DIR, TOLERANCES
from utils.errors import ConfigInvalid

logger = logging.getLogger(__name__)

SECTIONS = ("cgo", "carleman", "raytransform", "recovery", "forward")
KNOWN_KEYS = {"schema", "chart", "materials", "seed", "out", "tolerances", *SECTIONS}


@dataclass
class RunConfig:
    """
    Validated run configuration.

    Attributes:
        chart: Chart spec for geometry.build_chart
        materials: Material specs by name ('m1', 'm2', ...), expressions or field files
        sections: Module blocks (cgo, carleman, raytransform, recovery, forward)
        out: Output root; each run gets a timestamped directory below it
        seed: Seed for every random draw of the run
        tolerances: TOLERANCES with the run's overrides applied
        source: Path the config was read from
    """
    chart: Dict
    materials: Dict[str, Dict] = field(default_factory=dict)
    sections: Dict[str, Dict] = field(default_factory=dict)
    out: str = OUTPUT_DIR
    seed: int = DEFAULT_SEED
    tolerances: Dict[str, float] = field(default_factory=lambda: dict(TOLERANCES))
    source: Optional[str] = None

    def section(self, name: str) -> Dict:
        """Module block, empty when the config has none."""
        return dict(self.sections.get(name, {}))

    def material(self, name: str) -> Dict:
        """
        Raises:
            ConfigInvalid: if the material block is missing
        """
        if name not in self.materials:
            raise ConfigInvalid(f"config has no material '{name}' (available: {', '.join(self.materials) or 'none'})")
        return dict(self.materials[name])

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       tol_overrides: Optional[List[str]] = None) -> "RunConfig":
        """Apply command-line flags on top of the file values."""
        tolerances = dict(self.tolerances)
        tolerances.update(parse_tol_overrides(tol_overrides or []))
        return RunConfig(chart=self.chart, materials=self.materials, sections=self.sections,
                         out=out if out is not None else self.out,
                         seed=seed if seed is not None else self.seed,
                         tolerances=tolerances, source=self.source)

    def to_dict(self) -> Dict:
        data = {"schema": CONFIG_SCHEMA_VERSION, "chart": self.chart, "materials": self.materials,
                "seed": self.seed, "out": self.out, "tolerances": self.tolerances}
        data.update(self.sections)
        return data

    @classmethod
    def from_dict(cls, data: Dict, source: Optional[str] = None) -> "RunConfig":
        """
        Raises:
            ConfigInvalid: on schema mismatch, unknown keys, missing chart or missing field files
        """
        if not isinstance(data, dict):
            raise ConfigInvalid("config must be a JSON object")
        schema = data.get("schema")
        if schema != CONFIG_SCHEMA_VERSION:
            raise ConfigInvalid(f"unsupported config schema {schema!r} (expected {CONFIG_SCHEMA_VERSION})")
        unknown = set(data) - KNOWN_KEYS
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {', '.join(sorted(unknown))}")
        if not isinstance(data.get("chart"), dict):
            raise ConfigInvalid("config needs a 'chart' object")
        required = ("shape",) if "log_polar_ball" in data["chart"] else ("shape", "x1_range", "r_range")
        for key in required:
            if key not in data["chart"]:
                raise ConfigInvalid(f"chart is missing '{key}'")

        base = Path(source).parent if source else Path(".")
        materials = {name: _resolve_files(block, base, name) for name, block in data.get("materials", {}).items()}
        tolerances = dict(TOLERANCES)
        for key, value in data.get("tolerances", {}).items():
            tolerances.update(parse_tol_overrides([f"{key}={value}"]))
        try:
            seed = int(data.get("seed", DEFAULT_SEED))
        except (TypeError, ValueError) as e:
            raise ConfigInvalid(f"seed must be an integer: {e}") from e

        return cls(chart=data["chart"], materials=materials,
                   sections={k: data[k] for k in SECTIONS if k in data},
                   out=str(data.get("out", OUTPUT_DIR)), seed=seed, tolerances=tolerances, source=source)


def _resolve_files(block: Dict, base: Path, name: str) -> Dict:
    """Make eps_file / mu_file paths absolute and require them to exist."""
    if not isinstance(block, dict) or "omega" not in block:
        raise ConfigInvalid(f"material '{name}' needs an object with 'omega'")
    resolved = dict(block)
    for key in ("eps_file", "mu_file"):
        if key in resolved:
            path = Path(resolved[key])
            if not path.is_absolute():
                path = base / path
            if not path.exists():
                raise ConfigInvalid(f"material '{name}': {key} '{path}' does not exist")
            resolved[key] = str(path)
    return resolved


def parse_tol_overrides(items: List[str]) -> Dict[str, float]:
    """
    Parse 'key=val' strings against the known tolerance names.

    Raises:
        ConfigInvalid: for unknown keys or non-numeric values
    """
    parsed = {}
    for item in items:
        key, sep, value = str(item).partition("=")
        key = key.strip()
        if not sep:
            raise ConfigInvalid(f"tolerance override '{item}' is not key=val")
        if key not in TOLERANCES:
            raise ConfigInvalid(f"unknown tolerance '{key}' (known: {', '.join(TOLERANCES)})")
        try:
            parsed[key] = float(value)
        except ValueError as e:
            raise ConfigInvalid(f"tolerance '{key}' needs a number, got '{value}'") from e
    return parsed


def load_run_config(path: str) -> RunConfig:
    """
    Read and validate a JSON run config.

    Raises:
        ConfigInvalid: if the file is missing, unreadable or invalid
    """
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigInvalid(f"config file '{path}' does not exist")
    try:
        with open(config_path, 'r') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigInvalid(f"cannot read config '{path}': {e}") from e
    config = RunConfig.from_dict(data, source=str(config_path))
    logger.info(f"Loaded config {config_path.name}: chart {config.chart.get('surface', 'flat_disc')}, "
                f"{len(config.materials)} materials, sections {', '.join(config.sections) or 'none'}")
    return config

