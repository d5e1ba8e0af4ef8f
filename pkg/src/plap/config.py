"""Run configuration: JSON schema ``plap-config/1``, validation and object builders."""

from __future__ import annotations

import json
import re
from pathlib import Path

import jsonschema

from .entropy import ApproximationSchedule, FitWindow
from .geometry import (
    Mesh,
    build_flat_torus_mesh,
    build_interval_mesh,
    build_rectangle_mesh,
    build_triangulated_sphere,
    load_mesh,
)
from .solver import SolverConfig

SCHEMA_VERSION = "plap-config/1"

_window = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["span", "max"]},
        "lo": {"type": "number"},
        "hi": {"type": "number"},
    },
    "additionalProperties": False,
}

_schedule = {
    "type": "object",
    "required": ["levels"],
    "properties": {
        "levels": {"type": "array", "items": {"type": "number"}},
        "mode": {"enum": ["truncate_data", "clip_and_rescale"]},
    },
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema", "mesh", "p"],
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "mesh": {
            "type": "object",
            "required": ["family"],
            "properties": {
                "family": {"enum": ["interval", "torus", "sphere", "rectangle", "file"]},
                "n_cells": {"type": "integer"},
                "length": {"type": "number"},
                "nx": {"type": "integer"},
                "ny": {"type": "integer"},
                "lx": {"type": "number"},
                "ly": {"type": "number"},
                "subdivisions": {"type": "integer"},
                "radius": {"type": "number"},
                "path": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "data": {"type": "string"},
        "center_data": {"type": "boolean"},
        "p": {"type": "number"},
        "solver": {
            "type": "object",
            "properties": {
                "epsilon": {"type": "number"},
                "grad_tol": {"type": "number"},
                "max_iter": {"type": "integer"},
                "bc_mode": {"type": "string"},
                "shrink": {"type": "number"},
                "armijo": {"type": "number"},
                "epsilon0": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "schedule": _schedule,
        "schedule_b": _schedule,
        "k_grid": {"type": "array", "items": {"type": "number"}},
        "entropy": {
            "type": "object",
            "properties": {
                "apriori_bound": {"type": "number"},
                "certificate_bound": {"type": "number"},
                "test_bank_size": {"type": "integer"},
                "pass_to_limit": {"type": "boolean"},
                "u_window": _window,
                "grad_window": _window,
            },
            "additionalProperties": False,
        },
        "estimates": {
            "type": "object",
            "properties": {
                "q_values": {"type": "array", "items": {"type": "number"}},
                "n_thresholds": {"type": "integer"},
                "layer_cake_tol": {"type": "number"},
                "u_window": _window,
                "grad_window": _window,
            },
            "additionalProperties": False,
        },
        "picone": {
            "type": "object",
            "properties": {
                "p_values": {"type": "array", "items": {"type": "number"}},
                "samples": {"type": "integer"},
                "mode": {"enum": ["chain_rule", "interpolated"]},
            },
            "additionalProperties": False,
        },
        "compare": {
            "type": "object",
            "properties": {
                "gap_tol": {"type": "number"},
                "lambda": {"type": "number"},
                "q": {"type": "number"},
                "h": {"type": "string"},
                "mu": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "convergence": {
            "type": "object",
            "properties": {
                "n_values": {"type": "array", "items": {"type": "integer"}},
                "p_values": {"type": "array", "items": {"type": "number"}},
                "min_order": {"type": "object", "additionalProperties": {"type": "number"}},
                "samples_per_cell": {"type": "integer"},
            },
            "additionalProperties": False,
        },
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
    },
    "additionalProperties": False,
}

COMMAND_KEYS = {
    "solve": ("data",),
    "entropy": ("data", "schedule"),
    "estimates": ("data",),
    "picone": (),
    "compare": ("data", "schedule", "schedule_b"),
    "convergence": (),
}


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based (0 when not locatable)."""

    def __init__(self, message: str, line: int = 0, source: str = "config"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {message}")
        self.message = message


def _key_line(text: str, key: str) -> int:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else 0


def _describe(err: jsonschema.ValidationError) -> tuple[str, str | None]:
    path = ".".join(str(x) for x in err.absolute_path)
    if err.validator == "required":
        missing = re.search(r"'([^']+)' is a required property", err.message)
        key = missing.group(1) if missing else "?"
        where = f" in '{path}'" if path else ""
        return f"missing required key '{key}'{where}", None
    if err.validator == "additionalProperties":
        extra = re.findall(r"'([^']+)'", err.message)
        return f"unknown key(s) {', '.join(extra)}" + (f" in '{path}'" if path else ""), \
            (extra[0] if extra else None)
    key = str(err.absolute_path[-1]) if err.absolute_path else None
    return f"'{path}': {err.message}", key


class RunConfig:
    """Validated configuration plus the raw text (for line anchoring and the manifest)."""

    def __init__(self, raw: dict, text: str, source: str = "config", base_dir: Path | None = None):
        self.raw = raw
        self.text = text
        self.source = source
        self.base_dir = base_dir or Path(".")

    # -- loading ------------------------------------------------------------------

    @classmethod
    def load(cls, path, command: str | None = None) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
        return cls.from_text(text, command, source=str(path), base_dir=path.parent)

    @classmethod
    def from_text(cls, text: str, command: str | None = None, source: str = "config",
                  base_dir: Path | None = None) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno, source) from None
        cfg = cls(raw, text, source, base_dir)
        cfg.validate(command)
        return cfg

    def _fail(self, message: str, key: str | None = None):
        raise ConfigError(message, _key_line(self.text, key) if key else 0, self.source)

    def validate(self, command: str | None = None):
        raw = self.raw
        if not isinstance(raw, dict):
            self._fail("top level must be a JSON object")
        if "p" in raw and isinstance(raw["p"], (int, float)) and not raw["p"] > 1:
            self._fail("p must exceed 1", "p")
        validator = jsonschema.Draft202012Validator(SCHEMA)
        errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
        if errors:
            msg, key = _describe(errors[0])
            self._fail(msg, key)
        if command is not None:
            for key in COMMAND_KEYS[command]:
                if key not in raw:
                    self._fail(f"missing required key '{key}' for command '{command}'")
        # semantic checks: build everything once so errors surface before compute
        try:
            mesh = self.mesh()
        except ValueError as exc:
            self._fail(f"mesh: {exc}", "mesh")
        try:
            solver = self.solver_config()
        except ValueError as exc:
            self._fail(str(exc), "solver" if "solver" in raw else "p")
        try:
            solver.check_mesh(mesh)
        except ValueError as exc:
            self._fail(str(exc), "bc_mode" if "bc_mode" in raw.get("solver", {}) else "mesh")
        for key in ("schedule", "schedule_b"):
            if key in raw:
                try:
                    self.schedule(key)
                except ValueError as exc:
                    self._fail(f"{key}: {exc}", key)
        for section in ("entropy", "estimates"):
            for wkey in ("u_window", "grad_window"):
                if wkey in raw.get(section, {}):
                    try:
                        FitWindow(**raw[section][wkey])
                    except ValueError as exc:
                        self._fail(f"{section}.{wkey}: {exc}", wkey)
        if "data" in raw:
            kind = raw["data"].partition(":")[0]
            if kind not in ("constant", "spike", "sin", "file"):
                self._fail(f"unknown datum '{raw['data']}'", "data")
        self._mesh = mesh

    # -- builders -------------------------------------------------------------------

    def mesh(self) -> Mesh:
        if getattr(self, "_mesh", None) is not None:
            return self._mesh
        m = self.raw["mesh"]
        fam = m["family"]
        if fam == "interval":
            return build_interval_mesh(m.get("n_cells", 64), m.get("length", 1.0))
        if fam == "torus":
            return build_flat_torus_mesh(m.get("nx", 16), m.get("ny", 16), m.get("lx", 1.0), m.get("ly", 1.0))
        if fam == "rectangle":
            return build_rectangle_mesh(m.get("nx", 32), m.get("ny", 32), m.get("lx", 1.0), m.get("ly", 1.0))
        if fam == "sphere":
            return build_triangulated_sphere(m.get("subdivisions", 3), m.get("radius", 1.0))
        if "path" not in m:
            raise ValueError("family 'file' needs 'path'")
        path = Path(m["path"])
        return load_mesh(path if path.is_absolute() else self.base_dir / path)

    def solver_config(self, p: float | None = None) -> SolverConfig:
        s = dict(self.raw.get("solver", {}))
        mesh_closed = self.raw["mesh"]["family"] in ("torus", "sphere")
        s.setdefault("bc_mode", "zero_mean" if mesh_closed else "dirichlet_zero")
        return SolverConfig(p=float(self.raw["p"] if p is None else p), **s)

    def schedule(self, key: str = "schedule") -> ApproximationSchedule:
        s = self.raw[key]
        return ApproximationSchedule(tuple(s["levels"]), s.get("mode", "truncate_data"))

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))

    def window(self, section: str, key: str, default: FitWindow) -> FitWindow:
        w = self.section(section).get(key)
        return FitWindow(**w) if w else default

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))
