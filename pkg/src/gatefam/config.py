"""Experiment configuration: JSON schema, defaults and seed substreams."""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from pathlib import Path

import jsonschema
import numpy as np

from .quantum import FAMILY_NAMES, gate_family


class ConfigError(ValueError):
    """Raised for configs that fail schema or semantic validation."""


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int = {"type": "integer"}
_posint = {"type": "integer", "minimum": 1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj(
    {
        "family": {"type": "string", "enum": list(FAMILY_NAMES)},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "T": {"type": "integer", "minimum": 3},
        "dt": _pos,
        "grid": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1, "maxItems": 2},
        "system": _obj({"qubits": {"type": "integer", "enum": [1, 2]}, "amplitude_bound": _pos,
                        "acceleration_bound": _pos}),
        "solver": _obj({
            "reg_weight": _nonneg, "edge_mode": {"type": "string", "enum": ["control", "acceleration", "unitary"]},
            "edge_weight": _nonneg, "offset_weight": {"type": ["number", "null"], "minimum": 0},
            "init": {"type": ["string", "null"], "enum": ["continuation", "independent", None]}, "fidelity_tol": _pos, "kkt_tol": _pos,
            "max_outer": _posint, "max_inner": _posint, "jitter": _nonneg,
            "time_limit": {"type": ["number", "null"], "exclusiveMinimum": 0},
        }),
        "network": _obj({"hidden": {"type": "array", "items": _posint, "minItems": 1}, "readout_gain": _pos}),
        "pretrain": _obj({"learning_rate": _pos, "max_iters": _posint, "mse_tol": _nonneg}),
        "training": _obj({"epoch_samples": _posint, "batch_size": _posint, "l1_weight": _nonneg,
                          "learning_rate": _pos, "max_epochs": {"type": "integer", "minimum": 0},
                          "threshold_fidelity": {"type": "number", "minimum": 0, "maximum": 1}}),
        "evaluation": _obj({"grid": {"type": "integer", "minimum": 2}, "n_random": _posint}),
        "calibration": _obj({"sigma": _nonneg, "n_points": _posint, "grad_threshold": _pos,
                             "learning_rate": _pos, "max_iters": _posint}),
        "mintime": _obj({
            "targets": {"type": "array", "items": {"type": "string", "enum": ["CNOT", "RX90", "ADAPT12"]}},
            "theta": _num, "T": {"type": "integer", "minimum": 3}, "dt_init": _pos,
            "fidelity": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}, "max_duration": _pos,
        }),
        "report": _obj({"direct_duration": {"type": ["number", "null"], "exclusiveMinimum": 0}}),
    },
    required=("family",),
)

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs",
    "T": 51,
    "dt": 0.2,
    "system": {"amplitude_bound": 1.0, "acceleration_bound": 1.0},
    "solver": {"reg_weight": 1e-3, "edge_mode": "acceleration", "edge_weight": 1.0, "offset_weight": None,
               "init": None, "fidelity_tol": 1e-4, "kkt_tol": 1e-6, "max_outer": 30, "max_inner": 500, "jitter": 0.01,
               "time_limit": None},
    "network": {"hidden": [128, 128, 128], "readout_gain": 0.1},
    "pretrain": {"learning_rate": 1e-3, "max_iters": 20000, "mse_tol": 1e-6},
    "training": {"epoch_samples": 500, "batch_size": 50, "l1_weight": 0.0, "learning_rate": 1e-4,
                 "max_epochs": 100, "threshold_fidelity": 0.9999},
    "evaluation": {"grid": 64, "n_random": 4500},
    "calibration": {"sigma": 0.10, "n_points": 10, "grad_threshold": 1e-8, "learning_rate": 1e-3,
                    "max_iters": 5000},
    "mintime": {"targets": ["CNOT", "RX90", "ADAPT12"], "theta": float(np.pi), "T": 51, "dt_init": 0.2,
                "fidelity": 0.9999, "max_duration": 50.0},
    "report": {"direct_duration": None},
}

# which config sections each artifact depends on, for upstream hash checks
STAGE_SECTIONS = {
    "pulses": ("family", "seed", "T", "dt", "grid", "system", "solver"),
    "pretrained": ("family", "seed", "T", "dt", "grid", "system", "solver", "network", "pretrain"),
    "mintime": ("seed", "system", "solver", "mintime"),
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate(raw: dict) -> dict:
    """Validate a raw config and fill in defaults; raises ConfigError naming the bad path."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_path(e)}: {e.message}")
    cfg = _merge(DEFAULTS, raw)
    fam = gate_family(cfg["family"])
    cfg["system"].setdefault("qubits", fam.qubits)
    if cfg["system"]["qubits"] != fam.qubits:
        raise ConfigError(f"system/qubits: family {fam.name} acts on {fam.qubits} qubit(s)")
    if "grid" not in cfg:
        cfg["grid"] = [11] * fam.param_count
    if fam.param_count and len(cfg["grid"]) != fam.param_count:
        raise ConfigError(f"grid: family {fam.name} has {fam.param_count} parameter(s)")
    tr = cfg["training"]
    if tr["epoch_samples"] % tr["batch_size"]:
        raise ConfigError("training/epoch_samples: must be divisible by training/batch_size")
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return validate(raw)


def config_hash(cfg: dict, sections=None) -> str:
    """SHA-256 of the canonical JSON of the chosen top-level sections."""
    part = cfg if sections is None else {k: cfg.get(k) for k in sections}
    return hashlib.sha256(json.dumps(part, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def stage_seed(seed: int, stage: str) -> int:
    """Independent 32-bit seed for a named stage, derived from the config seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])
