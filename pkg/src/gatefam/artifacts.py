"""Atomic, schema-versioned artifact files (JSON and CSV)."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .trajectory import AugmentedTrajectory

SCHEMA_VERSION = 1
KINDS = ("pulses", "weights", "history", "heatmap", "report", "mintime", "calibration", "diagnostics")


class ArtifactError(RuntimeError):
    """Missing, malformed or mismatched artifact."""


def atomic_write(path, text: str):
    """Write to a temp file in the same directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def provenance(config_hash: str, seed: int, stage: str) -> dict:
    return {"config_hash": config_hash, "seed": int(seed), "stage": stage,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None if np.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


def write_json(path, kind: str, payload, prov: Optional[dict] = None):
    if kind not in KINDS:
        raise ValueError(f"unknown artifact kind {kind!r}")
    doc = {"kind": kind, "schema_version": SCHEMA_VERSION, "provenance": prov or {}, "payload": _jsonable(payload)}
    # repr round-trips doubles exactly
    atomic_write(path, json.dumps(doc, indent=1, allow_nan=False) + "\n")


def read_json(path, kind: Optional[str] = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: not valid JSON") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ArtifactError(f"{path}: unsupported schema version {doc.get('schema_version')}")
    if kind is not None and doc.get("kind") != kind:
        raise ArtifactError(f"{path}: expected a {kind} artifact, found {doc.get('kind')}")
    return doc


def check_provenance(doc: dict, config_hash: str, path="artifact"):
    found = doc.get("provenance", {}).get("config_hash")
    if found != config_hash:
        raise ArtifactError(f"{path} was produced from a different configuration")


# -- pulses -------------------------------------------------------------------


def pulse_csv(tr: AugmentedTrajectory, channel_names) -> str:
    """Columns: knot, dt, then a, da, dda for each channel."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["knot", "dt"]
    for c in channel_names:
        head += [f"{c}_a", f"{c}_da", f"{c}_dda"]
    w.writerow(head)
    for t in range(tr.T):
        row = [t, repr(float(tr.dt[t]))]
        for c in range(len(channel_names)):
            row += [repr(float(tr.ctrl[c, t])), repr(float(tr.vel[c, t])), repr(float(tr.accel[c, t]))]
        w.writerow(row)
    return buf.getvalue()


def read_pulse_csv(path):
    """Returns (dt, ctrl, vel, accel) arrays from a pulse CSV."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing pulse file {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], np.array(rows[1:], dtype=float)
    if head[:2] != ["knot", "dt"] or (len(head) - 2) % 3:
        raise ArtifactError(f"{path}: unexpected pulse columns")
    k = (len(head) - 2) // 3
    data = body[:, 2:].reshape(len(body), k, 3).transpose(2, 1, 0)
    return body[:, 1], data[0], data[1], data[2]


def heatmap_csv(params: np.ndarray, infidelity: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = ["theta", "phi"][: params.shape[1]]
    w.writerow(names + ["infidelity"])
    for p, v in zip(params, infidelity):
        w.writerow([repr(float(x)) for x in p] + [repr(float(v))])
    return buf.getvalue()


def read_heatmap_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = np.array(rows[1:], dtype=float)
    return body[:, :-1], body[:, -1]
