"""Deterministic structured-text checkpoints.

Arrays are stored as base64 of their little-endian float64 bytes inside a JSON
document, so a save/load cycle is bit-exact and two saves of the same state are
byte-identical.
"""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


def write_checkpoint(path, fmt: str, version: int, payload: dict, arrays: dict) -> Path:
    path = Path(path)
    doc = dict(payload)
    doc["format"] = fmt
    doc["version"] = version
    doc["arrays"] = {k: encode_array(v) for k, v in arrays.items()}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_checkpoint(path, fmt: str, version: int) -> tuple[dict, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != fmt:
        raise ValueError(f"{path} is not a {fmt} checkpoint")
    if doc.get("version") != version:
        raise ValueError(f"unsupported {fmt} checkpoint version {doc.get('version')}")
    arrays = {k: decode_array(v) for k, v in doc.pop("arrays").items()}
    return doc, arrays
