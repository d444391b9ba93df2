"""Flat checkpoint container: parameter name -> shape + row-major values.

Stored as a single JSON document with a fixed key layout and parameters in
sorted name order, so identical inputs serialize to identical bytes.
Values round-trip exactly (json uses repr-style shortest float encoding).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ParseError
from .tensor import Tensor

FORMAT_NAME = "graphads-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, Tensor],
                    root_seed: int, hyperparameters: dict) -> None:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "root_seed": int(root_seed),
        "hyperparameters": hyperparameters,
        "params": {
            name: {
                "shape": list(params[name].shape),
                "data": params[name].data.reshape(-1).tolist(),
            }
            for name in sorted(params)
        },
    }
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    """Returns (params, header) where header has root_seed and hyperparameters."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"not a valid checkpoint file: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ParseError("not a valid checkpoint file: missing format marker")
    if doc.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {doc.get('version')!r}")
    params: dict[str, Tensor] = {}
    for name, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    header = {
        "root_seed": doc["root_seed"],
        "hyperparameters": doc["hyperparameters"],
    }
    return params, header
