"""Checkpoint container: a zip holding a JSON manifest and raw parameter bytes.

The manifest echoes the run configuration and lists every parameter with its
shape and the floating-point precision; each parameter is stored as its raw
little-endian bytes under params/<name>.bin. Round-trips are byte-exact.
"""

from __future__ import annotations

import json
import zipfile

import numpy as np

from . import tensor as T
from .errors import DataError

_LE_DTYPES = {"single": "<f4", "double": "<f8"}

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


def save_checkpoint(path, params: dict, config: dict) -> None:
    """Write parameters (name -> Tensor or ndarray) and a config echo."""
    precision = T.get_precision()
    dtype = _LE_DTYPES[precision]
    manifest = {"format_version": FORMAT_VERSION, "precision": precision,
                "config": config, "params": []}
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(params):
            value = params[name]
            arr = value if isinstance(value, np.ndarray) else value.data
            arr = np.ascontiguousarray(arr, dtype=dtype)
            manifest["params"].append({"name": name, "shape": list(arr.shape)})
            zf.writestr(f"params/{name}.bin", arr.tobytes())
        zf.writestr(MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Read a checkpoint; returns (config, manifest, arrays by name)."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            try:
                manifest = json.loads(zf.read(MANIFEST_NAME))
            except KeyError:
                raise DataError(f"{path}: checkpoint has no {MANIFEST_NAME}") from None
            dtype = _LE_DTYPES.get(manifest.get("precision"))
            if dtype is None:
                raise DataError(f"{path}: unknown precision {manifest.get('precision')!r}")
            arrays = {}
            for entry in manifest["params"]:
                name = entry["name"]
                try:
                    raw = zf.read(f"params/{name}.bin")
                    arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
                except (KeyError, ValueError) as exc:
                    raise DataError(f"{path}: parameter {name} unreadable: {exc}") from None
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except zipfile.BadZipFile as exc:
        raise DataError(f"{path}: not a checkpoint container: {exc}") from None
    return manifest["config"], manifest, arrays
