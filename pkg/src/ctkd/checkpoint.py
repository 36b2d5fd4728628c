"""Flat binary tensor containers with a JSON manifest.

``<name>.bin`` holds the tensors back to back as little-endian float32;
``<name>.json`` lists name, shape and byte offset for each, plus any extra
metadata (the network config for parameter files).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .errors import UnsupportedFormatError
from .networks import ModelParams, NetworkConfig
from .autodiff import Tensor

_DTYPE = np.dtype("<f4")


def save_tensors(stem, arrays: Mapping[str, np.ndarray], extra: Optional[dict] = None) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=_DTYPE)
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    bin_path = stem.with_name(stem.name + ".bin")
    try:
        bin_path.write_bytes(b"".join(chunks))
        manifest = {"dtype": "float32-le", "tensors": entries, "nbytes": offset}
        if extra:
            manifest.update(extra)
        stem.with_name(stem.name + ".json").write_text(json.dumps(manifest, indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {bin_path}: {exc}") from exc
    return bin_path


def load_tensors(stem) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    manifest_path = stem.with_name(stem.name + ".json")
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest {manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    raw = stem.with_name(stem.name + ".bin").read_bytes()
    if len(raw) != manifest.get("nbytes", len(raw)):
        raise UnsupportedFormatError(f"{stem}.bin has {len(raw)} bytes, manifest says {manifest['nbytes']}")
    out = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype=_DTYPE, count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return out, manifest


def save_model(stem, config: NetworkConfig, params: ModelParams) -> Path:
    return save_tensors(stem, {k: v.data for k, v in params.items()}, {"network": config.to_dict()})


def load_model(stem) -> tuple[NetworkConfig, ModelParams]:
    arrays, manifest = load_tensors(stem)
    if "network" not in manifest:
        raise UnsupportedFormatError(f"{stem}.json has no network config")
    config = NetworkConfig.from_dict(manifest["network"])
    params = ModelParams((k, Tensor(v, requires_grad=True)) for k, v in arrays.items())
    return config, params
