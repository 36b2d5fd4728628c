"""Volume/Case containers and the native manifest + raw payload format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import UnsupportedFormatError, UnsupportedOrientationError

# Patient axes are L, P, S (a +x step moves toward the patient's left).
# A code letter names where a voxel axis starts, so "RAI" is the identity.
_CODE_TO_VEC = {
    "R": (0, 1.0),
    "L": (0, -1.0),
    "A": (1, 1.0),
    "P": (1, -1.0),
    "I": (2, 1.0),
    "S": (2, -1.0),
}
_VEC_TO_CODE = {v: k for k, v in _CODE_TO_VEC.items()}

SPLITS = ("labeled", "unlabeled", "validation")


@dataclass
class Volume:
    """Scalar 3D grid with spacing (mm) and a direction matrix.

    Column ``j`` of ``direction`` is the unit patient-space vector of voxel
    axis ``j``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))
    kind: str = "image"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume payload must be 3-D, got shape {self.data.shape}")
        if self.kind not in ("image", "mask"):
            raise ValueError(f"kind must be 'image' or 'mask', got {self.kind!r}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3, 3)
        norms = np.linalg.norm(self.direction, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-4):
            raise ValueError(f"direction columns must be unit vectors, norms are {norms}")
        if self.kind == "mask" and self.data.dtype.kind not in "iub":
            raise ValueError(f"mask payload must be integer, got {self.data.dtype}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, **changes) -> "Volume":
        return replace(self, data=data, meta=dict(self.meta), **changes)

    def copy(self) -> "Volume":
        return replace(self, data=self.data.copy(), direction=self.direction.copy(), meta=dict(self.meta))


@dataclass
class Case:
    case_id: str
    image: Volume
    label: Optional[Volume] = None
    split: str = "labeled"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.label is not None:
            if self.label.extents != self.image.extents:
                raise ValueError(f"label grid {self.label.extents} != image grid {self.image.extents}")
            if self.label.spacing != self.image.spacing or not np.allclose(
                self.label.direction, self.image.direction
            ):
                raise ValueError("label spacing/orientation differ from the image")


# --------------------------------------------------------------- orientation
def axis_codes(direction: np.ndarray, tol: float = 0.1) -> str:
    """Three-letter origin code, e.g. 'RAI', after snapping to the nearest axes."""
    d = np.asarray(direction, dtype=float)
    codes = []
    used = set()
    for j in range(3):
        col = d[:, j]
        i = int(np.argmax(np.abs(col)))
        off = np.delete(np.abs(col), i)
        if off.max(initial=0.0) > tol:
            raise UnsupportedOrientationError(f"voxel axis {j} is oblique: direction column {col.round(4).tolist()}")
        if i in used:
            raise UnsupportedOrientationError(f"two voxel axes map onto patient axis {i}")
        used.add(i)
        codes.append(_VEC_TO_CODE[(i, 1.0 if col[i] > 0 else -1.0)])
    return "".join(codes)


def direction_from_codes(codes: str) -> np.ndarray:
    codes = codes.upper()
    if len(codes) != 3 or any(c not in _CODE_TO_VEC for c in codes):
        raise ValueError(f"bad orientation codes {codes!r}")
    d = np.zeros((3, 3))
    for j, c in enumerate(codes):
        i, sign = _CODE_TO_VEC[c]
        d[i, j] = sign
    if sorted(_CODE_TO_VEC[c][0] for c in codes) != [0, 1, 2]:
        raise ValueError(f"orientation codes {codes!r} repeat a patient axis")
    return d


# ------------------------------------------------------------- native format
_NATIVE_DTYPES = {"image": "<f4", "mask": "|u1"}


def save_volume(path_stem, volume: Volume) -> Path:
    """Write ``<stem>.json`` (manifest) and ``<stem>.raw`` (little-endian payload)."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(_NATIVE_DTYPES[volume.kind])
    payload = volume.data
    if volume.kind == "mask" and (payload.min(initial=0) < 0 or payload.max(initial=0) > 255):
        raise ValueError("mask labels must fit in 8 bits")
    raw_name = stem.name + ".raw"
    manifest = {
        "extents": list(volume.extents),
        "spacing": list(volume.spacing),
        "orientation": axis_codes(volume.direction),
        "dtype": dtype.str,
        "kind": volume.kind,
        "payload": raw_name,
    }
    # C order: axis 2 varies fastest.
    (stem.parent / raw_name).write_bytes(np.ascontiguousarray(payload, dtype=dtype).tobytes())
    manifest_path = stem.parent / (stem.name + ".json")
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest_path


def load_volume(manifest_path) -> Volume:
    path = Path(manifest_path)
    if path.suffix != ".json":
        path = path.with_name(path.name + ".json")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UnsupportedFormatError(f"{path}: manifest is not valid JSON ({exc})") from exc
    for key in ("extents", "spacing", "orientation", "dtype", "payload"):
        if key not in manifest:
            raise UnsupportedFormatError(f"{path}: manifest field {key!r} missing")
    dtype = np.dtype(manifest["dtype"])
    extents = tuple(int(n) for n in manifest["extents"])
    raw = (path.parent / manifest["payload"]).read_bytes()
    expected = int(np.prod(extents)) * dtype.itemsize
    if len(raw) != expected:
        raise UnsupportedFormatError(f"{path}: payload has {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype=dtype).reshape(extents).copy()
    kind = manifest.get("kind", "mask" if dtype.kind in "iu" else "image")
    return Volume(
        data=data,
        spacing=tuple(manifest["spacing"]),
        direction=direction_from_codes(manifest["orientation"]),
        kind=kind,
    )
