"""Single-file, uncompressed NIfTI-1 (.nii) reader and a minimal writer."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import UnsupportedFormatError
from .volume import Volume

HEADER_SIZE = 348
VOX_OFFSET = 352

# datatype code -> numpy dtype char
_DTYPES = {2: "u1", 4: "i2", 16: "f4"}
_CODES = {np.dtype("uint8"): 2, np.dtype("int16"): 4, np.dtype("float32"): 16}

# RAS world (NIfTI) <-> LPS world (used by Volume.direction)
_RAS_TO_LPS = np.diag([-1.0, -1.0, 1.0])


def _endian(hdr: bytes) -> str:
    for e in ("<", ">"):
        if struct.unpack_from(e + "i", hdr, 0)[0] == HEADER_SIZE:
            return e
    raise UnsupportedFormatError("sizeof_hdr is not 348 in either byte order")


def parse_header(hdr: bytes) -> dict:
    if len(hdr) < HEADER_SIZE:
        raise UnsupportedFormatError(f"header truncated to {len(hdr)} bytes")
    e = _endian(hdr)
    h = {
        "endian": e,
        "dim": struct.unpack_from(e + "8h", hdr, 40),
        "datatype": struct.unpack_from(e + "h", hdr, 70)[0],
        "bitpix": struct.unpack_from(e + "h", hdr, 72)[0],
        "pixdim": struct.unpack_from(e + "8f", hdr, 76),
        "vox_offset": struct.unpack_from(e + "f", hdr, 108)[0],
        "scl_slope": struct.unpack_from(e + "f", hdr, 112)[0],
        "scl_inter": struct.unpack_from(e + "f", hdr, 116)[0],
        "qform_code": struct.unpack_from(e + "h", hdr, 252)[0],
        "sform_code": struct.unpack_from(e + "h", hdr, 254)[0],
        "quatern": struct.unpack_from(e + "6f", hdr, 256),
        "srow": np.array(struct.unpack_from(e + "12f", hdr, 280), dtype=np.float64).reshape(3, 4),
        "magic": hdr[344:348],
    }
    return h


def _quaternion_matrix(b: float, c: float, d: float, qfac: float) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    if qfac < 0:
        r[:, 2] *= -1
    return r


def read_nifti(path, kind: str = "image") -> Volume:
    """Load a ``.nii`` file; header bytes are kept in ``meta['nifti_header']``."""
    path = Path(path)
    if path.suffix == ".gz":
        raise UnsupportedFormatError(f"{path}: compressed NIfTI is not supported")
    raw = path.read_bytes()
    h = parse_header(raw[:HEADER_SIZE])
    if h["magic"] != b"n+1\x00":
        raise UnsupportedFormatError(f"{path}: magic is {h['magic']!r}, expected b'n+1\\x00'")
    dim = h["dim"]
    if not 3 <= dim[0] <= 7 or any(n != 1 for n in dim[4 : dim[0] + 1]):
        raise UnsupportedFormatError(f"{path}: dim {dim} is not a single 3-D volume")
    if h["datatype"] not in _DTYPES:
        raise UnsupportedFormatError(f"{path}: datatype code {h['datatype']} not in {sorted(_DTYPES)}")
    dtype = np.dtype(h["endian"] + _DTYPES[h["datatype"]])
    shape = tuple(int(n) for n in dim[1:4])
    offset = int(h["vox_offset"])
    if offset < HEADER_SIZE:
        raise UnsupportedFormatError(f"{path}: vox_offset {h['vox_offset']} lies inside the header")
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise UnsupportedFormatError(f"{path}: payload truncated (need {nbytes} bytes at offset {offset})")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="), copy=True)

    slope, inter = h["scl_slope"], h["scl_inter"]
    if kind == "image" and (slope not in (0.0, 1.0) or inter != 0.0):
        data = data.astype(np.float32) * (slope if slope != 0 else 1.0) + inter

    if h["sform_code"] > 0:
        affine = h["srow"][:, :3]
        spacing = np.linalg.norm(affine, axis=0)
        direction_ras = affine / spacing
    else:
        b, c, d = h["quatern"][:3]
        direction_ras = _quaternion_matrix(b, c, d, h["pixdim"][0])
        spacing = np.abs(np.array(h["pixdim"][1:4], dtype=np.float64))
    if np.any(spacing <= 0):
        raise UnsupportedFormatError(f"{path}: pixdim/srow gives non-positive spacing {spacing}")
    return Volume(
        data=data,
        spacing=tuple(spacing),
        direction=_RAS_TO_LPS @ direction_ras,
        kind=kind,
        meta={"nifti_header": raw[:HEADER_SIZE]},
    )


def write_nifti(path, volume: Volume, template: bytes | None = None) -> Path:
    """Write ``volume`` as a little-endian ``.nii``.

    With a ``template`` header (e.g. from the input image) every field except
    dimensions, datatype and intensity scaling is copied from it; otherwise an
    sform is built from spacing and direction.
    """
    path = Path(path)
    data = volume.data
    if data.dtype not in _CODES:
        data = data.astype(np.uint8 if volume.kind == "mask" else np.float32)
    hdr = bytearray(template[:HEADER_SIZE]) if template is not None else bytearray(HEADER_SIZE)
    if template is not None and _endian(bytes(hdr)) == ">":
        hdr = bytearray(HEADER_SIZE)
        template = None
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _CODES[data.dtype])
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    if template is None:
        affine = (_RAS_TO_LPS @ volume.direction) * np.asarray(volume.spacing)
        struct.pack_into("<8f", hdr, 76, 1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0)
        struct.pack_into("<hh", hdr, 252, 0, 1)
        srow = np.concatenate([affine, np.zeros((3, 1))], axis=1)
        struct.pack_into("<12f", hdr, 280, *srow.reshape(-1))
    hdr[344:348] = b"n+1\x00"
    payload = np.asarray(data, dtype=data.dtype.newbyteorder("<")).tobytes(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload)
    return path
