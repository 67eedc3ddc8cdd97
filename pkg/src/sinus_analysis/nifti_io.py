"""Single-file NIfTI-1 reader/writer (``.nii`` / ``.nii.gz``).

Only 3D volumes of uint8, int16, int32, float32 or float64 are handled.
Voxel arrays are indexed ``[i, j, k]`` in storage order (``i`` fastest on
disk).  Orientation is kept as a signed axis permutation: ``orientation[i]``
is ``+n`` or ``-n`` where ``n`` in 1..3 names the world axis (1 = Right,
2 = Anterior, 3 = Superior) that storage axis ``i`` increases along.

Affine preference is qform, then sform, then identity.  Oblique affines are
rejected, except that columns within 1e-3 of a signed unit vector are
accepted as axis aligned.  ``scl_slope == 0`` is read as slope 1.
"""

from __future__ import annotations

import gzip
import io
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "NiftiError",
    "LabelSchemaError",
    "VolumeImage",
    "LabelMap",
    "read_nifti",
    "read_labelmap",
    "write_nifti",
    "orient_to_canonical",
    "load",
    "load_labelmap",
    "save",
]

HEADER_SIZE = 348
AXIS_TOLERANCE = 1e-3
CANONICAL = (1, 2, 3)
MAX_LABEL = 16

# NIfTI datatype code -> numpy kind (byte order applied separately)
DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
}
_CODES = {(dt.kind, dt.itemsize): code for code, dt in DATATYPES.items()}

# (name, struct format) in header order; offsets follow from the formats.
_HEADER_FIELDS = [
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "c"),
    ("dim_info", "B"),
    ("dim", "8h"),
    ("intent_p1", "f"),
    ("intent_p2", "f"),
    ("intent_p3", "f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "B"),
    ("xyzt_units", "B"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern_b", "f"),
    ("quatern_c", "f"),
    ("quatern_d", "f"),
    ("qoffset_x", "f"),
    ("qoffset_y", "f"),
    ("qoffset_z", "f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
]
_FORMAT = "".join(f for _, f in _HEADER_FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI input."""


class LabelSchemaError(NiftiError):
    """A label map holds a value outside 0..16."""


Source = Union[str, os.PathLike, bytes, BinaryIO]


# ------------------------------------------------------------------- types


def _check_orientation(orientation) -> tuple[int, int, int]:
    orientation = tuple(int(o) for o in orientation)
    if len(orientation) != 3 or sorted(abs(o) for o in orientation) != [1, 2, 3]:
        raise ValueError(f"orientation {orientation} is not a signed permutation of (1, 2, 3)")
    return orientation


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class _Grid:
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: tuple[int, int, int] = CANONICAL
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    extensions: bytes = b""

    def _validate_grid(self, arr: np.ndarray) -> None:
        if arr.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all dims must be >= 1, got {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive lengths, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "orientation", _check_orientation(self.orientation))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    @property
    def is_canonical(self) -> bool:
        return self.orientation == CANONICAL

    def affine(self) -> np.ndarray:
        """Voxel index to world (mm) transform implied by the grid."""
        aff = np.eye(4)
        aff[:3, :3] = 0.0
        for i, o in enumerate(self.orientation):
            aff[abs(o) - 1, i] = np.sign(o) * self.spacing[i]
        aff[:3, 3] = self.origin
        return aff

    def same_grid(self, other: "_Grid") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.orientation == other.orientation
        )


@dataclass(frozen=True, eq=False)
class VolumeImage(_Grid):
    """Scalar MRI volume.  ``voxels`` already has intensity scaling applied."""

    voxels: np.ndarray = field(default=None, repr=False)
    intensity_scale: tuple[float, float] = (1.0, 0.0)
    raw_dtype: np.dtype | None = None

    def __post_init__(self):
        if self.voxels is None:
            raise ValueError("voxels are required")
        arr = _frozen(self.voxels)
        self._validate_grid(arr)
        object.__setattr__(self, "voxels", arr)
        slope, inter = (float(v) for v in self.intensity_scale)
        object.__setattr__(self, "intensity_scale", (slope, inter))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def data(self) -> np.ndarray:
        return self.voxels


@dataclass(frozen=True, eq=False)
class LabelMap(_Grid):
    """Integer label volume with every value in 0..16."""

    labels: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.labels is None:
            raise ValueError("labels are required")
        arr = np.asarray(self.labels)
        if arr.dtype.kind not in "iu":
            raise LabelSchemaError(f"label maps need integer data, got dtype {arr.dtype}")
        arr = _frozen(arr)
        self._validate_grid(arr)
        _validate_labels(arr)
        object.__setattr__(self, "labels", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    @property
    def data(self) -> np.ndarray:
        return self.labels

    def present_codes(self) -> set[int]:
        return {int(v) for v in np.unique(self.labels) if v != 0}


def _validate_labels(arr: np.ndarray) -> None:
    bad = (arr < 0) | (arr > MAX_LABEL)
    if bad.any():
        values = sorted({int(v) for v in np.unique(arr[bad])})
        first = tuple(int(i) for i in np.argwhere(bad)[0])
        raise LabelSchemaError(
            f"label value(s) {values} outside schema 0..{MAX_LABEL}; "
            f"first offending voxel {first} holds {int(arr[first])}"
        )


# ----------------------------------------------------------------- reading


def _read_bytes(source: Source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        raw = bytes(source)
    elif isinstance(source, (str, os.PathLike)):
        raw = Path(source).read_bytes()
    else:
        raw = source.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _unpack_header(raw: bytes) -> tuple[dict, str]:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    for endian in "<>":
        (size,) = struct.unpack(endian + "i", raw[:4])
        if size == HEADER_SIZE:
            break
    else:
        if struct.unpack("<i", raw[:4])[0] == 540 or struct.unpack(">i", raw[:4])[0] == 540:
            raise NiftiError("NIfTI-2 files are not supported")
        raise NiftiError("bad sizeof_hdr: not a NIfTI-1 file")
    values = struct.unpack(endian + _FORMAT, raw[:HEADER_SIZE])
    hdr = {}
    pos = 0
    for name, fmt in _HEADER_FIELDS:
        count = int(fmt[:-1]) if len(fmt) > 1 and fmt[-1] != "s" else 1
        hdr[name] = tuple(values[pos : pos + count]) if count > 1 else values[pos]
        pos += count
    magic = hdr["magic"]
    if magic == b"ni1\x00":
        raise NiftiError("bad magic: dual-file (.hdr/.img) NIfTI is not supported")
    if magic != b"n+1\x00":
        raise NiftiError(f"bad magic {magic!r}: expected b'n+1\\x00'")
    return hdr, endian


def _quaternion_matrix(b: float, c: float, d: float) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    if a2 < 1e-7:
        # 180 degree rotation; renormalise (b, c, d)
        norm = np.sqrt(b * b + c * c + d * d)
        a, b, c, d = 0.0, b / norm, c / norm, d / norm
    else:
        a = np.sqrt(a2)
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )


def _header_affine(hdr: dict) -> tuple[np.ndarray, np.ndarray, str]:
    """Direction matrix (unit columns) and the origin, with its source."""
    if hdr["qform_code"] > 0:
        rot = _quaternion_matrix(hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"])
        qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
        rot[:, 2] *= qfac
        origin = np.array([hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]])
        return rot, origin, "qform"
    if hdr["sform_code"] > 0:
        m = np.array([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]], dtype=float)
        cols = m[:, :3]
        norms = np.linalg.norm(cols, axis=0)
        if np.any(norms == 0):
            raise NiftiError("degenerate sform (zero column)")
        return cols / norms, m[:, 3].copy(), "sform"
    return np.eye(3), np.zeros(3), "identity"


def orientation_from_matrix(rot: np.ndarray, tol: float = AXIS_TOLERANCE) -> tuple[int, int, int]:
    """Signed permutation closest to ``rot``; raises if any column is oblique."""
    result = []
    for i in range(3):
        col = rot[:, i]
        axis = int(np.argmax(np.abs(col)))
        target = np.zeros(3)
        target[axis] = np.sign(col[axis])
        if np.max(np.abs(col - target)) > tol:
            raise NiftiError(
                f"non-axis-aligned affine: column {i} = {np.round(col, 6).tolist()} "
                f"deviates from {target.tolist()} by more than {tol}"
            )
        result.append(int(target[axis]) * (axis + 1))
    try:
        return _check_orientation(result)
    except ValueError:
        raise NiftiError(f"affine columns do not form an axis permutation: {result}") from None


def read_nifti(source: Source) -> VolumeImage:
    """Parse a NIfTI-1 volume from a path, bytes or binary stream."""
    raw = _read_bytes(source)
    hdr, endian = _unpack_header(raw)

    dim = hdr["dim"]
    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise NiftiError(f"invalid dim[0] = {ndim}")
    shape = list(dim[1 : ndim + 1])
    # trailing singleton dims collapse, e.g. (x, y, z, 1)
    while len(shape) > 3 and shape[-1] == 1:
        shape.pop()
    if len(shape) != 3:
        raise NiftiError(f"only 3D volumes are supported, got dim {tuple(dim[: ndim + 1])}")
    if min(shape) < 1:
        raise NiftiError(f"non-positive dimension in {shape}")

    code = hdr["datatype"]
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}")
    dtype = DATATYPES[code].newbyteorder(endian)

    vox_offset = int(hdr["vox_offset"])
    if vox_offset < HEADER_SIZE:
        raise NiftiError(f"vox_offset {hdr['vox_offset']} inside the header")
    extensions = b""
    if len(raw) >= HEADER_SIZE + 4 and raw[HEADER_SIZE] != 0 and vox_offset > HEADER_SIZE + 4:
        extensions = raw[HEADER_SIZE + 4 : vox_offset]

    n = shape[0] * shape[1] * shape[2]
    nbytes = n * dtype.itemsize
    payload = raw[vox_offset : vox_offset + nbytes]
    if len(payload) < nbytes:
        raise NiftiError(f"truncated data: expected {nbytes} bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    data = data.astype(dtype.newbyteorder("="), copy=True)

    pixdim = hdr["pixdim"]
    spacing = tuple(float(p) for p in pixdim[1:4])
    if not all(s > 0 for s in spacing):
        raise NiftiError(f"non-positive voxel spacing {spacing}")

    rot, origin, source_name = _header_affine(hdr)
    orientation = orientation_from_matrix(rot)
    logger.debug("orientation %s from %s", orientation, source_name)

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope == 0 or not np.isfinite(slope):
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    raw_dtype = data.dtype
    if (slope, inter) != (1.0, 0.0):
        data = data.astype(np.float64) * slope + inter

    return VolumeImage(
        voxels=data,
        spacing=spacing,
        orientation=orientation,
        origin=tuple(float(o) for o in origin),
        extensions=extensions,
        intensity_scale=(slope, inter),
        raw_dtype=raw_dtype,
    )


def read_labelmap(source: Source, remap: dict[int, int] | None = None) -> LabelMap:
    """Parse a label volume and validate it against the 16-label schema.

    ``remap`` (external code -> schema code) is applied before validation.
    """
    img = read_nifti(source)
    data = img.voxels
    if data.dtype.kind == "f":
        if not np.all(np.isfinite(data)) or not np.all(data == np.round(data)):
            raise LabelSchemaError("label map holds non-integer values")
        data = data.astype(np.int32)
    elif data.dtype.kind not in "iu":
        raise LabelSchemaError(f"label maps need integer data, got {data.dtype}")
    if remap:
        from .schema import apply_remap

        data = apply_remap(np.asarray(data), remap)
    return LabelMap(
        labels=data,
        spacing=img.spacing,
        orientation=img.orientation,
        origin=img.origin,
        extensions=img.extensions,
    )


# ----------------------------------------------------------------- writing


def _matrix_to_quaternion(rot: np.ndarray) -> tuple[float, float, float, float]:
    """Return (b, c, d, qfac) for a proper-or-improper orthonormal matrix."""
    rot = rot.astype(float).copy()
    qfac = 1.0
    if np.linalg.det(rot) < 0:
        rot[:, 2] *= -1
        qfac = -1.0
    r11, r12, r13 = rot[0]
    r21, r22, r23 = rot[1]
    r31, r32, r33 = rot[2]
    a = r11 + r22 + r33 + 1.0
    if a > 0.5:
        a = 0.5 * np.sqrt(a)
        b = 0.25 * (r32 - r23) / a
        c = 0.25 * (r13 - r31) / a
        d = 0.25 * (r21 - r12) / a
    else:
        xd = 1.0 + r11 - (r22 + r33)
        yd = 1.0 + r22 - (r11 + r33)
        zd = 1.0 + r33 - (r11 + r22)
        if xd > 1.0:
            b = 0.5 * np.sqrt(xd)
            c = 0.25 * (r12 + r21) / b
            d = 0.25 * (r13 + r31) / b
            a = 0.25 * (r32 - r23) / b
        elif yd > 1.0:
            c = 0.5 * np.sqrt(yd)
            b = 0.25 * (r12 + r21) / c
            d = 0.25 * (r23 + r32) / c
            a = 0.25 * (r13 - r31) / c
        else:
            d = 0.5 * np.sqrt(zd)
            b = 0.25 * (r13 + r31) / d
            c = 0.25 * (r23 + r32) / d
            a = 0.25 * (r21 - r12) / d
        if a < 0:
            b, c, d = -b, -c, -d
    return float(b), float(c), float(d), qfac


def _pack_extensions(blob: bytes) -> tuple[bytes, int]:
    if not blob:
        return b"\x00\x00\x00\x00", HEADER_SIZE + 4
    pad = (-len(blob)) % 16
    body = blob + b"\x00" * pad
    return b"\x01\x00\x00\x00" + body, HEADER_SIZE + 4 + len(body)


def encode_nifti(v: VolumeImage | LabelMap, endian: str = "<") -> bytes:
    """Serialise to uncompressed ``.nii`` bytes."""
    if endian not in "<>":
        raise ValueError("endian must be '<' or '>'")
    if isinstance(v, LabelMap):
        data = np.asarray(v.labels)
        slope, inter = 1.0, 0.0
    else:
        data = np.asarray(v.voxels)
        slope, inter = v.intensity_scale
        if (slope, inter) != (1.0, 0.0):
            raw_dtype = v.raw_dtype or np.dtype("f4")
            unscaled = (data.astype(np.float64) - inter) / slope
            if np.dtype(raw_dtype).kind in "iu":
                unscaled = np.round(unscaled)
            data = unscaled.astype(raw_dtype)

    key = (data.dtype.kind, data.dtype.itemsize)
    if key not in _CODES:
        # widen/narrow silently only where it is lossless
        if data.dtype.kind == "b":
            data = data.astype(np.uint8)
        elif data.dtype.kind in "iu" and data.size and data.min() >= -(2**31) and data.max() < 2**31:
            data = data.astype(np.int32)
        else:
            raise NiftiError(f"cannot store dtype {data.dtype} in a supported NIfTI datatype")
        key = (data.dtype.kind, data.dtype.itemsize)
    code = _CODES[key]

    ext_bytes, vox_offset = _pack_extensions(v.extensions)

    rot = v.affine()[:3, :3] / np.array(v.spacing)
    qb, qc, qd, qfac = _matrix_to_quaternion(rot)
    aff = v.affine()
    dims = data.shape
    values = {
        "sizeof_hdr": HEADER_SIZE,
        "data_type": b"",
        "db_name": b"",
        "extents": 0,
        "session_error": 0,
        "regular": b"r",
        "dim_info": 0,
        "dim": (3, dims[0], dims[1], dims[2], 1, 1, 1, 1),
        "intent_p1": 0.0,
        "intent_p2": 0.0,
        "intent_p3": 0.0,
        "intent_code": 0,
        "datatype": code,
        "bitpix": data.dtype.itemsize * 8,
        "slice_start": 0,
        "pixdim": (qfac, *v.spacing, 1.0, 1.0, 1.0, 1.0),
        "vox_offset": float(vox_offset),
        "scl_slope": slope,
        "scl_inter": inter,
        "slice_end": 0,
        "slice_code": 0,
        "xyzt_units": 2,  # mm
        "cal_max": 0.0,
        "cal_min": 0.0,
        "slice_duration": 0.0,
        "toffset": 0.0,
        "glmax": 0,
        "glmin": 0,
        "descrip": b"sinus_analysis",
        "aux_file": b"",
        "qform_code": 1,
        "sform_code": 1,
        "quatern_b": qb,
        "quatern_c": qc,
        "quatern_d": qd,
        "qoffset_x": v.origin[0],
        "qoffset_y": v.origin[1],
        "qoffset_z": v.origin[2],
        "srow_x": tuple(aff[0]),
        "srow_y": tuple(aff[1]),
        "srow_z": tuple(aff[2]),
        "intent_name": b"",
        "magic": b"n+1\x00",
    }
    flat = []
    for name, fmt in _HEADER_FIELDS:
        val = values[name]
        flat.extend(val if isinstance(val, tuple) else (val,))
    header = struct.pack(endian + _FORMAT, *flat)
    payload = data.astype(data.dtype.newbyteorder(endian), copy=False).tobytes(order="F")
    return header + ext_bytes + payload


def write_nifti(
    v: VolumeImage | LabelMap,
    sink: str | os.PathLike | BinaryIO,
    *,
    compress: bool | None = None,
    endian: str = "<",
) -> None:
    """Write ``v`` as single-file NIfTI-1.

    For paths, gzip is used when the name ends in ``.gz`` unless ``compress``
    says otherwise.  Path sinks are written atomically via a temp file.
    """
    blob = encode_nifti(v, endian=endian)
    if isinstance(sink, (str, os.PathLike)):
        path = Path(sink)
        if compress is None:
            compress = path.name.endswith(".gz")
        if compress:
            blob = gzip.compress(blob, compresslevel=6, mtime=0)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
        try:
            tmp.write_bytes(blob)
            os.replace(tmp, path)
        finally:
            if tmp.exists():
                tmp.unlink()
    else:
        if compress:
            blob = gzip.compress(blob, compresslevel=6, mtime=0)
        sink.write(blob)


# ------------------------------------------------------------- orientation


def orient_to_canonical(v):
    """Reorder/flip storage axes so that the orientation becomes (+R, +A, +S)."""
    if v.is_canonical:
        return v
    arr = np.asarray(v.data)
    aff = v.affine()
    # storage axis that runs along each world axis
    src_axes = [0, 0, 0]
    for i, o in enumerate(v.orientation):
        src_axes[abs(o) - 1] = i
    out = np.transpose(arr, src_axes)
    corner = [0, 0, 0]
    for world, i in enumerate(src_axes):
        if v.orientation[i] < 0:
            out = np.flip(out, axis=world)
            corner[i] = arr.shape[i] - 1
    origin = tuple(float(x) for x in (aff @ np.array([*corner, 1.0]))[:3])
    spacing = tuple(v.spacing[i] for i in src_axes)
    out = np.ascontiguousarray(out)
    if isinstance(v, LabelMap):
        return replace(v, labels=out, spacing=spacing, orientation=CANONICAL, origin=origin)
    return replace(v, voxels=out, spacing=spacing, orientation=CANONICAL, origin=origin)


# ------------------------------------------------------------ convenience


def load(path: str | os.PathLike, canonical: bool = True) -> VolumeImage:
    img = read_nifti(path)
    return orient_to_canonical(img) if canonical else img


def load_labelmap(
    path: str | os.PathLike, canonical: bool = True, remap: dict[int, int] | None = None
) -> LabelMap:
    lm = read_labelmap(path, remap=remap)
    return orient_to_canonical(lm) if canonical else lm


def save(v: VolumeImage | LabelMap, path: str | os.PathLike) -> None:
    write_nifti(v, path)


def data_section(blob: bytes) -> bytes:
    """Bytes after ``vox_offset`` of an (optionally gzipped) NIfTI blob."""
    raw = _read_bytes(io.BytesIO(blob))
    hdr, _ = _unpack_header(raw)
    return raw[int(hdr["vox_offset"]) :]
