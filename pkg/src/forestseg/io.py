"""Readers and writers for labeled point clouds, predictions and mask sidecars.

Supported cloud formats:

* ``xyz_text``: whitespace-separated ``x y z label`` per line (a missing label
  column means unlabeled).
* ``ply``: ascii or binary little-endian, vertex properties ``x``, ``y``, ``z`` and
  ``instance_id``.
* ``packed_binary``: ``FSEG`` magic, u16 version, u64 count, then columnar
  float32 ``x``, ``y``, ``z`` and int32 ``label``, all little-endian.
"""

from __future__ import annotations

__all__ = [
    "CloudFormatError",
    "FORMATS",
    "guess_format",
    "load_cloud",
    "save_cloud",
    "load_predictions",
    "save_predictions",
    "load_mask",
    "save_mask",
]

import logging
import os
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from .cloud import UNLABELED, LabeledCloud

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

FORMATS = ("ply", "xyz_text", "packed_binary")

_CLOUD_MAGIC = b"FSEG"
_PRED_MAGIC = b"FPRD"
_MASK_MAGIC = b"FMSK"
_VERSION = 1
_HEADER = struct.Struct("<4sHQ")

_EXTENSIONS = {
    ".ply": "ply",
    ".xyz": "xyz_text",
    ".txt": "xyz_text",
    ".fseg": "packed_binary",
    ".bin": "packed_binary",
}

_PLY_TYPES = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "i2",
    "int16": "i2",
    "ushort": "u2",
    "uint16": "u2",
    "int": "i4",
    "int32": "i4",
    "uint": "u4",
    "uint32": "u4",
    "float": "f4",
    "float32": "f4",
    "double": "f8",
    "float64": "f8",
}


class CloudFormatError(ValueError):
    """Raised when a file does not match its declared format.

    Args:
        message: Description of the problem.
        path: File being parsed.
        line: 1-based line number for text content, if applicable.
        offset: Byte offset for binary content, if applicable.
    """

    def __init__(self, message: str, path: PathLike = "", line: Optional[int] = None, offset: Optional[int] = None):
        location = ""
        if line is not None:
            location = f" (line {line})"
        elif offset is not None:
            location = f" (byte {offset})"
        super().__init__(f"{path}{location}: {message}")
        self.path = path
        self.line = line
        self.offset = offset


def guess_format(path: PathLike) -> str:
    """Infer the cloud format from a file extension."""
    suffix = Path(path).suffix.lower()
    if suffix not in _EXTENSIONS:
        raise ValueError(f"cannot infer point-cloud format from extension {suffix!r}; pass it explicitly")
    return _EXTENSIONS[suffix]


def _check_finite(points: np.ndarray, path: PathLike, line_offset: int = 0) -> None:
    finite = np.isfinite(points).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise CloudFormatError(f"non-finite coordinate in point {bad}", path, line=bad + 1 + line_offset)


def load_cloud(path: PathLike, format: Optional[str] = None) -> LabeledCloud:
    """Read a labeled cloud.

    Args:
        path: Input file.
        format: One of :data:`FORMATS`; inferred from the extension if omitted.

    Raises:
        CloudFormatError: Malformed content or non-finite coordinates.
    """
    format = format or guess_format(path)
    if format == "xyz_text":
        points, labels = _read_xyz(path)
    elif format == "ply":
        points, labels = _read_ply(path)
    elif format == "packed_binary":
        points, labels = _read_packed(path)
    else:
        raise ValueError(f"unknown format {format!r}")
    return LabeledCloud(points, labels)


def save_cloud(cloud: LabeledCloud, path: PathLike, format: Optional[str] = None) -> None:
    """Write a labeled cloud; ``load_cloud`` reads it back losslessly up to format precision."""
    format = format or guess_format(path)
    if format == "xyz_text":
        _write_xyz(cloud, path)
    elif format == "ply":
        _write_ply(cloud, path)
    elif format == "packed_binary":
        _write_packed(cloud, path)
    else:
        raise ValueError(f"unknown format {format!r}")


# xyz text


def _parse_xyz_line(text: str, line: int, path: PathLike) -> Tuple[float, float, float, int]:
    fields = text.split()
    if len(fields) not in (3, 4):
        raise CloudFormatError(f"expected 3 or 4 columns, got {len(fields)}", path, line=line)
    try:
        x, y, z = (float(f) for f in fields[:3])
    except ValueError as err:
        raise CloudFormatError(str(err), path, line=line) from None
    label = UNLABELED
    if len(fields) == 4:
        try:
            label = int(fields[3])
        except ValueError:
            raise CloudFormatError(f"label {fields[3]!r} is not an integer", path, line=line) from None
    if not all(np.isfinite((x, y, z))):
        raise CloudFormatError("non-finite coordinate", path, line=line)
    return x, y, z, label


def _read_xyz(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    rows = []
    with open(path, "r", encoding="ascii") as handle:
        for line_no, text in enumerate(handle, start=1):
            if not text.strip() or text.lstrip().startswith("#"):
                continue
            rows.append(_parse_xyz_line(text, line_no, path))
    if not rows:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int32)
    points = np.array([r[:3] for r in rows], dtype=np.float64)
    labels = np.array([r[3] for r in rows], dtype=np.int64)
    if (labels < -2).any() or (labels > np.iinfo(np.int32).max).any():
        bad = int(np.flatnonzero((labels < -2) | (labels > np.iinfo(np.int32).max))[0])
        raise CloudFormatError(f"invalid label code {labels[bad]}", path, line=bad + 1)
    return points, labels.astype(np.int32)


def _write_xyz(cloud: LabeledCloud, path: PathLike) -> None:
    with open(path, "w", encoding="ascii") as handle:
        for (x, y, z), label in zip(cloud.points.tolist(), cloud.labels.tolist()):
            handle.write(f"{x!r} {y!r} {z!r} {label}\n")


# ply


def _read_ply_header(handle, path: PathLike):
    magic = handle.readline()
    if magic.strip() != b"ply":
        raise CloudFormatError("missing 'ply' magic", path, line=1)
    encoding = None
    count = None
    properties = []
    in_vertex = False
    line_no = 1
    while True:
        raw = handle.readline()
        line_no += 1
        if not raw:
            raise CloudFormatError("unexpected end of header", path, line=line_no)
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise CloudFormatError(f"unsupported ply format {' '.join(tokens[1:])!r}", path, line=line_no)
            encoding = tokens[1]
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
            elif count is None:
                raise CloudFormatError("vertex element must come first", path, line=line_no)
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise CloudFormatError("list properties on vertices are not supported", path, line=line_no)
            if tokens[1] not in _PLY_TYPES:
                raise CloudFormatError(f"unknown property type {tokens[1]!r}", path, line=line_no)
            properties.append((tokens[2], _PLY_TYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    if encoding is None or count is None:
        raise CloudFormatError("header lacks format or vertex element", path, line=line_no)
    names = [name for name, _ in properties]
    for required in ("x", "y", "z"):
        if required not in names:
            raise CloudFormatError(f"missing required vertex property {required!r}", path, line=line_no)
    return encoding, count, properties, line_no


def _read_ply(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as handle:
        encoding, count, properties, header_lines = _read_ply_header(handle, path)
        names = [name for name, _ in properties]
        if encoding == "binary_little_endian":
            dtype = np.dtype([(name, "<" + code) for name, code in properties])
            start = handle.tell()
            payload = handle.read(dtype.itemsize * count)
            if len(payload) < dtype.itemsize * count:
                raise CloudFormatError(
                    f"truncated vertex data: expected {dtype.itemsize * count} bytes, got {len(payload)}",
                    path,
                    offset=start + len(payload),
                )
            data = np.frombuffer(payload, dtype=dtype, count=count)
            columns = {name: data[name] for name in names}
        else:
            values = np.empty((count, len(names)), dtype=np.float64)
            for i in range(count):
                raw = handle.readline()
                tokens = raw.split()
                if len(tokens) != len(names):
                    raise CloudFormatError(
                        f"expected {len(names)} values, got {len(tokens)}", path, line=header_lines + i + 1
                    )
                try:
                    values[i] = [float(t) for t in tokens]
                except ValueError as err:
                    raise CloudFormatError(str(err), path, line=header_lines + i + 1) from None
            columns = {name: values[:, j] for j, name in enumerate(names)}
    points = np.column_stack([columns["x"], columns["y"], columns["z"]]).astype(np.float64)
    _check_finite(points, path, line_offset=header_lines if encoding == "ascii" else 0)
    if "instance_id" in columns:
        labels = np.asarray(columns["instance_id"]).astype(np.int32)
    else:
        labels = np.full(count, UNLABELED, dtype=np.int32)
    return points.reshape(-1, 3), labels


def _write_ply(cloud: LabeledCloud, path: PathLike) -> None:
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        "property int instance_id\n"
        "end_header\n"
    )
    data = np.empty(len(cloud), dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("instance_id", "<i4")])
    data["x"], data["y"], data["z"] = cloud.points.T
    data["instance_id"] = cloud.labels
    with open(path, "wb") as handle:
        handle.write(header.encode("ascii"))
        handle.write(data.tobytes())


# packed binary


def _read_header(payload: bytes, magic: bytes, path: PathLike) -> Tuple[int, int]:
    if len(payload) < _HEADER.size:
        raise CloudFormatError(f"file shorter than the {_HEADER.size}-byte header", path, offset=len(payload))
    found, version, count = _HEADER.unpack_from(payload)
    if found != magic:
        raise CloudFormatError(f"bad magic {found!r}, expected {magic!r}", path, offset=0)
    if version != _VERSION:
        raise CloudFormatError(f"unsupported version {version}", path, offset=4)
    return version, count


def _read_columns(payload: bytes, count: int, dtypes: Tuple[str, ...], path: PathLike) -> list:
    expected = _HEADER.size + count * sum(np.dtype(d).itemsize for d in dtypes)
    if len(payload) != expected:
        raise CloudFormatError(
            f"payload size mismatch: expected {expected} bytes for {count} points, got {len(payload)}",
            path,
            offset=min(len(payload), expected),
        )
    columns = []
    offset = _HEADER.size
    for dtype in dtypes:
        columns.append(np.frombuffer(payload, dtype=dtype, count=count, offset=offset).copy())
        offset += count * np.dtype(dtype).itemsize
    return columns


def _read_packed(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    payload = Path(path).read_bytes()
    if not payload:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int32)
    _, count = _read_header(payload, _CLOUD_MAGIC, path)
    x, y, z, labels = _read_columns(payload, count, ("<f4", "<f4", "<f4", "<i4"), path)
    points = np.column_stack([x, y, z]).astype(np.float64).reshape(-1, 3)
    _check_finite(points, path)
    return points, labels.astype(np.int32)


def _write_packed(cloud: LabeledCloud, path: PathLike) -> None:
    with open(path, "wb") as handle:
        handle.write(_HEADER.pack(_CLOUD_MAGIC, _VERSION, len(cloud)))
        for axis in range(3):
            handle.write(cloud.points[:, axis].astype("<f4").tobytes())
        handle.write(cloud.labels.astype("<i4").tobytes())


# predictions


def save_predictions(path: PathLike, semantic_score: npt.ArrayLike, offset: npt.ArrayLike) -> None:
    """Write per-point semantic scores and offset vectors in the ``FPRD`` columnar format."""
    score = np.asarray(semantic_score, dtype=np.float64).reshape(-1)
    offset = np.asarray(offset, dtype=np.float64).reshape(-1, 3)
    if len(score) != len(offset):
        raise ValueError(f"score count {len(score)} does not match offset count {len(offset)}")
    with open(path, "wb") as handle:
        handle.write(_HEADER.pack(_PRED_MAGIC, _VERSION, len(score)))
        handle.write(score.astype("<f4").tobytes())
        for axis in range(3):
            handle.write(offset[:, axis].astype("<f4").tobytes())


def load_predictions(path: PathLike, cloud: Optional[LabeledCloud] = None):
    """Read a prediction file, optionally checking alignment with ``cloud``.

    Returns:
        :class:`forestseg.segmentation.PredictionSet`.
    """
    from .segmentation import PredictionSet

    payload = Path(path).read_bytes()
    _, count = _read_header(payload, _PRED_MAGIC, path)
    if cloud is not None and count != len(cloud):
        raise ValueError(f"prediction file {path} holds {count} points but the cloud has {len(cloud)}")
    score, ox, oy, oz = _read_columns(payload, count, ("<f4",) * 4, path)
    return PredictionSet(score.astype(np.float64), np.column_stack([ox, oy, oz]).astype(np.float64))


# mask sidecar

_MASK_HEADER = struct.Struct("<4sQ")


def save_mask(path: PathLike, flags: npt.ArrayLike) -> None:
    """Write a per-point flag byte array with the ``FMSK`` header."""
    flags = np.asarray(flags, dtype=np.uint8).reshape(-1)
    with open(path, "wb") as handle:
        handle.write(_MASK_HEADER.pack(_MASK_MAGIC, len(flags)))
        handle.write(flags.tobytes())


def load_mask(path: PathLike) -> npt.NDArray[np.uint8]:
    payload = Path(path).read_bytes()
    if len(payload) < _MASK_HEADER.size:
        raise CloudFormatError("file shorter than the mask header", path, offset=len(payload))
    magic, count = _MASK_HEADER.unpack_from(payload)
    if magic != _MASK_MAGIC:
        raise CloudFormatError(f"bad magic {magic!r}, expected {_MASK_MAGIC!r}", path, offset=0)
    if len(payload) != _MASK_HEADER.size + count:
        raise CloudFormatError(
            f"expected {count} flag bytes, got {len(payload) - _MASK_HEADER.size}", path, offset=_MASK_HEADER.size
        )
    return np.frombuffer(payload, dtype=np.uint8, offset=_MASK_HEADER.size).copy()
