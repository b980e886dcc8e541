"""``VFV1`` volume files, theta text matrices and run manifests.

``VFV1`` layout (little-endian, 80-byte header)::

    offset  size  field
    0       4     magic b"VFV1"
    4       4     u32 dtype: 0 = u8 labels, 1 = f32 scalars, 2 = f32 multi-channel
    8       12    u32 dims (nx, ny, nz)
    20      4     u32 channels (1 for dtypes 0 and 1)
    24      4     u32 num_labels (labels and probability maps; 0 otherwise)
    28      24    f64 spacing (mm)
    52      24    f64 origin (mm)
    76      4     u32 data offset (80)

The payload starts at the data offset and stores channels fastest, then
x, then y, then z. A multi-channel file whose ``num_labels`` equals
``channels - 1`` is read back as a :class:`ProbVolume`; any other
multi-channel file (for example stacked similarity maps) as a
:class:`ChannelVolume`.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .volume import LabelVolume, ProbVolume, ScalarVolume, _check_dims, _Grid, _triple

MAGIC = b"VFV1"
HEADER = struct.Struct("<4sI3III3d3dI")
HEADER_SIZE = HEADER.size
DTYPE_LABELS, DTYPE_SCALAR, DTYPE_CHANNELS = 0, 1, 2
_ITEMSIZE = {DTYPE_LABELS: 1, DTYPE_SCALAR: 4, DTYPE_CHANNELS: 4}
_NUMPY = {DTYPE_LABELS: np.dtype("<u1"), DTYPE_SCALAR: np.dtype("<f4"), DTYPE_CHANNELS: np.dtype("<f4")}

assert HEADER_SIZE == 80


@dataclass(frozen=True, eq=False, repr=False)
class ChannelVolume(_Grid):
    """Generic multi-channel float grid ``(nx, ny, nz, C)``, e.g. per-view similarity maps."""

    data: np.ndarray = None

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        data = np.asarray(data)
        if data.ndim != 4:
            raise FormatError(f"channel volume must be 4-D, got shape {data.shape}")
        _check_dims(data.shape)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _triple(spacing, "spacing", positive=True))
        object.__setattr__(self, "origin", _triple(origin, "origin"))

    def _array(self):
        return self.data

    @property
    def channels(self):
        return self.data.shape[3]


@dataclass(frozen=True)
class VolumeHeader:
    dtype: int
    dims: tuple
    channels: int
    num_labels: int
    spacing: tuple
    origin: tuple
    data_offset: int = HEADER_SIZE

    @property
    def payload_size(self):
        return int(np.prod(self.dims)) * self.channels * _ITEMSIZE[self.dtype]

    def pack(self):
        return HEADER.pack(MAGIC, self.dtype, *self.dims, self.channels, self.num_labels,
                           *self.spacing, *self.origin, self.data_offset)


def parse_header(buf):
    """Decode and validate the fixed header at the start of ``buf``."""
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"file too short for a VFV1 header: {len(buf)} < {HEADER_SIZE} bytes", offset=len(buf))
    fields = HEADER.unpack_from(buf, 0)
    if fields[0] != MAGIC:
        raise FormatError(f"bad magic {fields[0]!r}, expected {MAGIC!r}", offset=0)
    dtype = fields[1]
    if dtype not in _ITEMSIZE:
        raise FormatError(f"unknown dtype code {dtype}", offset=4)
    dims = tuple(fields[2:5])
    if any(n < 1 for n in dims):
        raise FormatError(f"dims must be positive, got {dims}", offset=8)
    channels, num_labels = fields[5], fields[6]
    if dtype != DTYPE_CHANNELS and channels != 1:
        raise FormatError(f"dtype {dtype} requires 1 channel, header says {channels}", offset=20)
    if channels < 1:
        raise FormatError("channel count must be >= 1", offset=20)
    spacing, origin, offset = fields[7:10], fields[10:13], fields[13]
    if offset < HEADER_SIZE:
        raise FormatError(f"data offset {offset} overlaps the header", offset=76)
    return VolumeHeader(dtype, dims, channels, num_labels, tuple(spacing), tuple(origin), offset)


def _payload(vol):
    """Header fields and ``(C, nx, ny, nz)`` payload array for a volume."""
    if isinstance(vol, LabelVolume):
        if vol.num_labels > 255:
            raise FormatError(f"u8 label files hold at most 255 labels, got {vol.num_labels}")
        return DTYPE_LABELS, 1, vol.num_labels, vol.labels[None]
    if isinstance(vol, ScalarVolume):
        return DTYPE_SCALAR, 1, 0, vol.data[None]
    if isinstance(vol, ProbVolume):
        return DTYPE_CHANNELS, vol.probs.shape[3], vol.num_labels, np.moveaxis(vol.probs, 3, 0)
    if isinstance(vol, ChannelVolume):
        return DTYPE_CHANNELS, vol.channels, 0, np.moveaxis(vol.data, 3, 0)
    raise TypeError(f"cannot serialise {type(vol).__name__}")


def encode_volume(vol):
    """Complete file contents for ``vol`` as bytes."""
    dtype, channels, num_labels, arr = _payload(vol)
    header = VolumeHeader(dtype, vol.dims, channels, num_labels, vol.spacing, vol.origin)
    # channel axis first, so Fortran order puts channels fastest
    data = np.asarray(arr).astype(_NUMPY[dtype]).tobytes(order="F")
    return header.pack() + data


def decode_volume(buf):
    header = parse_header(buf)
    end = header.data_offset + header.payload_size
    if len(buf) != end:
        raise FormatError(
            f"payload size mismatch: expected {header.payload_size} bytes after offset "
            f"{header.data_offset} (file size {end}), found file size {len(buf)}",
            offset=min(len(buf), end),
        )
    flat = np.frombuffer(buf, dtype=_NUMPY[header.dtype], offset=header.data_offset,
                         count=int(np.prod(header.dims)) * header.channels)
    arr = flat.reshape((header.channels,) + header.dims, order="F")
    geo = header.spacing, header.origin
    if header.dtype == DTYPE_LABELS:
        return LabelVolume(arr[0].astype(np.int64), header.num_labels, *geo)
    if header.dtype == DTYPE_SCALAR:
        return ScalarVolume(arr[0].copy(), *geo)
    data = np.moveaxis(arr, 0, 3).copy()
    if header.channels > 1 and header.num_labels == header.channels - 1:
        return ProbVolume(data, *geo)
    return ChannelVolume(data, *geo)


def read_volume(path):
    """Load a ``VFV1`` file; the header dtype picks the returned volume kind."""
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return decode_volume(buf)
    except FormatError as exc:
        err = FormatError(f"{path}: {exc}")
        err.offset = exc.offset
        raise err from None


def write_volume(vol, path):
    """Write ``vol`` to ``path``, replacing any existing file."""
    data = encode_volume(vol)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write volume {path}: {exc.strerror}") from exc


def write_theta(theta, path):
    """Text matrix: one row per ``(j, reported label)``, one column per true label."""
    theta = np.asarray(theta, dtype=np.float64)
    M, K, _ = theta.shape
    rows = theta.reshape(M * K, K)
    with open(path, "w") as fh:
        fh.write(f"# theta views={M} labels={K} rows=(view, reported) cols=true\n")
        np.savetxt(fh, rows, fmt="%.17g", delimiter=" ")


def read_theta(path):
    with open(path) as fh:
        first = fh.readline()
    m = re.search(r"views=(\d+) labels=(\d+)", first)
    if m is None:
        raise FormatError(f"{path}: missing theta header line", offset=0)
    M, K = int(m.group(1)), int(m.group(2))
    rows = np.loadtxt(path, comments="#", ndmin=2)
    if rows.shape != (M * K, K):
        raise FormatError(f"{path}: expected {M * K}x{K} theta rows, got {rows.shape}")
    return rows.reshape(M, K, K)


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, slice):
        return [obj.start, obj.stop]
    return obj


def dumps_manifest(manifest):
    return json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n"


def write_manifest(manifest, path, wall_time=None):
    """Write the manifest JSON; run time goes to a ``.timing.json`` sidecar.

    Keeping timing out of the manifest makes manifests of reproducible runs
    byte-identical.
    """
    with open(path, "w") as fh:
        fh.write(dumps_manifest(manifest))
    if wall_time is not None:
        with open(timing_path(path), "w") as fh:
            fh.write(dumps_manifest(wall_time))


def timing_path(path):
    root, ext = os.path.splitext(str(path))
    return root + ".timing.json"
