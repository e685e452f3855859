"""Versioned little-endian binary container for networks and task summaries.

Every file starts with the magic ``FSDK``, a u32 format version and a u32
record count. Tensors are stored as u32 ndim, u32 dims, then raw f64 data.
"""
import struct

import numpy as np

from .errors import CorruptFileError, InputError, VersionError
from .net import LayerSpec, NetworkParams

MAGIC = b"FSDK"
VERSION = 1

_KIND_TAGS = {"dense": 1, "conv2d": 2, "relu": 3, "flatten": 4, "avgpool": 5}
_HEAD_TAG = 6
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}
_PADDING = {"valid": 0, "same": 1}


class Writer:
    def __init__(self):
        self.buf = bytearray()

    def raw(self, data):
        self.buf += data

    def u8(self, v):
        self.buf += struct.pack("<B", v)

    def u32(self, v):
        self.buf += struct.pack("<I", v)

    def u64(self, v):
        self.buf += struct.pack("<Q", v)

    def i64(self, v):
        self.buf += struct.pack("<q", v)

    def f64(self, v):
        self.buf += struct.pack("<d", v)

    def tensor(self, arr):
        arr = np.asarray(arr, dtype="<f8")
        self.u32(arr.ndim)
        for dim in arr.shape:
            self.u32(dim)
        self.buf += np.ascontiguousarray(arr).tobytes()

    def header(self, count):
        self.raw(MAGIC)
        self.u32(VERSION)
        self.u32(count)

    def getvalue(self):
        return bytes(self.buf)


class Reader:
    """Sequential reader that raises CorruptFileError on any short read.

    `floats` counts the tensor elements read so far, which is how stored
    payload size is audited.
    """

    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0
        self.floats = 0

    def take(self, n):
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptFileError("unexpected end of file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def _unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def u8(self):
        return self._unpack("<B")

    def u32(self):
        return self._unpack("<I")

    def u64(self):
        return self._unpack("<Q")

    def i64(self):
        return self._unpack("<q")

    def f64(self):
        return self._unpack("<d")

    def tensor(self):
        ndim = self.u32()
        if ndim > 8:
            raise CorruptFileError(f"implausible tensor rank {ndim}")
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = self.take(8 * count)
        self.floats += count
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def header(self):
        if bytes(self.take(4)) != MAGIC:
            raise CorruptFileError("bad magic, not an FSDK container")
        version = self.u32()
        if version > VERSION:
            raise VersionError(f"file format version {version} is newer than supported {VERSION}")
        if version < 1:
            raise CorruptFileError(f"invalid format version {version}")
        return self.u32()

    def done(self):
        if self.pos != len(self.data):
            raise CorruptFileError("trailing bytes after container payload")


def _write_spec(w, spec, tag=None):
    w.u8(tag or _KIND_TAGS[spec.kind])
    for v in (spec.fan_in, spec.fan_out, spec.channels_in, spec.channels_out,
              spec.kernel, spec.stride, _PADDING[spec.padding]):
        w.u32(v)


def _read_spec(r):
    tag = r.u8()
    vals = [r.u32() for _ in range(7)]
    if tag == _HEAD_TAG:
        kind = "dense"
    elif tag in _TAG_KINDS:
        kind = _TAG_KINDS[tag]
    else:
        raise CorruptFileError(f"unknown layer tag {tag}")
    padding = {v: k for k, v in _PADDING.items()}.get(vals[6])
    if padding is None:
        raise CorruptFileError("bad padding code")
    try:
        spec = LayerSpec(kind, *vals[:6], padding=padding)
    except InputError as exc:
        raise CorruptFileError(str(exc)) from exc
    return tag, spec


def write_params(w, params):
    w.header(len(params.arch) + params.head_count)
    w.u32(len(params.input_shape))
    for dim in params.input_shape:
        w.u32(dim)
    layers = iter(params.layers)
    for spec in params.arch:
        _write_spec(w, spec)
        if spec.has_params:
            wt, b = next(layers)
            w.tensor(wt)
            w.tensor(b)
    for wt, b in params.heads:
        _write_spec(w, params.head_spec, _HEAD_TAG)
        w.tensor(wt)
        w.tensor(b)


def read_params(r):
    count = r.header()
    input_shape = tuple(r.u32() for _ in range(r.u32()))
    arch, layers, heads, head_spec = [], [], [], None
    for _ in range(count):
        tag, spec = _read_spec(r)
        if tag == _HEAD_TAG:
            head_spec = spec
            heads.append((r.tensor(), r.tensor()))
        else:
            if heads:
                raise CorruptFileError("trunk layer after head layer")
            arch.append(spec)
            if spec.has_params:
                layers.append((r.tensor(), r.tensor()))
    if head_spec is None:
        raise CorruptFileError("network has no head layer")
    try:
        return NetworkParams(input_shape, tuple(arch), head_spec, layers, heads)
    except InputError as exc:
        raise CorruptFileError(f"inconsistent network record: {exc}") from exc


def params_to_bytes(params):
    w = Writer()
    write_params(w, params)
    return w.getvalue()


def params_from_bytes(data):
    r = Reader(data)
    params = read_params(r)
    r.done()
    return params


def save_params(path, params):
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise InputError(f"no such file: {path}") from exc
    return params_from_bytes(data)
