"""Dataset readers: IDX image/label files, bundled 8x8 digits, plain CSV."""
import csv
import struct

import numpy as np

from .errors import CorruptFileError, InputError

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def parse_idx(data):
    """Decode an IDX blob into an ndarray (big-endian header, row-major payload)."""
    if len(data) < 4:
        raise CorruptFileError("IDX file too short")
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code not in _IDX_TYPES:
        raise CorruptFileError(f"bad IDX magic 0x{int.from_bytes(data[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise CorruptFileError("truncated IDX header")
    shape = struct.unpack(f">{ndim}I", data[4:header])
    dtype = np.dtype(_IDX_TYPES[dtype_code])
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) != header + count * dtype.itemsize:
        raise CorruptFileError("IDX payload size does not match its header")
    return np.frombuffer(data, dtype=dtype, count=count, offset=header).reshape(shape)


def read_idx(path, expected_magic=None):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise InputError(f"dataset file not found: {path}") from exc
    if expected_magic is not None and int.from_bytes(data[:4], "big") != expected_magic:
        raise CorruptFileError(f"{path}: expected IDX magic 0x{expected_magic:08x}")
    return parse_idx(data)


def write_idx(path, array):
    """Write a uint8 array as IDX (used for fixtures)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, 0x08, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def downsample(images, size):
    """Block-average square images (n, h, w) to (n, size, size)."""
    images = np.asarray(images, dtype=float)
    n, h, w = images.shape
    if h % size or w % size:
        raise InputError(f"cannot downsample {h}x{w} to {size}x{size} by block averaging")
    fh, fw = h // size, w // size
    return images.reshape(n, size, fh, size, fw).mean(axis=(2, 4))


def load_idx_digits(image_path, label_path, size=14):
    """Images scaled to [0, 1], flattened after downsampling, and integer labels."""
    images = read_idx(image_path, IMAGE_MAGIC)
    labels = read_idx(label_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise InputError("image and label files have different lengths")
    scale = 255.0 if images.dtype == np.uint8 else 1.0
    x = downsample(images / scale, size) if size != images.shape[1] else images / scale
    return x.reshape(len(x), -1), labels.astype(int)


def load_bundled_digits():
    """The 8x8 handwritten digits shipped with scikit-learn, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    return bunch.data / 16.0, bunch.target.astype(int)


def read_csv_table(path, standardize=True):
    """Numeric CSV with a header row; the last column is the target.

    With `standardize`, every feature column is shifted and scaled to zero mean
    and unit standard deviation (constant columns are only centred).
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise InputError(f"no such file: {path}") from exc
    if len(rows) < 2:
        raise InputError(f"{path}: need a header row and at least one data row")
    header, body = rows[0], [r for r in rows[1:] if r]
    try:
        table = np.array([[float(v) for v in r] for r in body])
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric value ({exc})") from exc
    if table.ndim != 2 or table.shape[1] != len(header) or table.shape[1] < 2:
        raise InputError(f"{path}: ragged rows or fewer than two columns")
    x, y = table[:, :-1], table[:, -1]
    if standardize:
        sd = x.std(axis=0)
        x = (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    return x, y, header
