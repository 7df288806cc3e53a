"""
File storage for the LoGoNet toolkit
Binary codecs for volumes (LGV1), pseudo-label stores (LGPL) and named
parameter checkpoints (LGCK), atomic file writes, run-directory helpers and
intensity range scaling
"""

import logging
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from config import save_config
from utils.errors import FormatError
from utils.ssl import PseudoLabelSet

logger = logging.getLogger(__name__)

VOLUME_MAGIC = b"LGV1"
LABELS_MAGIC = b"LGPL"
CHECKPOINT_MAGIC = b"LGCK"

# 4-byte dtype tags of LGV1 volumes
DTYPE_TAGS = {b"f32\0": np.dtype("<f4"), b"u8\0\0": np.dtype("u1")}
TAG_OF = {"f32": b"f32\0", "u8": b"u8\0\0"}

RESOLVED_CONFIG = "config.resolved.yaml"


@contextmanager
def atomic_write(path):
    """
    Write a file through a temporary sibling and move it into place
    The target is untouched if the block raises

    Usage:
        with atomic_write(path) as handle:
            handle.write(payload)
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    except OSError as e:
        raise FormatError(path, f"cannot write: {e}") from e
    try:
        with os.fdopen(fd, "wb") as handle:
            yield handle
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(path, f"cannot read: {e}") from e


class _Reader:
    """Cursor over a byte string that reports truncation with the file path"""

    def __init__(self, path, data):
        self.path = path
        self.data = data
        self.offset = 0

    def take(self, count):
        end = self.offset + count
        if end > len(self.data):
            raise FormatError(self.path, f"truncated payload: need {end} bytes, file has {len(self.data)}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype)

    def expect_magic(self, magic):
        found = self.data[:len(magic)]
        if found != magic:
            raise FormatError(self.path, f"bad magic {found!r}, expected {magic!r}")
        self.offset = len(magic)

    def finish(self):
        if self.offset != len(self.data):
            raise FormatError(self.path, f"{len(self.data) - self.offset} trailing bytes after payload")


def write_volume(path, volume, dtype="f32"):
    """
    Write an LGV1 volume

    Args:
        path: Output path
        volume: Array (C, S, H, W); a 3-axis array is stored with C=1
        dtype: 'f32' or 'u8'
    """
    if dtype not in TAG_OF:
        raise FormatError(path, f"unsupported volume dtype '{dtype}'")
    volume = np.asarray(volume)
    if volume.ndim == 3:
        volume = volume[None]
    if volume.ndim != 4:
        raise FormatError(path, f"volumes are (C, S, H, W), got shape {volume.shape}")
    tag = TAG_OF[dtype]
    if dtype == "u8" and volume.size and (volume.min() < 0 or volume.max() > 255):
        raise FormatError(path, "u8 volume values must lie in [0, 255]")
    payload = np.ascontiguousarray(volume, dtype=DTYPE_TAGS[tag])
    with atomic_write(path) as handle:
        handle.write(VOLUME_MAGIC + tag + struct.pack("<4I", *volume.shape))
        handle.write(payload.tobytes())


def read_volume(path):
    """
    Read an LGV1 volume

    Returns:
        Array (C, S, H, W) as float32 or uint8

    Raises:
        FormatError: unreadable file, bad magic, unknown dtype or wrong payload length
    """
    reader = _Reader(path, _read_bytes(path))
    reader.expect_magic(VOLUME_MAGIC)
    tag = reader.take(4)
    if tag not in DTYPE_TAGS:
        raise FormatError(path, f"unknown dtype tag {tag!r}")
    shape = reader.unpack("<4I")
    data = reader.array(DTYPE_TAGS[tag], int(np.prod(shape, dtype=np.int64)))
    reader.finish()
    return data.reshape(shape).astype(DTYPE_TAGS[tag].newbyteorder("="))


def write_pseudo_labels(path, labels):
    """
    Write an LGPL store

    Layout: magic, u32 clusterer count N, N x u32 K_i, u32 volume count,
    then per volume u32 slice count followed by slices x N u32 labels.
    """
    n = labels.num_clusterers
    parts = [LABELS_MAGIC, struct.pack("<I", n), struct.pack(f"<{n}I", *labels.cluster_sizes),
             struct.pack("<I", labels.num_volumes)]
    for volume in labels.labels:
        volume = np.asarray(volume)
        if volume.ndim != 2 or volume.shape[1] != n:
            raise FormatError(path, f"label array {volume.shape} does not have {n} clusterer columns")
        parts.append(struct.pack("<I", volume.shape[0]))
        parts.append(np.ascontiguousarray(volume, dtype="<u4").tobytes())
    with atomic_write(path) as handle:
        handle.write(b"".join(parts))


def read_pseudo_labels(path):
    """
    Read an LGPL store

    Raises:
        FormatError: bad magic, truncation or a label outside [0, K_i)
    """
    reader = _Reader(path, _read_bytes(path))
    reader.expect_magic(LABELS_MAGIC)
    (n,) = reader.unpack("<I")
    sizes = reader.unpack(f"<{n}I")
    (volumes,) = reader.unpack("<I")
    labels = []
    for _ in range(volumes):
        (slices,) = reader.unpack("<I")
        block = reader.array("<u4", slices * n).reshape(slices, n).astype(np.uint32)
        if slices and (block >= np.asarray(sizes, dtype=np.uint32)).any():
            raise FormatError(path, "pseudo-label outside its clusterer's range")
        labels.append(block)
    reader.finish()
    return PseudoLabelSet(tuple(sizes), labels)


def write_checkpoint(path, state):
    """
    Write an LGCK checkpoint

    Layout: magic, u32 entry count, a manifest of (u16 name length, UTF-8
    name, u8 rank, rank x u32 extents) per entry, then the little-endian f32
    payloads in manifest order.

    Args:
        state: Mapping name -> array, written in its iteration order
    """
    manifest = [CHECKPOINT_MAGIC, struct.pack("<I", len(state))]
    payloads = []
    for name, array in state.items():
        array = np.asarray(array)
        encoded = name.encode("utf-8")
        manifest.append(struct.pack("<H", len(encoded)) + encoded)
        manifest.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        payloads.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    with atomic_write(path) as handle:
        handle.write(b"".join(manifest))
        handle.write(b"".join(payloads))
    logger.info("wrote checkpoint %s (%d entries)", path, len(state))


def read_checkpoint(path):
    """
    Read an LGCK checkpoint

    Returns:
        Dict name -> float32 array in file order
    """
    reader = _Reader(path, _read_bytes(path))
    reader.expect_magic(CHECKPOINT_MAGIC)
    (count,) = reader.unpack("<I")
    entries = []
    for _ in range(count):
        (length,) = reader.unpack("<H")
        try:
            name = reader.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(path, f"corrupt parameter name: {e}") from e
        (rank,) = reader.unpack("<B")
        entries.append((name, reader.unpack(f"<{rank}I")))
    state = {}
    for name, shape in entries:
        data = reader.array("<f4", int(np.prod(shape, dtype=np.int64)))
        state[name] = data.reshape(shape).astype(np.float32)
    reader.finish()
    return state


def write_resolved_config(cfg, out_dir):
    """Echo the fully-resolved run configuration next to a run's outputs"""
    path = Path(out_dir) / RESOLVED_CONFIG
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        save_config(cfg, path)
    except OSError as e:
        raise FormatError(path, f"cannot write: {e}") from e
    return path


def list_volumes(data_dir, pattern="*_image.lgv"):
    """Sorted image paths of a phantom directory"""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FormatError(data_dir, "not a directory")
    return sorted(data_dir.glob(pattern))


def label_path_for(image_path):
    image_path = Path(image_path)
    return image_path.with_name(image_path.name.replace("_image.lgv", "_label.lgv"))


def scale_intensity(volume, a_min=-1000.0, a_max=1000.0, b_min=0.0, b_max=1.0, clip=True):
    """
    Map [a_min, a_max] linearly onto [b_min, b_max], optionally clipping

    Returns:
        float32 array
    """
    volume = np.asarray(volume, dtype=np.float64)
    scaled = (volume - a_min) / (a_max - a_min) * (b_max - b_min) + b_min
    if clip:
        scaled = np.clip(scaled, min(b_min, b_max), max(b_min, b_max))
    return scaled.astype(np.float32)
