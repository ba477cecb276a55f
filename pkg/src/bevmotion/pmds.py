"""PMDS on-disk dataset container.

Layout (all multi-byte values little-endian):

    magic        4 bytes  b"PMDS"  (b"PMDP" for prediction files)
    version      u16      currently 1
    grid block   9 x f64  x_min x_max y_min y_max z_min z_max xy_res z_res dt
                 2 x u16  input_frames, output_steps
    n_sequences  u32
    sequences    n_sequences records

Dataset record (PMDS): ``input_frames`` point arrays, each a u32 count
followed by count x 3 f32 (x, y, z); then five label tensors in fixed order:
motion (f32, T x H x W x 2), category (i32), state (u8), instance_id (i32),
valid (u8).  Prediction record (PMDP): motion (f32, T x H x W x 2),
category_logits (f32, H x W x NUM_CLASSES), state_logits (f32, H x W).

Every tensor is stored as a u8 dtype code, u8 ndim, ndim x u32 dims, then the
raw payload.  Truncation anywhere raises DataCorruptionError; a bad magic or
unsupported version raises DataFormatError.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .exceptions import DataCorruptionError, DataFormatError
from .grid import NUM_CLASSES, GridSpec, PointSequence, SceneLabels

MAGIC_DATASET = b"PMDS"
MAGIC_PREDICTIONS = b"PMDP"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("uint8"), 2: np.dtype("<i4")}
_CODE_FOR_KIND = {"f": 0, "u": 1, "i": 2}


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataCorruptionError(f"truncated file while reading {what}")
    return buf


def _write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    code = _CODE_FOR_KIND[arr.dtype.kind]
    arr = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code])
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_tensor(fh: BinaryIO, what: str) -> np.ndarray:
    code, ndim = struct.unpack("<BB", _read_exact(fh, 2, f"{what} header"))
    if code not in _DTYPE_CODES:
        raise DataFormatError(f"unknown dtype code {code} for {what}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, f"{what} shape"))
    dtype = _DTYPE_CODES[code]
    n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = _read_exact(fh, n_bytes, f"{what} payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def _write_header(fh: BinaryIO, magic: bytes, spec: GridSpec, n_sequences: int) -> None:
    fh.write(magic)
    fh.write(struct.pack("<H", FORMAT_VERSION))
    fh.write(
        struct.pack(
            "<9d",
            spec.x_range[0], spec.x_range[1],
            spec.y_range[0], spec.y_range[1],
            spec.z_range[0], spec.z_range[1],
            spec.xy_resolution, spec.z_resolution, spec.frame_interval,
        )
    )
    fh.write(struct.pack("<HH", spec.input_frames, spec.output_steps))
    fh.write(struct.pack("<I", n_sequences))


def _read_header(fh: BinaryIO, magic: bytes) -> tuple[GridSpec, int]:
    got = _read_exact(fh, 4, "magic")
    if got != magic:
        raise DataFormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported format version {version}")
    vals = struct.unpack("<9d", _read_exact(fh, 72, "grid block"))
    t_in, t_out = struct.unpack("<HH", _read_exact(fh, 4, "grid block"))
    spec = GridSpec(
        x_range=(vals[0], vals[1]),
        y_range=(vals[2], vals[3]),
        z_range=(vals[4], vals[5]),
        xy_resolution=vals[6],
        z_resolution=vals[7],
        frame_interval=vals[8],
        input_frames=t_in,
        output_steps=t_out,
    )
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "sequence count"))
    return spec, count


def write_dataset(
    path: str | Path,
    spec: GridSpec,
    sequences: Sequence[tuple[PointSequence, SceneLabels]],
) -> None:
    """Write sequences to a PMDS file; the round-trip is bit-exact."""
    sequences = list(sequences)
    with open(path, "wb") as fh:
        _write_header(fh, MAGIC_DATASET, spec, len(sequences))
        for seq, labels in sequences:
            for frame in seq.frames:
                pts = np.ascontiguousarray(frame, dtype="<f4").reshape(-1, 3)
                fh.write(struct.pack("<I", pts.shape[0]))
                fh.write(pts.tobytes())
            _write_tensor(fh, labels.motion.astype("<f4", copy=False))
            _write_tensor(fh, labels.category.astype("<i4", copy=False))
            _write_tensor(fh, labels.state.astype(np.uint8, copy=False))
            _write_tensor(fh, labels.instance_id.astype("<i4", copy=False))
            _write_tensor(fh, labels.valid.astype(np.uint8, copy=False))


def read_dataset(path: str | Path) -> tuple[GridSpec, list[tuple[PointSequence, SceneLabels]]]:
    """Read a PMDS file written by :func:`write_dataset`."""
    out: list[tuple[PointSequence, SceneLabels]] = []
    with open(path, "rb") as fh:
        spec, count = _read_header(fh, MAGIC_DATASET)
        for s in range(count):
            frames = []
            for t in range(spec.input_frames):
                (n,) = struct.unpack("<I", _read_exact(fh, 4, f"sequence {s} frame {t} count"))
                raw = _read_exact(fh, 12 * n, f"sequence {s} frame {t} points")
                frames.append(np.frombuffer(raw, dtype="<f4").reshape(n, 3).copy())
            labels = SceneLabels(
                motion=_read_tensor(fh, "motion"),
                category=_read_tensor(fh, "category"),
                state=_read_tensor(fh, "state"),
                instance_id=_read_tensor(fh, "instance_id"),
                valid=_read_tensor(fh, "valid"),
            )
            out.append((PointSequence(frames=frames), labels))
        if fh.read(1):
            raise DataCorruptionError("trailing bytes after final sequence")
    return spec, out


def write_predictions(
    path: str | Path,
    spec: GridSpec,
    predictions: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray]],
) -> None:
    """Write per-sequence (motion, category_logits, state_logits) records."""
    records = list(predictions)
    with open(path, "wb") as fh:
        _write_header(fh, MAGIC_PREDICTIONS, spec, len(records))
        for motion, cls_logits, state_logits in records:
            if cls_logits.shape[-1] != NUM_CLASSES:
                raise DataFormatError(f"category logits must have {NUM_CLASSES} channels")
            _write_tensor(fh, np.asarray(motion, dtype="<f4"))
            _write_tensor(fh, np.asarray(cls_logits, dtype="<f4"))
            _write_tensor(fh, np.asarray(state_logits, dtype="<f4"))


def read_predictions(path: str | Path) -> tuple[GridSpec, list[tuple[np.ndarray, np.ndarray, np.ndarray]]]:
    out = []
    with open(path, "rb") as fh:
        spec, count = _read_header(fh, MAGIC_PREDICTIONS)
        for _ in range(count):
            motion = _read_tensor(fh, "motion")
            cls_logits = _read_tensor(fh, "category_logits")
            state_logits = _read_tensor(fh, "state_logits")
            out.append((motion, cls_logits, state_logits))
        if fh.read(1):
            raise DataCorruptionError("trailing bytes after final record")
    return spec, out


def dataset_checksum(seq: PointSequence, labels: SceneLabels) -> int:
    """CRC32 over all tensors of one sequence, for round-trip verification."""
    crc = 0
    for frame in seq.frames:
        crc = zlib.crc32(np.ascontiguousarray(frame, dtype="<f4").tobytes(), crc)
    for arr in (labels.motion, labels.category, labels.state, labels.instance_id, labels.valid):
        crc = zlib.crc32(np.ascontiguousarray(arr).tobytes(), crc)
    return crc
