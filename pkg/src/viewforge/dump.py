"""Binary batch-stream dump: the wire format for foreign-host consumers.

Lets any process replay the exact batch stream a loader would deliver,
without linking against this package. Layout (little-endian, documented in
docs/batch_dump_format.md):

  file header: magic "VFB1", u32 version, u8 n_views, u8 dtype code
               (0 = uint8, 1 = float64), u16 reserved
  per batch:   u32 epoch, u32 batch_index, u32 rows, u16 height, u16 width,
               u8 channels, u8 reserved, then n_views contiguous view
               payloads of rows*H*W*C elements each, then rows u32 labels.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import FormatError
from .loader import Batch

MAGIC = b"VFB1"
VERSION = 1
_FILE_HEADER = struct.Struct("<4sIBBH")
_FRAME_HEADER = struct.Struct("<IIIHHBB")

_DTYPE_CODES = {np.dtype(np.uint8): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.uint8), 1: np.dtype(np.float64)}


def write_batches(path: str | Path, batches: Iterable[Batch]) -> int:
    """Stream batches into a dump file; returns the number of frames written."""
    frames = 0
    header_written = False
    with open(path, "wb") as f:
        for batch in batches:
            views = batch.views
            dtype = views[0].dtype
            if not header_written:
                code = _DTYPE_CODES.get(np.dtype(dtype))
                if code is None:
                    raise FormatError(f"cannot dump views of dtype {dtype}")
                f.write(_FILE_HEADER.pack(MAGIC, VERSION, len(views), code, 0))
                header_written = True
            rows, h, w, c = views[0].shape
            f.write(_FRAME_HEADER.pack(batch.epoch, batch.batch_index, rows, h, w, c, 0))
            for view in views:
                f.write(np.ascontiguousarray(view).tobytes())
            f.write(batch.labels.astype("<u4").tobytes())
            frames += 1
    if not header_written:
        # still emit a parseable empty dump
        with open(path, "wb") as f:
            f.write(_FILE_HEADER.pack(MAGIC, VERSION, 0, 0, 0))
    return frames


def read_batches(path: str | Path) -> Iterator[Batch]:
    """Parse a dump file back into Batch objects (labels as int64)."""
    with open(path, "rb") as f:
        head = f.read(_FILE_HEADER.size)
        if len(head) < _FILE_HEADER.size:
            raise FormatError("dump file truncated before header")
        magic, version, n_views, dtype_code, _ = _FILE_HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"bad dump magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported dump version {version}")
        dtype = _CODE_DTYPES.get(dtype_code)
        if dtype is None and n_views > 0:
            raise FormatError(f"unknown dtype code {dtype_code}")
        while True:
            frame = f.read(_FRAME_HEADER.size)
            if not frame:
                return
            if len(frame) < _FRAME_HEADER.size:
                raise FormatError("dump file truncated mid frame header")
            epoch, batch_index, rows, h, w, c, _ = _FRAME_HEADER.unpack(frame)
            views = []
            count = rows * h * w * c
            for _ in range(n_views):
                raw = f.read(count * dtype.itemsize)
                if len(raw) < count * dtype.itemsize:
                    raise FormatError("dump file truncated mid view payload")
                views.append(np.frombuffer(raw, dtype=dtype).reshape(rows, h, w, c))
            raw_labels = f.read(rows * 4)
            if len(raw_labels) < rows * 4:
                raise FormatError("dump file truncated mid labels")
            labels = np.frombuffer(raw_labels, dtype="<u4").astype(np.int64)
            yield Batch(views=views, labels=labels, epoch=epoch, batch_index=batch_index)
