"""Single-file packed image dataset with memory-mapped random access.

A packed file holds a fixed header, a descriptor table (one 24-byte entry per
sample) and a page-aligned data region of payloads. Payloads are either raw
row-major H*W*C uint8 buffers or JPEG streams. The byte layout is documented
bit-exactly in docs/file_format.md; everything is little-endian.

Readers open the file once, mmap it, and serve constant-time random access
through the descriptor table. A handle is immutable after open and safe to
share across threads; each process should open its own handle.
"""

from __future__ import annotations

import enum
import io
import mmap
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import (
    CorruptFile,
    CorruptSample,
    EmptyDataset,
    FormatError,
    InvalidParam,
    IoError,
    ShapeMismatch,
)

MAGIC = b"SSLP"
FORMAT_VERSION = 1
PAGE_SIZE = 4096

# magic, version, sample_count, encoding, max_height, max_width, channels,
# descriptor_table_offset, data_region_offset
_HEADER = struct.Struct("<4sIQBHHBQQ")
DESCRIPTOR_TABLE_OFFSET = 64  # header is 38 bytes; table starts at the next 64-byte mark

_DESCRIPTOR = struct.Struct("<QIHHII")
DESCRIPTOR_DTYPE = np.dtype(
    [
        ("byte_offset", "<u8"),
        ("byte_length", "<u4"),
        ("height", "<u2"),
        ("width", "<u2"),
        ("label", "<u4"),
        ("checksum", "<u4"),
    ]
)
assert DESCRIPTOR_DTYPE.itemsize == _DESCRIPTOR.size == 24

# Chroma subsampling is disabled (4:4:4): the container is a training-data
# store, and 4:2:0 alone pushes round-trip error well past useful bounds.
_JPEG_SUBSAMPLING = 0


class EncodingMode(enum.IntEnum):
    RAW = 0
    JPEG = 1


@dataclass
class ImageRecord:
    """One decoded sample: H*W*C uint8 pixels plus an integer class label."""

    pixels: np.ndarray
    label: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise ShapeMismatch(f"pixels must be uint8, got {px.dtype}")
        if px.ndim != 3:
            raise ShapeMismatch(f"pixels must be H x W x C, got shape {px.shape}")
        if min(px.shape) < 1:
            raise ShapeMismatch(f"degenerate image shape {px.shape}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class PackOptions:
    encoding_mode: EncodingMode = EncodingMode.RAW
    jpeg_quality: int = 90

    def __post_init__(self):
        if not 1 <= self.jpeg_quality <= 100:
            raise InvalidParam(f"jpeg_quality must be in 1..100, got {self.jpeg_quality}")


@dataclass(frozen=True)
class DatasetHeader:
    magic: bytes
    format_version: int
    sample_count: int
    encoding_mode: EncodingMode
    max_height: int
    max_width: int
    channels: int
    descriptor_table_offset: int
    data_region_offset: int


@dataclass
class ValidationReport:
    """Outcome of a full-file sweep; failures are reported, never raised."""

    sample_count: int
    checksum_passed: int
    checksum_failed: int
    failed_indices: list[int] = field(default_factory=list)
    alignment_ok: bool = True
    offsets_monotonic: bool = True

    @property
    def ok(self) -> bool:
        return self.checksum_failed == 0 and self.alignment_ok and self.offsets_monotonic


def _page_align(offset: int) -> int:
    return (offset + PAGE_SIZE - 1) // PAGE_SIZE * PAGE_SIZE


def _encode_payload(record: ImageRecord, options: PackOptions) -> bytes:
    if options.encoding_mode == EncodingMode.RAW:
        return record.pixels.tobytes()
    if record.channels == 3:
        pil = Image.fromarray(record.pixels, mode="RGB")
    elif record.channels == 1:
        pil = Image.fromarray(record.pixels[:, :, 0], mode="L")
    else:
        raise ShapeMismatch(f"JPEG encoding supports 1 or 3 channels, got {record.channels}")
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=options.jpeg_quality, subsampling=_JPEG_SUBSAMPLING)
    return buf.getvalue()


def pack_dataset(
    source: Iterable[ImageRecord],
    path: str | Path,
    options: PackOptions = PackOptions(),
) -> Path:
    """Write ``source`` into a packed file at ``path``.

    Descriptor order equals source order; payload offsets are strictly
    increasing; the data region starts on a 4096-byte boundary. Single pass
    over the data: descriptors are back-filled after the payloads stream out.
    Single-writer: nothing else may touch the file while packing runs.
    """
    records = source if isinstance(source, Sequence) else list(source)
    if len(records) == 0:
        raise EmptyDataset("cannot pack an empty dataset")

    channels = records[0].channels
    max_h = max_w = 0
    for rec in records:
        if rec.channels != channels:
            raise ShapeMismatch(
                f"mixed channel counts: expected {channels}, got {rec.channels}"
            )
        if rec.height > 0xFFFF or rec.width > 0xFFFF:
            raise ShapeMismatch(f"image {rec.height}x{rec.width} exceeds 16-bit dims")
        max_h = max(max_h, rec.height)
        max_w = max(max_w, rec.width)

    path = Path(path)
    table_bytes = _DESCRIPTOR.size * len(records)
    data_off = _page_align(DESCRIPTOR_TABLE_OFFSET + table_bytes)
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        len(records),
        int(options.encoding_mode),
        max_h,
        max_w,
        channels,
        DESCRIPTOR_TABLE_OFFSET,
        data_off,
    )

    descriptors: list[bytes] = []
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(b"\x00" * (data_off - len(header)))  # table placeholder + padding
            offset = data_off
            for rec in records:
                payload = _encode_payload(rec, options)
                if len(payload) > 0xFFFFFFFF:
                    raise ShapeMismatch("payload exceeds 32-bit length field")
                f.write(payload)
                descriptors.append(
                    _DESCRIPTOR.pack(
                        offset,
                        len(payload),
                        rec.height,
                        rec.width,
                        rec.label & 0xFFFFFFFF,
                        zlib.crc32(payload) & 0xFFFFFFFF,
                    )
                )
                offset += len(payload)
            f.seek(DESCRIPTOR_TABLE_OFFSET)
            f.write(b"".join(descriptors))
    except OSError as exc:
        raise IoError(f"failed writing {path}: {exc}") from exc
    return path


class DatasetHandle:
    """Read-only, memory-mapped view over a packed file.

    Immutable after open; ``read_sample`` is reentrant and result-independent
    of any other reads. Use as a context manager or call ``close``.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._file = open(self.path, "rb")
        try:
            self._mm = mmap.mmap(self._file.fileno(), 0, access=mmap.ACCESS_READ)
        except ValueError as exc:  # zero-length file
            self._file.close()
            raise CorruptFile(f"{self.path}: empty file") from exc

        if len(self._mm) < _HEADER.size:
            self.close()
            raise CorruptFile(f"{self.path}: truncated header")
        (
            magic,
            version,
            count,
            encoding,
            max_h,
            max_w,
            channels,
            desc_off,
            data_off,
        ) = _HEADER.unpack_from(self._mm, 0)
        if magic != MAGIC:
            self.close()
            raise FormatError(f"{self.path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            self.close()
            raise FormatError(f"{self.path}: unsupported format version {version}")
        if count < 1:
            self.close()
            raise FormatError(f"{self.path}: sample_count must be >= 1")
        table_end = desc_off + count * _DESCRIPTOR.size
        file_size = len(self._mm)
        if file_size < table_end:
            self.close()
            raise CorruptFile(
                f"{self.path}: descriptor table truncated "
                f"(need {table_end} bytes, file has {file_size})"
            )
        self.header = DatasetHeader(
            magic=magic,
            format_version=version,
            sample_count=count,
            encoding_mode=EncodingMode(encoding),
            max_height=max_h,
            max_width=max_w,
            channels=channels,
            descriptor_table_offset=desc_off,
            data_region_offset=data_off,
        )
        # copy the (small) table out of the map so close() never sees live
        # exported buffers; payload reads stay mapped and lazy
        self._descriptors = np.frombuffer(
            self._mm, dtype=DESCRIPTOR_DTYPE, count=count, offset=desc_off
        ).copy()

    # -- lifecycle ---------------------------------------------------------

    def close(self):
        if getattr(self, "_mm", None) is not None:
            self._mm.close()
            self._mm = None
        if getattr(self, "_file", None) is not None:
            self._file.close()
            self._file = None

    def __enter__(self) -> "DatasetHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- access --------------------------------------------------------------

    @property
    def sample_count(self) -> int:
        return self.header.sample_count

    def descriptor(self, index: int) -> np.void:
        if not 0 <= index < self.sample_count:
            raise IndexError(f"sample index {index} out of range [0, {self.sample_count})")
        return self._descriptors[index]

    def payload(self, index: int) -> bytes:
        """Checksum-verified raw payload bytes for one sample."""
        desc = self.descriptor(index)
        off = int(desc["byte_offset"])
        length = int(desc["byte_length"])
        if off + length > len(self._mm):
            raise CorruptSample(f"sample {index}: payload extends past end of file")
        payload = self._mm[off : off + length]
        if zlib.crc32(payload) & 0xFFFFFFFF != int(desc["checksum"]):
            raise CorruptSample(f"sample {index}: checksum mismatch")
        return payload

    def read_sample(self, index: int) -> ImageRecord:
        desc = self.descriptor(index)
        payload = self.payload(index)
        h, w = int(desc["height"]), int(desc["width"])
        c = self.header.channels
        if self.header.encoding_mode == EncodingMode.RAW:
            if len(payload) != h * w * c:
                raise CorruptSample(
                    f"sample {index}: RAW payload is {len(payload)} bytes, "
                    f"expected {h * w * c}"
                )
            pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c).copy()
        else:
            try:
                pil = Image.open(io.BytesIO(payload))
                pixels = np.asarray(pil)
            except Exception as exc:
                raise CorruptSample(f"sample {index}: JPEG decode failed: {exc}") from exc
            if pixels.ndim == 2:
                pixels = pixels[:, :, None]
            if pixels.shape[:2] != (h, w) or pixels.shape[2] != c:
                raise CorruptSample(
                    f"sample {index}: decoded shape {pixels.shape} does not match "
                    f"descriptor {(h, w, c)}"
                )
            pixels = np.ascontiguousarray(pixels)
        return ImageRecord(pixels=pixels, label=int(desc["label"]))

    def labels(self) -> np.ndarray:
        return self._descriptors["label"].astype(np.int64)

    def mean_payload_bytes(self) -> float:
        return float(self._descriptors["byte_length"].mean())


def open_dataset(path: str | Path) -> DatasetHandle:
    return DatasetHandle(path)


def validate(handle: DatasetHandle) -> ValidationReport:
    """Sweep every sample's checksum and the structural invariants.

    Failures are collected into the report; nothing raises.
    """
    n = handle.sample_count
    report = ValidationReport(sample_count=n, checksum_passed=0, checksum_failed=0)
    report.alignment_ok = handle.header.data_region_offset % PAGE_SIZE == 0
    offsets = handle._descriptors["byte_offset"]
    report.offsets_monotonic = bool(np.all(np.diff(offsets.astype(np.int64)) > 0)) if n > 1 else True
    for i in range(n):
        try:
            handle.payload(i)
        except CorruptSample:
            report.checksum_failed += 1
            report.failed_indices.append(i)
        else:
            report.checksum_passed += 1
    return report
