"""Bit-exact binary persistence for traces, images, templates and skip tables.

All containers are little-endian regardless of host, fully specified here,
and round-trip byte-identically (read then write reproduces the file).

Trace container (``MPBTRC01``)::

    magic            8 bytes  b"MPBTRC01"
    version          u16      currently 1
    flags            u16      bit0 = ragged payload, bit1 = ground truth present
    trace_count      u32
    pixel_count      u32      MACs per trace (0 when not applicable)
    metadata_len     u32
    metadata         UTF-8    "key=value" lines sorted by key, "\\n"-terminated
    samples          fixed:  sample_count u32, then trace_count x sample_count f32
                     ragged: trace_count u32 sample counts, then concatenated f32
    image_index      trace_count x u32
    ground truth     trace_count x pixel_count u8 (0=I 1=E 2=S), only if flagged

Image container (``MPBIMG01``)::

    magic 8 bytes | image_count u32 | pixel_count u32 | pixels u8 row-major

Template container (``MPBTPL01``)::

    magic 8 bytes | count u32 | per template: label u8, leak_offset u32,
    length u32, samples f32

Skip-table container (``MPBSKP01``)::

    magic 8 bytes | rows u32 | cols u32 | row-major bits packed into u8

Ground truth lives in its own optional section so attacker-view files can
be produced with it stripped; attack code paths read with
``load_ground_truth=False`` and behave identically on stripped files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .patterns import PatternLibrary, PatternTemplate
from .simulate import ImportanceLabel, SkipTable, Trace, TraceSet

__all__ = [
    "TraceStoreError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedPayloadError",
    "TrailingDataError",
    "ConfigHashMismatchError",
    "TraceReadResult",
    "write_traces",
    "read_traces",
    "iter_traces",
    "strip_ground_truth",
    "write_images",
    "read_images",
    "write_templates",
    "read_templates",
    "write_skiptable",
    "read_skiptable",
    "export_csv",
    "export_ge_curves",
    "GE_CSV_HEADER",
]

TRACE_MAGIC = b"MPBTRC01"
IMAGE_MAGIC = b"MPBIMG01"
TEMPLATE_MAGIC = b"MPBTPL01"
SKIP_MAGIC = b"MPBSKP01"
TRACE_VERSION = 1

_FLAG_RAGGED = 0x0001
_FLAG_GROUND_TRUTH = 0x0002

_LABEL_CODE = {ImportanceLabel.I: 0, ImportanceLabel.E: 1, ImportanceLabel.S: 2}
_CODE_LABEL = {v: k for k, v in _LABEL_CODE.items()}

GE_CSV_HEADER = ("weight_index", "trace_count", "ge_bits", "experiment_count")


class TraceStoreError(Exception):
    """Base class for container format errors."""


class BadMagicError(TraceStoreError):
    pass


class VersionMismatchError(TraceStoreError):
    pass


class TruncatedPayloadError(TraceStoreError):
    pass


class TrailingDataError(TraceStoreError):
    pass


class ConfigHashMismatchError(TraceStoreError):
    """Artifact was produced under a different simulation config."""


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                "%s: need %d bytes at offset %d, file has %d"
                % (self.path, n, self.pos, len(self.data))
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()

    def done(self):
        if self.pos != len(self.data):
            raise TrailingDataError(
                "%s: %d unexpected trailing bytes" % (self.path, len(self.data) - self.pos)
            )


def _check_magic(r: _Reader, magic: bytes):
    got = r.take(len(magic))
    if got != magic:
        raise BadMagicError("%s: bad magic %r (expected %r)" % (r.path, got, magic))


def _encode_metadata(metadata: dict) -> bytes:
    lines = ["%s=%s" % (k, metadata[k]) for k in sorted(metadata)]
    for k in metadata:
        if "=" in k or "\n" in k or "\n" in str(metadata[k]):
            raise ValueError("metadata keys/values must not contain '=' or newlines: %r" % k)
    return ("".join(line + "\n" for line in lines)).encode("utf-8")


def _decode_metadata(blob: bytes) -> dict:
    meta = {}
    for line in blob.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    return meta


@dataclass
class TraceReadResult:
    traces: TraceSet
    metadata: dict
    ragged: bool


def write_traces(
    traces: TraceSet,
    path,
    metadata: dict | None = None,
    ragged: bool | None = None,
    include_ground_truth: bool = True,
) -> None:
    """Serialize a trace set; see the module docstring for the layout.

    ``ragged=None`` picks fixed-length mode when every trace has the same
    length. Ground truth is written only when present on every trace and
    ``include_ground_truth`` is set; the metadata key ``ground_truth``
    always records which mode was written.
    """
    if len(traces) == 0:
        raise ValueError("refusing to write an empty trace set")
    lengths = traces.lengths()
    if ragged is None:
        ragged = bool(lengths.min() != lengths.max())
    elif not ragged and lengths.min() != lengths.max():
        raise ValueError("fixed-length mode requires equal trace lengths")

    has_gt = include_ground_truth and all(t.ground_truth is not None for t in traces)
    pixel_count = len(traces[0].ground_truth) if has_gt else 0
    if has_gt and any(len(t.ground_truth) != pixel_count for t in traces):
        raise ValueError("ground-truth label sequences have inconsistent lengths")

    meta = dict(metadata or {})
    meta["ground_truth"] = "1" if has_gt else "0"
    meta_blob = _encode_metadata(meta)

    flags = (_FLAG_RAGGED if ragged else 0) | (_FLAG_GROUND_TRUTH if has_gt else 0)
    parts = [
        TRACE_MAGIC,
        struct.pack("<HHIII", TRACE_VERSION, flags, len(traces), pixel_count, len(meta_blob)),
        meta_blob,
    ]
    if ragged:
        parts.append(lengths.astype("<u4").tobytes())
        for t in traces:
            parts.append(np.asarray(t.samples, dtype="<f4").tobytes())
    else:
        parts.append(struct.pack("<I", int(lengths[0])))
        for t in traces:
            parts.append(np.asarray(t.samples, dtype="<f4").tobytes())
    parts.append(np.array([t.image_index for t in traces], dtype="<u4").tobytes())
    if has_gt:
        codes = np.array(
            [[_LABEL_CODE[lab] for lab in t.ground_truth] for t in traces], dtype=np.uint8
        )
        parts.append(codes.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _read_trace_header(r: _Reader):
    _check_magic(r, TRACE_MAGIC)
    version, flags, count, pixel_count, meta_len = struct.unpack("<HHIII", r.take(16))
    if version != TRACE_VERSION:
        raise VersionMismatchError("%s: container version %d, expected %d" % (r.path, version, TRACE_VERSION))
    meta = _decode_metadata(r.take(meta_len))
    return flags, count, pixel_count, meta


def read_traces(path, load_ground_truth: bool = True, expect_config_hash: str | None = None) -> TraceReadResult:
    """Load a trace container written by :func:`write_traces`.

    ``load_ground_truth=False`` is the attacker-view read: the ground-truth
    section, if any, is skipped without being decoded. When
    ``expect_config_hash`` is given it must equal the container's
    ``config_hash`` metadata entry.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    flags, count, pixel_count, meta = _read_trace_header(r)
    ragged = bool(flags & _FLAG_RAGGED)
    has_gt = bool(flags & _FLAG_GROUND_TRUTH)

    if expect_config_hash is not None and meta.get("config_hash") != expect_config_hash:
        raise ConfigHashMismatchError(
            "%s: config hash %r does not match expected %r"
            % (path, meta.get("config_hash"), expect_config_hash)
        )

    if ragged:
        lengths = r.array("<u4", count).astype(np.int64)
    else:
        lengths = np.full(count, r.u32(), dtype=np.int64)
    sample_rows = [r.array("<f4", int(n)) for n in lengths]
    image_index = r.array("<u4", count).astype(np.int64)
    gt_rows = None
    if has_gt:
        codes = r.array("u1", count * pixel_count).reshape(count, pixel_count)
        if load_ground_truth:
            gt_rows = [tuple(_CODE_LABEL[int(c)] for c in row) for row in codes]
    r.done()

    traces = TraceSet(
        [
            Trace(
                samples=sample_rows[i],
                image_index=int(image_index[i]),
                ground_truth=gt_rows[i] if gt_rows is not None else None,
            )
            for i in range(count)
        ]
    )
    return TraceReadResult(traces=traces, metadata=meta, ragged=ragged)


def iter_traces(path):
    """Stream traces one at a time (attacker view, ground truth skipped).

    Keeps only the header, per-trace lengths and one trace in memory, so
    paper-scale containers can be consumed under a flat memory bound.
    """
    with open(path, "rb") as fh:
        head = fh.read(24)
        r = _Reader(head, path)
        flags, count, pixel_count, meta_len = _read_trace_header_streaming(r, path)
        fh.seek(24 + meta_len)
        ragged = bool(flags & _FLAG_RAGGED)
        if ragged:
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise TruncatedPayloadError("%s: truncated length table" % path)
            lengths = np.frombuffer(raw, dtype="<u4").astype(np.int64)
        else:
            raw = fh.read(4)
            if len(raw) != 4:
                raise TruncatedPayloadError("%s: truncated sample count" % path)
            lengths = np.full(count, struct.unpack("<I", raw)[0], dtype=np.int64)
        samples_start = fh.tell()
        fh.seek(samples_start + int(lengths.sum()) * 4)
        idx_raw = fh.read(4 * count)
        if len(idx_raw) != 4 * count:
            raise TruncatedPayloadError("%s: truncated image-index table" % path)
        image_index = np.frombuffer(idx_raw, dtype="<u4")
        fh.seek(samples_start)
        for i in range(count):
            blob = fh.read(int(lengths[i]) * 4)
            if len(blob) != int(lengths[i]) * 4:
                raise TruncatedPayloadError("%s: truncated samples for trace %d" % (path, i))
            yield Trace(samples=np.frombuffer(blob, dtype="<f4").copy(), image_index=int(image_index[i]))


def _read_trace_header_streaming(r: _Reader, path):
    _check_magic(r, TRACE_MAGIC)
    version, flags, count, pixel_count, meta_len = struct.unpack("<HHIII", r.take(16))
    if version != TRACE_VERSION:
        raise VersionMismatchError("%s: container version %d, expected %d" % (path, version, TRACE_VERSION))
    return flags, count, pixel_count, meta_len


def strip_ground_truth(src, dst) -> None:
    """Copy a trace container, dropping the ground-truth section."""
    res = read_traces(src, load_ground_truth=False)
    write_traces(res.traces, dst, metadata=_meta_without_gt(res.metadata), ragged=res.ragged, include_ground_truth=False)


def _meta_without_gt(meta: dict) -> dict:
    out = dict(meta)
    out.pop("ground_truth", None)
    return out


def write_images(images: np.ndarray, path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 2:
        raise ValueError("images must be a (count, pixel_count) matrix")
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<II", images.shape[0], images.shape[1]))
        fh.write(images.tobytes())


def read_images(path) -> np.ndarray:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    _check_magic(r, IMAGE_MAGIC)
    count, pixel_count = struct.unpack("<II", r.take(8))
    pixels = r.array("u1", count * pixel_count)
    r.done()
    return pixels.reshape(count, pixel_count)


def write_templates(lib: PatternLibrary, path) -> None:
    with open(path, "wb") as fh:
        fh.write(TEMPLATE_MAGIC)
        templates = lib.templates
        fh.write(struct.pack("<I", len(templates)))
        for t in templates:
            fh.write(struct.pack("<BII", _LABEL_CODE[t.label], t.leak_offset, t.length))
            fh.write(np.asarray(t.samples, dtype="<f4").tobytes())


def read_templates(path) -> PatternLibrary:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    _check_magic(r, TEMPLATE_MAGIC)
    count = r.u32()
    templates = []
    for _ in range(count):
        code, leak_offset, length = struct.unpack("<BII", r.take(9))
        samples = r.array("<f4", length)
        templates.append(PatternTemplate(_CODE_LABEL[code], samples, leak_offset=leak_offset))
    r.done()
    return PatternLibrary(templates)


def write_skiptable(table: SkipTable, path) -> None:
    d = table.decisions
    with open(path, "wb") as fh:
        fh.write(SKIP_MAGIC)
        fh.write(struct.pack("<II", d.shape[0], d.shape[1]))
        fh.write(np.packbits(d, axis=1).tobytes())


def read_skiptable(path) -> SkipTable:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    _check_magic(r, SKIP_MAGIC)
    rows, cols = struct.unpack("<II", r.take(8))
    packed = r.array("u1", rows * ((cols + 7) // 8)).reshape(rows, -1)
    r.done()
    return SkipTable(np.unpackbits(packed, axis=1)[:, :cols].astype(bool))


def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def export_csv(path, header, rows) -> None:
    """Write UTF-8 CSV with a stable column order and newline-terminated rows.

    Formatting is canonical (shortest round-trip floats), so re-exporting
    identical data reproduces the file byte for byte.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(str(h) for h in header) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(v) for v in row) + "\n")


def export_ge_curves(path, curves: dict) -> None:
    """GE curves as CSV with the documented column order.

    ``curves`` maps weight index to :class:`macleak.cpa.GECurve`.
    """
    rows = []
    for w in sorted(curves):
        c = curves[w]
        for t, g in zip(c.trace_counts, c.ge_bits):
            rows.append((w, t, g, c.experiment_count))
    export_csv(path, GE_CSV_HEADER, rows)
