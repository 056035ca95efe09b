"""Narration corpus data model, on-disk index format, and embedding store.

An index directory holds three files:

    manifest.json     dim, counts, format version, embedder tag, checksum
    embeddings.bin    fixed header + float32 LE row-major payload + checksum
    records.jsonl     post-cleaning narration records with row offsets

The binary layout is little-endian and memory-map friendly: 8 magic bytes,
u32 version, u32 dim, u64 row count, payload, then an 8-byte blake2b digest
of the payload. Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding import Embedder

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
BLOB_MAGIC = b"SGEMBED\x00"
_HEADER = struct.Struct("<8sIIQ")

ROW_NORM_TOL = 1e-4        # stored rows must be unit within this
RENORM_TOL = 1e-2          # precomputed inputs may deviate this far before rejection


class CorpusFormatError(ValueError):
    """Raised for malformed narration or embedding inputs."""


class IndexIntegrityError(RuntimeError):
    """Raised when a stored index fails structural or checksum validation."""


@dataclass(frozen=True)
class NarrationSegment:
    start_s: float
    end_s: float
    text: str

    def __post_init__(self) -> None:
        if self.start_s < 0:
            raise CorpusFormatError(f"segment start_s must be >= 0, got {self.start_s}")
        if self.end_s < self.start_s:
            raise CorpusFormatError(
                f"segment end_s {self.end_s} precedes start_s {self.start_s}"
            )


@dataclass(frozen=True)
class NarrationRecord:
    video_id: str
    segments: tuple[NarrationSegment, ...]

    def __len__(self) -> int:
        return len(self.segments)

    def texts(self) -> list[str]:
        return [s.text for s in self.segments]


@dataclass(frozen=True)
class Manifest:
    dim: int
    record_count: int
    segment_count: int
    format_version: int
    embedder: str
    checksum: str

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "record_count": self.record_count,
            "segment_count": self.segment_count,
            "format_version": self.format_version,
            "embedder": self.embedder,
            "checksum": self.checksum,
        }


@dataclass
class IngestStats:
    records_in: int = 0
    records_dropped: int = 0
    empty_segments_dropped: int = 0
    rows_renormalized: int = 0


class CorpusIndex:
    """Immutable narration corpus with its embedding matrix.

    Offsets partition the embedding rows in record order with no gaps or
    overlaps; the matrix is marked read-only so concurrent readers can share
    it freely.
    """

    def __init__(
        self,
        records: Sequence[NarrationRecord],
        embeddings: np.ndarray,
        embedder_tag: str,
        stats: IngestStats | None = None,
    ) -> None:
        embeddings = np.ascontiguousarray(embeddings, dtype=np.float32)
        if embeddings.ndim != 2:
            raise CorpusFormatError("embeddings must be a 2-D matrix")
        total = sum(len(r) for r in records)
        if embeddings.shape[0] != total:
            raise CorpusFormatError(
                f"embedding row count mismatch: expected {total} rows, "
                f"found {embeddings.shape[0]}"
            )
        seen: set[str] = set()
        for r in records:
            if len(r) < 1:
                raise CorpusFormatError(f"record {r.video_id!r} has no segments")
            if r.video_id in seen:
                raise CorpusFormatError(f"duplicate video_id {r.video_id!r}")
            seen.add(r.video_id)
        _check_unit_rows(embeddings)

        offsets = np.empty((len(records), 2), dtype=np.int64)
        pos = 0
        for i, r in enumerate(records):
            offsets[i, 0] = pos
            offsets[i, 1] = len(r)
            pos += len(r)
        offsets.setflags(write=False)
        embeddings.setflags(write=False)

        self.records: tuple[NarrationRecord, ...] = tuple(records)
        self.offsets = offsets
        self.embeddings = embeddings
        self.manifest = Manifest(
            dim=int(embeddings.shape[1]),
            record_count=len(records),
            segment_count=total,
            format_version=FORMAT_VERSION,
            embedder=embedder_tag,
            checksum=_payload_checksum(embeddings),
        )
        self.stats = stats
        self._length_buckets: dict[int, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def dim(self) -> int:
        return self.manifest.dim

    def segment_embeddings(self, record_idx: int) -> np.ndarray:
        """Contiguous (L, dim) view of one record's rows. Never copies."""
        if not 0 <= record_idx < len(self.records):
            raise IndexError(
                f"record_idx {record_idx} out of range [0, {len(self.records)})"
            )
        start, length = self.offsets[record_idx]
        return self.embeddings[start : start + length]

    def length_buckets(self) -> dict[int, np.ndarray]:
        """Record indices grouped by segment count, ascending within a bucket.

        Cached; used by the batched retrieval scan so records of equal length
        can be scored in one vectorized pass.
        """
        if self._length_buckets is None:
            lengths = self.offsets[:, 1]
            buckets: dict[int, np.ndarray] = {}
            for length in np.unique(lengths):
                buckets[int(length)] = np.flatnonzero(lengths == length)
            self._length_buckets = buckets
        return self._length_buckets


def _check_unit_rows(rows: np.ndarray) -> None:
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > ROW_NORM_TOL)
    if bad.size:
        raise CorpusFormatError(
            f"{bad.size} embedding rows are not unit-norm within {ROW_NORM_TOL} "
            f"(first offender: row {int(bad[0])}, norm {norms[bad[0]]:.6f})"
        )


def _payload_checksum(rows: np.ndarray) -> str:
    return hashlib.blake2b(
        np.ascontiguousarray(rows, dtype=np.float32).tobytes(), digest_size=8
    ).hexdigest()


# ---------------------------------------------------------------------------
# narrations file parsing and ingestion


def _parse_raw_record(obj: dict, line_no: int) -> tuple[str, list[NarrationSegment]]:
    if not isinstance(obj, dict):
        raise CorpusFormatError(f"line {line_no}: expected a JSON object")
    video_id = obj.get("video_id")
    if not isinstance(video_id, str):
        raise CorpusFormatError(f"line {line_no}: missing or non-string video_id")
    raw_segments = obj.get("segments")
    if not isinstance(raw_segments, list):
        raise CorpusFormatError(f"line {line_no}: missing or non-list segments")
    segments = []
    for j, seg in enumerate(raw_segments):
        if not isinstance(seg, dict):
            raise CorpusFormatError(f"line {line_no}: segment {j} is not an object")
        try:
            start_s = float(seg["start_s"])
            end_s = float(seg["end_s"])
            text = seg["text"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"line {line_no}: segment {j}: {exc}") from exc
        if not isinstance(text, str):
            raise CorpusFormatError(f"line {line_no}: segment {j}: text is not a string")
        try:
            segments.append(NarrationSegment(start_s, end_s, text))
        except CorpusFormatError as exc:
            raise CorpusFormatError(f"line {line_no}: segment {j}: {exc}") from exc
    return video_id, segments


def ingest_corpus(
    narrations_file: str | Path,
    embeddings_source: str | Path,
    embedder: Embedder,
) -> CorpusIndex:
    """Build a validated index from a line-delimited narrations file.

    ``embeddings_source`` is either the literal string ``"compute"`` (every
    segment text is embedded with ``embedder``) or a path to a precomputed
    blob whose rows correspond one-to-one with the raw file's segments in
    input order. Degenerate records (zero segments, or all segment texts
    empty) are dropped, not errored; empty-text segments inside surviving
    records are dropped so the post-index corpus never carries empty text.
    """
    stats = IngestStats()
    records: list[NarrationRecord] = []
    # raw row index per surviving segment, in storage order (precomputed case)
    kept_raw_rows: list[int] = []
    raw_row = 0

    with open(narrations_file, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            stats.records_in += 1
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {line_no}: malformed JSON: {exc}") from exc
            video_id, segments = _parse_raw_record(obj, line_no)

            # temporal order is assumed by monotonic alignment; enforce it here
            order = sorted(
                range(len(segments)),
                key=lambda j: (segments[j].start_s, segments[j].end_s),
            )
            kept = [(j, segments[j]) for j in order if segments[j].text != ""]
            n_empty = len(segments) - len(kept)
            if not kept:
                stats.records_dropped += 1
                raw_row += len(segments)
                continue
            stats.empty_segments_dropped += n_empty
            records.append(NarrationRecord(video_id, tuple(s for _, s in kept)))
            kept_raw_rows.extend(raw_row + j for j, _ in kept)
            raw_row += len(segments)

    if stats.records_dropped:
        logger.warning(
            "dropped %d degenerate records (zero segments or all-empty text)",
            stats.records_dropped,
        )

    if embeddings_source == "compute":
        texts = [t for r in records for t in r.texts()]
        rows = np.empty((len(texts), embedder.dim), dtype=np.float32)
        for i, t in enumerate(texts):
            rows[i] = embedder.embed(t)
    else:
        raw_rows = read_embedding_blob(embeddings_source)
        if raw_rows.shape[0] != raw_row:
            raise CorpusFormatError(
                f"embedding row-count mismatch: expected {raw_row} rows "
                f"(one per raw segment), found {raw_rows.shape[0]}"
            )
        rows = raw_rows[np.asarray(kept_raw_rows, dtype=np.int64)]
        rows, n_renorm = _renormalize(rows)
        stats.rows_renormalized = n_renorm

    return CorpusIndex(records, rows, embedder.name, stats=stats)


def _renormalize(rows: np.ndarray) -> tuple[np.ndarray, int]:
    """Fix mild norm drift in precomputed rows; reject anything worse."""
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    dev = np.abs(norms - 1.0)
    bad = np.flatnonzero(dev > RENORM_TOL)
    if bad.size:
        raise CorpusFormatError(
            f"{bad.size} precomputed rows deviate from unit norm by more than "
            f"{RENORM_TOL} (first offender: row {int(bad[0])}, norm {norms[bad[0]]:.4f})"
        )
    needs = np.flatnonzero(dev > ROW_NORM_TOL)
    if needs.size:
        rows = rows.astype(np.float64)
        rows[needs] /= norms[needs, None]
        rows = rows.astype(np.float32)
    return rows, int(needs.size)


# ---------------------------------------------------------------------------
# binary blob and index directory IO


def write_embedding_blob(path: str | Path, rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    payload = rows.tobytes()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BLOB_MAGIC, FORMAT_VERSION, rows.shape[1], rows.shape[0]))
        fh.write(payload)
        fh.write(digest)


def read_embedding_blob(path: str | Path) -> np.ndarray:
    """Read a blob back as an (n, dim) float32 matrix, verifying integrity."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 8:
        raise IndexIntegrityError(f"{path}: truncated blob (shorter than header)")
    magic, version, dim, rows = _HEADER.unpack_from(data)
    if magic != BLOB_MAGIC:
        raise IndexIntegrityError(f"{path}: bad magic bytes")
    if version != FORMAT_VERSION:
        raise IndexIntegrityError(
            f"{path}: format version {version} not supported (expected {FORMAT_VERSION})"
        )
    expected = _HEADER.size + rows * dim * 4 + 8
    if len(data) != expected:
        raise IndexIntegrityError(
            f"{path}: truncated or oversized blob: expected {expected} bytes, "
            f"found {len(data)}"
        )
    payload = data[_HEADER.size : -8]
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    if digest != data[-8:]:
        raise IndexIntegrityError(f"{path}: payload checksum mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, dim).copy()


def write_index(index: CorpusIndex, dir: str | Path) -> None:
    """Persist an index; read_index(write_index(x)) is bit-exact."""
    out = Path(dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embedding_blob(out / "embeddings.bin", index.embeddings)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(index.manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
        for i, rec in enumerate(index.records):
            obj = {
                "video_id": rec.video_id,
                "start_row": int(index.offsets[i, 0]),
                "segments": [
                    {"start_s": s.start_s, "end_s": s.end_s, "text": s.text}
                    for s in rec.segments
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_index(dir: str | Path) -> CorpusIndex:
    src = Path(dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise IndexIntegrityError(f"{src}: missing manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if raw.get("format_version") != FORMAT_VERSION:
        raise IndexIntegrityError(
            f"{src}: manifest format version {raw.get('format_version')} not "
            f"supported (expected {FORMAT_VERSION})"
        )

    rows = read_embedding_blob(src / "embeddings.bin")
    if rows.shape[1] != raw["dim"]:
        raise IndexIntegrityError(
            f"{src}: blob dim {rows.shape[1]} does not match manifest dim {raw['dim']}"
        )
    if _payload_checksum(rows) != raw["checksum"]:
        raise IndexIntegrityError(f"{src}: manifest checksum does not match blob")

    records: list[NarrationRecord] = []
    expected_row = 0
    with open(src / "records.jsonl", "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            video_id, segments = _parse_raw_record(obj, line_no)
            if obj.get("start_row") != expected_row:
                raise IndexIntegrityError(
                    f"{src}: records.jsonl line {line_no}: start_row "
                    f"{obj.get('start_row')} breaks the row partition "
                    f"(expected {expected_row})"
                )
            records.append(NarrationRecord(video_id, tuple(segments)))
            expected_row += len(segments)

    index = CorpusIndex(records, rows, raw["embedder"])
    if index.manifest.segment_count != raw["segment_count"] or len(records) != raw[
        "record_count"
    ]:
        raise IndexIntegrityError(f"{src}: manifest counts do not match records.jsonl")
    return index


def build_index(
    records: Iterable[NarrationRecord], embedder: Embedder
) -> CorpusIndex:
    """Assemble an in-memory index by embedding every segment text."""
    records = list(records)
    texts = [t for r in records for t in r.texts()]
    rows = np.empty((len(texts), embedder.dim), dtype=np.float32)
    for i, t in enumerate(texts):
        rows[i] = embedder.embed(t)
    return CorpusIndex(records, rows, embedder.name)
