"""Data model, manifest parsing and the ASCF feature-file format."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ascpool.errors import FormatError, ShapeError

MAGIC = b"ASCF"
VERSION = 1
_HEADER = struct.Struct("<4sHII")

MANIFEST_COLUMNS = ("segment_id", "recording_id", "location_id", "scene_label", "feature_path")


class FeatureMatrix:
    """Immutable F x T grid of log mel-band energies (row = frequency bin).

    Values are held as float64; on disk they are float32, so a matrix read
    from a file round-trips bit-exactly.
    """

    __slots__ = ("_values",)

    def __init__(self, values) -> None:
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"feature matrix must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"feature matrix must be at least 1x1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature matrix contains non-finite values")
        arr.flags.writeable = False
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def rows(self) -> int:
        return self._values.shape[0]

    @property
    def cols(self) -> int:
        return self._values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._values.shape  # type: ignore[return-value]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._values, other._values)

    def __hash__(self) -> int:
        return hash((self.shape, self._values.tobytes()))

    def __repr__(self) -> str:
        return f"FeatureMatrix(rows={self.rows}, cols={self.cols})"


def write_feature_matrix(matrix: FeatureMatrix, path: str | Path) -> None:
    values = matrix.values
    if not np.all(np.isfinite(values)):
        raise ValueError("refusing to write non-finite feature values")
    payload = values.astype("<f4").tobytes(order="C")
    header = _HEADER.pack(MAGIC, VERSION, matrix.rows, matrix.cols)
    path = Path(path)
    try:
        path.write_bytes(header + payload)
    except OSError as exc:
        raise OSError(f"cannot write feature file {path}: {exc}") from exc


def read_feature_matrix(path: str | Path) -> FeatureMatrix:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    magic, version, rows, cols = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if rows < 1 or cols < 1:
        raise FormatError(f"{path}: invalid shape {rows}x{cols}", offset=6)
    expected = _HEADER.size + 4 * rows * cols
    if len(data) < expected:
        raise FormatError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(data)}",
            offset=len(data),
        )
    if len(data) > expected:
        raise FormatError(f"{path}: trailing bytes after payload", offset=expected)
    flat = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        offset = _HEADER.size + 4 * int(bad[0])
        raise FormatError(f"{path}: non-finite value at byte offset {offset}", offset=offset)
    return FeatureMatrix(flat.reshape(rows, cols))


@dataclass(frozen=True)
class Segment:
    segment_id: str
    recording_id: str
    location_id: str
    label: str | None
    feature_ref: str


@dataclass(frozen=True)
class Dataset:
    """Ordered segments plus the sorted label vocabulary derived from them."""

    segments: tuple[Segment, ...]
    label_vocabulary: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        ids = [s.segment_id for s in self.segments]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValueError(f"duplicate segment_id {dup!r}")
        vocab = self.label_vocabulary
        if list(vocab) != sorted(set(vocab)):
            raise ValueError("label vocabulary must be sorted and duplicate-free")
        known = set(vocab)
        for s in self.segments:
            if s.label is not None and s.label not in known:
                raise ValueError(f"segment {s.segment_id!r} has label {s.label!r} outside the vocabulary")

    @classmethod
    def from_segments(cls, segments: Iterable[Segment], vocabulary: Sequence[str] | None = None) -> Dataset:
        segments = tuple(segments)
        if vocabulary is None:
            vocabulary = sorted({s.label for s in segments if s.label is not None})
        return cls(segments, tuple(vocabulary))

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def class_count(self) -> int:
        return len(self.label_vocabulary)

    def class_index(self, label: str) -> int:
        try:
            return self.label_vocabulary.index(label)
        except ValueError:
            raise KeyError(f"unknown label {label!r}") from None

    def labels(self) -> np.ndarray:
        """Class indices of all segments; raises if any segment is unlabeled."""
        out = []
        for s in self.segments:
            if s.label is None:
                raise ValueError(f"segment {s.segment_id!r} is unlabeled")
            out.append(self.class_index(s.label))
        return np.array(out, dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> Dataset:
        return Dataset(tuple(self.segments[i] for i in indices), self.label_vocabulary)


def load_manifest(path: str | Path) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty manifest, header required", offset=0) from None
        header = [h.strip() for h in header]
        unknown = [h for h in header if h not in MANIFEST_COLUMNS]
        if unknown:
            raise FormatError(f"{path}: unknown column(s) {unknown}")
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise FormatError(f"{path}: missing required column(s) {missing}")
        col = {name: header.index(name) for name in MANIFEST_COLUMNS}
        segments: list[Segment] = []
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            seg_id = row[col["segment_id"]]
            if seg_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate segment_id {seg_id!r}")
            seen.add(seg_id)
            label = row[col["scene_label"]] or None
            segments.append(
                Segment(
                    segment_id=seg_id,
                    recording_id=row[col["recording_id"]],
                    location_id=row[col["location_id"]],
                    label=label,
                    feature_ref=row[col["feature_path"]],
                )
            )
    return Dataset.from_segments(segments)


def write_manifest(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for s in dataset.segments:
            writer.writerow([s.segment_id, s.recording_id, s.location_id, s.label or "", s.feature_ref])


def load_features(dataset: Dataset, root: str | Path) -> list[FeatureMatrix]:
    """Read every segment's feature file; relative paths resolve against ``root``."""
    root = Path(root)
    out = []
    for s in dataset.segments:
        p = Path(s.feature_ref)
        out.append(read_feature_matrix(p if p.is_absolute() else root / p))
    return out


def one_hot(class_index: int, class_count: int) -> np.ndarray:
    if class_count < 1 or not 0 <= class_index < class_count:
        raise IndexError(f"class index {class_index} out of range for {class_count} classes")
    out = np.zeros(class_count, dtype=np.float64)
    out[class_index] = 1.0
    return out


def one_hot_matrix(indices: Sequence[int], class_count: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= class_count):
        raise IndexError(f"class indices out of range for {class_count} classes")
    out = np.zeros((indices.size, class_count), dtype=np.float64)
    out[np.arange(indices.size), indices] = 1.0
    return out
