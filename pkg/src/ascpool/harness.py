"""Kaggle-style leaderboard: public/private split, accuracy scoring, daily submission limits.

Private scores are kept in the harness journal only. Nothing returned by
:class:`Leaderboard` before :meth:`Leaderboard.finalize` carries them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ascpool.data import Dataset
from ascpool.errors import AscError, FormatError, SubmissionRejected

PUBLIC, PRIVATE = "public", "private"
JOURNAL_COLUMNS = ["team", "timestamp", "public_score", "private_score", "accepted"]


@dataclass(frozen=True)
class EvaluationSplit:
    public_ids: frozenset[str]
    private_ids: frozenset[str]
    seed: int = 0

    def __post_init__(self) -> None:
        overlap = self.public_ids & self.private_ids
        if overlap:
            raise ValueError(f"public and private subsets overlap on {sorted(overlap)[:10]}")

    @property
    def all_ids(self) -> frozenset[str]:
        return self.public_ids | self.private_ids

    def subset_of(self, segment_id: str) -> str:
        return PUBLIC if segment_id in self.public_ids else PRIVATE


def make_eval_split(eval_dataset: Dataset, ratio: float = 0.5, seed: int = 0) -> EvaluationSplit:
    """Stratified random public/private cut of a labeled evaluation set.

    The public subset gets ``round(N * ratio)`` ids in total; per-class
    shares use largest-remainder rounding so each class is within one id
    of its exact quota.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie strictly between 0 and 1, got {ratio}")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[str]] = {}
    for s in eval_dataset.segments:
        if s.label is None:
            raise ValueError(f"evaluation segment {s.segment_id!r} has no ground truth")
        by_class.setdefault(s.label, []).append(s.segment_id)
    classes = sorted(by_class)
    n_total = sum(len(v) for v in by_class.values())
    quotas = np.array([len(by_class[c]) * ratio for c in classes])
    counts = np.floor(quotas).astype(int)
    leftover = int(math.floor(n_total * ratio + 0.5)) - int(counts.sum())
    # random tie order, then largest fractional remainder first
    tie = rng.permutation(len(classes))
    order = sorted(range(len(classes)), key=lambda i: (-(quotas[i] - counts[i]), tie[i]))
    for i in order[:leftover]:
        counts[i] += 1
    public: set[str] = set()
    private: set[str] = set()
    for c, k in zip(classes, counts):
        ids = by_class[c]
        perm = rng.permutation(len(ids))
        public.update(ids[i] for i in perm[:k])
        private.update(ids[i] for i in perm[k:])
    return EvaluationSplit(frozenset(public), frozenset(private), seed)


def score_submission(
    predictions: Mapping[str, str],
    truth: Mapping[str, str],
    subset: Iterable[str],
    vocabulary: Iterable[str] | None = None,
) -> float:
    """Fraction of ids in ``subset`` whose predicted label equals the truth."""
    subset = list(subset)
    if not subset:
        raise ValueError("cannot score an empty subset")
    missing = [i for i in subset if i not in predictions]
    if missing:
        raise AscError(f"submission is missing {len(missing)} id(s), e.g. {missing[:10]}")
    known = set(vocabulary) if vocabulary is not None else set(truth.values())
    unknown = sorted({predictions[i] for i in subset} - known)
    if unknown:
        raise AscError(f"submission uses unknown label(s) {unknown[:10]}")
    correct = sum(predictions[i] == truth[i] for i in subset)
    return correct / len(subset)


@dataclass(frozen=True)
class JournalEntry:
    team: str
    timestamp: datetime
    public_score: float | None
    private_score: float | None
    accepted: bool


@dataclass(frozen=True)
class SubmissionReceipt:
    """What a team sees after submitting: the public score only."""

    team: str
    timestamp: datetime
    public_score: float


def _utc(ts: datetime) -> datetime:
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


class Leaderboard:
    """Single-writer leaderboard state backed by an append-only journal.

    Appending to the journal is the linearization point; concurrent callers
    must serialize ``record_submission`` themselves.
    """

    def __init__(
        self,
        truth: Mapping[str, str],
        split: EvaluationSplit,
        limit_per_day: int = 2,
        journal_path: str | Path | None = None,
        vocabulary: Iterable[str] | None = None,
    ) -> None:
        if set(truth) != split.all_ids:
            raise ValueError("truth ids and split ids differ")
        if limit_per_day < 1:
            raise ValueError("limit_per_day must be >= 1")
        self.truth = dict(truth)
        self.split = split
        self.limit_per_day = limit_per_day
        self.vocabulary = set(vocabulary) if vocabulary is not None else set(self.truth.values())
        self.journal_path = Path(journal_path) if journal_path is not None else None
        self.entries: list[JournalEntry] = []
        self.finalized = False
        if self.journal_path is not None and self.journal_path.exists():
            self.entries = read_journal(self.journal_path)

    def _append(self, entry: JournalEntry) -> None:
        self.entries.append(entry)
        if self.journal_path is None:
            return
        fresh = not self.journal_path.exists()
        with self.journal_path.open("a", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if fresh:
                writer.writerow(JOURNAL_COLUMNS)
            writer.writerow(_journal_row(entry))

    def submissions_on(self, team: str, ts: datetime) -> int:
        day = _utc(ts).date()
        return sum(1 for e in self.entries if e.accepted and e.team == team and e.timestamp.date() == day)

    def record_submission(self, team: str, timestamp: datetime, predictions: Mapping[str, str]) -> SubmissionReceipt:
        if self.finalized:
            raise AscError("the competition has ended")
        ts = _utc(timestamp)
        extra = set(predictions) - self.split.all_ids
        if extra:
            raise AscError(f"submission contains unknown id(s) {sorted(extra)[:10]}")
        if self.submissions_on(team, ts) >= self.limit_per_day:
            self._append(JournalEntry(team, ts, None, None, False))
            next_day = datetime.combine(ts.date() + timedelta(days=1), datetime.min.time(), timezone.utc)
            raise SubmissionRejected(team, next_day)
        public = score_submission(predictions, self.truth, sorted(self.split.public_ids), self.vocabulary)
        private = score_submission(predictions, self.truth, sorted(self.split.private_ids), self.vocabulary)
        self._append(JournalEntry(team, ts, public, private, True))
        return SubmissionReceipt(team, ts, public)

    def public_standings(self) -> list[tuple[int, str, float]]:
        """(rank, team, best public score), best first; equal scores ordered by team name."""
        return _rank(self.entries, "public_score")

    def finalize(self) -> None:
        self.finalized = True

    def final_ranking(self) -> list[tuple[int, str, float]]:
        """(rank, team, best private score), best first. Only available after finalize()."""
        if not self.finalized:
            raise AscError("private scores are hidden until the competition is finalized")
        return _rank(self.entries, "private_score")


def _rank(entries: list[JournalEntry], attr: str) -> list[tuple[int, str, float]]:
    best: dict[str, float] = {}
    for e in entries:
        if e.accepted:
            score = getattr(e, attr)
            best[e.team] = max(best.get(e.team, -1.0), score)
    ordered = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(i + 1, team, score) for i, (team, score) in enumerate(ordered)]


def _fmt_score(v: float | None) -> str:
    return "" if v is None else repr(v)


def _parse_score(v: str) -> float | None:
    return float(v) if v else None


def _journal_row(e: JournalEntry) -> list[str]:
    return [e.team, e.timestamp.isoformat(), _fmt_score(e.public_score), _fmt_score(e.private_score), str(int(e.accepted))]


def read_journal(path: str | Path) -> list[JournalEntry]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != JOURNAL_COLUMNS:
            raise FormatError(f"{path}: expected header {','.join(JOURNAL_COLUMNS)}")
        out = []
        for row in reader:
            out.append(
                JournalEntry(
                    row["team"],
                    _utc(datetime.fromisoformat(row["timestamp"])),
                    _parse_score(row["public_score"]),
                    _parse_score(row["private_score"]),
                    row["accepted"] == "1",
                )
            )
    return out


def read_submission(path: str | Path) -> dict[str, str]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["segment_id", "scene_label"]:
            raise FormatError(f"{path}: expected header segment_id,scene_label")
        out: dict[str, str] = {}
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"{path}: malformed row {row}")
            if row[0] in out:
                raise FormatError(f"{path}: duplicate prediction for {row[0]!r}")
            out[row[0]] = row[1]
    return out


def write_submission(path: str | Path, predictions: Mapping[str, str]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["segment_id", "scene_label"])
        for sid, label in predictions.items():
            writer.writerow([sid, label])


def read_truth(path: str | Path) -> tuple[dict[str, str], EvaluationSplit]:
    truth: dict[str, str] = {}
    public, private = set(), set()
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["segment_id", "scene_label", "subset"]:
            raise FormatError(f"{path}: expected header segment_id,scene_label,subset")
        for row in reader:
            if not row:
                continue
            if len(row) != 3 or row[2] not in (PUBLIC, PRIVATE):
                raise FormatError(f"{path}: malformed row {row}")
            if row[0] in truth:
                raise FormatError(f"{path}: duplicate id {row[0]!r}")
            truth[row[0]] = row[1]
            (public if row[2] == PUBLIC else private).add(row[0])
    return truth, EvaluationSplit(frozenset(public), frozenset(private))


def write_truth(path: str | Path, truth: Mapping[str, str], split: EvaluationSplit) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["segment_id", "scene_label", "subset"])
        for sid in sorted(truth):
            writer.writerow([sid, truth[sid], split.subset_of(sid)])
