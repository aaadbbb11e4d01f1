"""Top-K label vocabulary, one-hot admission labels, note/label join, splitting and EDA."""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import CodeDescriptor, CodeKind, CodeRecord, NoteEvent


@dataclass(frozen=True)
class LabelEntry:
    code: str
    kind: CodeKind
    short_title: str

    @property
    def name(self) -> str:
        return f"{self.kind.value}_{self.code}"


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered label columns: top-k diagnoses followed by top-k procedures."""

    entries: tuple[LabelEntry, ...]
    k: int

    def __post_init__(self):
        keys = [(e.code, e.kind) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ValueError("label vocabulary entries must be unique by (code, kind)")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def position(self) -> dict[tuple[str, CodeKind], int]:
        return {(e.code, e.kind): i for i, e in enumerate(self.entries)}

    def permuted(self, order: Sequence[int]) -> "LabelVocabulary":
        return LabelVocabulary(tuple(self.entries[i] for i in order), self.k)


@dataclass(frozen=True)
class LabeledNote:
    admission_id: int
    text: str
    labels: np.ndarray


@dataclass
class DatasetSplit:
    train: list[LabeledNote]
    test: list[LabeledNote]
    seed: int
    ratio: float


def rank_codes_by_frequency(
    records: Iterable[CodeRecord], k: int, kind: CodeKind | str | None = None
) -> list[str]:
    """Top-``k`` codes by number of distinct admissions; ties go to the smaller code string."""
    if k < 1:
        raise ValueError("k must be >= 1")
    kind = None if kind is None else CodeKind(kind)
    admissions: dict[str, set[int]] = defaultdict(set)
    for rec in records:
        if kind is None or rec.kind is kind:
            admissions[rec.code].add(rec.admission_id)
    ranked = sorted(admissions, key=lambda code: (-len(admissions[code]), code))
    return ranked[:k]


def build_label_vocabulary(
    diag_records: Iterable[CodeRecord],
    proc_records: Iterable[CodeRecord],
    k: int,
    descriptors: Mapping[tuple[str, CodeKind], CodeDescriptor] | None = None,
) -> LabelVocabulary:
    descriptors = descriptors or {}
    entries = []
    for kind, records in ((CodeKind.DIAGNOSIS, diag_records), (CodeKind.PROCEDURE, proc_records)):
        for code in rank_codes_by_frequency(records, k, kind):
            desc = descriptors.get((code, kind))
            entries.append(LabelEntry(code, kind, desc.short_title if desc else code))
    return LabelVocabulary(tuple(entries), k)


def one_hot_encode_admissions(
    records: Iterable[CodeRecord], vocab: LabelVocabulary
) -> dict[int, np.ndarray]:
    """Admission ID to label bit vector. All-zero admissions are left out."""
    if len(vocab) == 0:
        raise ValueError("label vocabulary is empty")
    position = vocab.position()
    vectors: dict[int, np.ndarray] = {}
    for rec in records:
        i = position.get((rec.code, rec.kind))
        if i is None:
            continue
        vec = vectors.get(rec.admission_id)
        if vec is None:
            vec = vectors[rec.admission_id] = np.zeros(len(vocab), dtype=np.int8)
        vec[i] = 1
    return dict(sorted(vectors.items()))


def join_notes_with_labels(
    notes: Iterable[NoteEvent], label_map: Mapping[int, np.ndarray]
) -> list[LabeledNote]:
    """Inner join on admission ID; each note inherits its admission's label vector."""
    return [
        LabeledNote(note.admission_id, note.text, label_map[note.admission_id])
        for note in notes
        if note.admission_id in label_map
    ]


def round_half_up(value: Fraction, places: int = 2) -> float:
    scale = 10**places
    return math.floor(value * scale + Fraction(1, 2)) / scale


def coverage_fraction(n_labeled_admissions: int, n_total_admissions: int) -> float:
    """Percentage of admissions covered, rounded half-up to two decimals.

    >>> coverage_fraction(27521, 58000)
    47.45
    """
    if n_total_admissions <= 0:
        raise ValueError("total admission count must be positive")
    if not 0 <= n_labeled_admissions <= n_total_admissions:
        raise ValueError("labeled admissions must lie in [0, total]")
    return round_half_up(Fraction(100 * n_labeled_admissions, n_total_admissions))


def split_train_test(
    rows: Sequence[LabeledNote],
    ratio: float = 0.8,
    seed: int = 0,
    group_by_admission: bool = False,
) -> DatasetSplit:
    """Seeded shuffle then cut at ``floor(ratio * n)``.

    With ``group_by_admission`` whole admissions are assigned, in shuffled
    order, to train while they still fit under the target size; the train
    size can then fall short of ``floor(ratio * n)``.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n = len(rows)
    # Decimal reading of the ratio so that e.g. 0.29 * 100 floors to 29.
    target = math.floor(Fraction(repr(float(ratio))) * n)
    rng = np.random.default_rng(seed)
    if not group_by_admission:
        order = rng.permutation(n)
        train = [rows[i] for i in order[:target]]
        test = [rows[i] for i in order[target:]]
        return DatasetSplit(train, test, seed, ratio)

    groups: dict[int, list[int]] = defaultdict(list)
    for i, row in enumerate(rows):
        groups[row.admission_id].append(i)
    admission_ids = sorted(groups)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for j in rng.permutation(len(admission_ids)):
        members = groups[admission_ids[j]]
        if len(train_idx) + len(members) <= target:
            train_idx.extend(members)
        else:
            test_idx.extend(members)
    return DatasetSplit([rows[i] for i in train_idx], [rows[i] for i in test_idx], seed, ratio)


@dataclass(frozen=True)
class LabelStats:
    name: str
    short_title: str
    note_count: int
    mean_word_count: float
    empty: bool


def eda_report(rows: Sequence[LabeledNote], vocab: LabelVocabulary) -> list[LabelStats]:
    """Per label: number of notes carrying it and their mean whitespace word count."""
    counts = np.zeros(len(vocab), dtype=np.int64)
    words = np.zeros(len(vocab), dtype=np.int64)
    for row in rows:
        n_words = len(row.text.split())
        hit = np.asarray(row.labels, dtype=bool)
        counts[hit] += 1
        words[hit] += n_words
    stats = []
    for i, entry in enumerate(vocab):
        n = int(counts[i])
        stats.append(
            LabelStats(entry.name, entry.short_title, n, words[i] / n if n else 0.0, n == 0)
        )
    return stats


def write_eda_csv(path: str | os.PathLike, stats: Sequence[LabelStats]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["label", "short_title", "note_count", "mean_word_count", "no_notes"])
        for s in stats:
            writer.writerow(
                [s.name, s.short_title, s.note_count, f"{s.mean_word_count:.4f}", int(s.empty)]
            )


# ---------------------------------------------------------------------------
# Prepared dataset files
# ---------------------------------------------------------------------------

def write_labeled_csv(
    path: str | os.PathLike, rows: Sequence[LabeledNote], vocab: LabelVocabulary
) -> None:
    """``admission_id, text, <kind>_<code>...`` with one 0/1 column per label."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["admission_id", "text", *vocab.names])
        for row in rows:
            writer.writerow([row.admission_id, row.text, *(int(b) for b in row.labels)])


def read_labeled_csv(path: str | os.PathLike) -> tuple[list[str], list[LabeledNote]]:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle, strict=True)
        header = next(reader)
        if header[:2] != ["admission_id", "text"]:
            raise ValueError(f"{path}: not a prepared dataset file")
        names = header[2:]
        rows = [
            LabeledNote(int(r[0]), r[1], np.array([int(b) for b in r[2:]], dtype=np.int8))
            for r in reader
        ]
    return names, rows


def write_label_files(directory: str | os.PathLike, vocab: LabelVocabulary) -> None:
    """``labels.txt`` (one label per line) and ``label_vocabulary.csv`` with titles."""
    directory = Path(directory)
    (directory / "labels.txt").write_text("".join(name + "\n" for name in vocab.names))
    with open(directory / "label_vocabulary.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["label", "kind", "code", "short_title"])
        for e in vocab:
            writer.writerow([e.name, e.kind.value, e.code, e.short_title])


def read_label_vocabulary(directory: str | os.PathLike) -> LabelVocabulary:
    directory = Path(directory)
    with open(directory / "label_vocabulary.csv", newline="", encoding="utf-8") as handle:
        entries = tuple(
            LabelEntry(row["code"], CodeKind(row["kind"]), row["short_title"])
            for row in csv.DictReader(handle)
        )
    k = sum(e.kind is CodeKind.DIAGNOSIS for e in entries)
    return LabelVocabulary(entries, k)
