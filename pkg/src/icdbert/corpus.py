"""Streaming readers for MIMIC-III shaped CSV tables and a synthetic corpus generator.

The readers accept NOTEEVENTS / DIAGNOSES_ICD / PROCEDURES_ICD / D_ICD_* style
files. Column names default to the MIMIC-III v1.4 headers and can be overridden.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

NOTES_FILE = "NOTEEVENTS.csv"
DIAGNOSES_FILE = "DIAGNOSES_ICD.csv"
PROCEDURES_FILE = "PROCEDURES_ICD.csv"
MANIFEST_FILE = "manifest.json"

NOTE_COLUMNS = {
    "admission_id": "HADM_ID",
    "subject_id": "SUBJECT_ID",
    "category": "CATEGORY",
    "text": "TEXT",
}
CODE_COLUMNS = {
    "admission_id": "HADM_ID",
    "code": "ICD9_CODE",
    "seq_num": "SEQ_NUM",
}
DESCRIPTOR_COLUMNS = {
    "code": "ICD9_CODE",
    "short_title": "SHORT_TITLE",
}

# Full MIMIC-III headers, written by the synthetic generator.
NOTEEVENTS_HEADER = [
    "ROW_ID", "SUBJECT_ID", "HADM_ID", "CHARTDATE", "CHARTTIME", "STORETIME",
    "CATEGORY", "DESCRIPTION", "CGID", "ISERROR", "TEXT",
]
CODES_HEADER = ["ROW_ID", "SUBJECT_ID", "HADM_ID", "SEQ_NUM", "ICD9_CODE"]


class CodeKind(str, enum.Enum):
    DIAGNOSIS = "diagnosis"
    PROCEDURE = "procedure"


class CorpusError(ValueError):
    """Base class for ingest failures."""


class SchemaError(CorpusError):
    pass


class RecordError(CorpusError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class NoteEvent:
    admission_id: int
    subject_id: int
    category: str
    text: str


@dataclass(frozen=True)
class CodeRecord:
    admission_id: int
    code: str
    kind: CodeKind
    seq_num: int


@dataclass(frozen=True)
class CodeDescriptor:
    code: str
    kind: CodeKind
    short_title: str


class RecordStream:
    """Single-pass iterator over parsed CSV records.

    ``rows_read`` counts every data row consumed from the file, ``skipped``
    those dropped (null admission IDs, category filter, or malformed rows in
    lenient mode). ``errors`` keeps the messages of skipped malformed rows.
    """

    def __init__(
        self,
        path: str | os.PathLike,
        required: dict[str, str],
        parse: Callable[[dict[str, str], int], object | None],
        *,
        lenient: bool = False,
        limit: int | None = None,
    ):
        self.path = Path(path)
        self.required = required
        self._parse = parse
        self.lenient = lenient
        self.limit = limit
        self.rows_read = 0
        self.skipped = 0
        self.errors: list[str] = []
        self._started = False

    def __iter__(self) -> Iterator:
        if self._started:
            raise RuntimeError("record streams are single-pass")
        self._started = True
        return self._records()

    def _records(self) -> Iterator:
        with open(self.path, newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle, strict=True)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaError(f"{self.path}: missing header row") from None
            except csv.Error as exc:
                raise RecordError(str(exc), reader.line_num) from None
            positions = {}
            for key, column in self.required.items():
                if column not in header:
                    raise SchemaError(f"{self.path}: missing required column {column!r}")
                positions[key] = header.index(column)
            yielded = 0
            while self.limit is None or yielded < self.limit:
                start_line = reader.line_num + 1
                try:
                    row = next(reader)
                except StopIteration:
                    return
                except csv.Error as exc:
                    # The csv module cannot resynchronise after a broken quote.
                    self.rows_read += 1
                    self._reject(RecordError(str(exc), start_line))
                    return
                self.rows_read += 1
                try:
                    if len(row) != len(header):
                        raise RecordError(
                            f"expected {len(header)} fields, got {len(row)}", start_line
                        )
                    record = self._parse(
                        {key: row[pos] for key, pos in positions.items()}, start_line
                    )
                except RecordError as exc:
                    self._reject(exc)
                    continue
                if record is None:
                    self.skipped += 1
                    continue
                yielded += 1
                yield record

    def _reject(self, error: RecordError) -> None:
        if not self.lenient:
            raise error
        self.skipped += 1
        self.errors.append(str(error))


def _positive_int(value: str, column: str, line: int) -> int:
    try:
        number = int(value.strip())
    except ValueError:
        raise RecordError(f"{column} is not an integer: {value!r}", line) from None
    if number <= 0:
        raise RecordError(f"{column} must be positive, got {number}", line)
    return number


def load_note_events(
    path: str | os.PathLike,
    limit: int | None = None,
    *,
    lenient: bool = False,
    columns: dict[str, str] | None = None,
    categories: Iterable[str] | None = None,
) -> RecordStream:
    """Stream :class:`NoteEvent` rows from a NOTEEVENTS-shaped CSV.

    Rows with an empty admission ID are skipped and counted in both modes;
    real NOTEEVENTS tables carry outpatient notes without one. ``categories``
    keeps only notes whose CATEGORY is listed (all categories by default).
    """
    names = {**NOTE_COLUMNS, **(columns or {})}
    wanted = None if categories is None else {c.strip().lower() for c in categories}

    def parse(fields: dict[str, str], line: int) -> NoteEvent | None:
        if not fields["admission_id"].strip():
            return None
        if wanted is not None and fields["category"].strip().lower() not in wanted:
            return None
        text = fields["text"]
        if not text.strip():
            raise RecordError("empty note text", line)
        return NoteEvent(
            admission_id=_positive_int(fields["admission_id"], names["admission_id"], line),
            subject_id=_positive_int(fields["subject_id"], names["subject_id"], line),
            category=fields["category"],
            text=text,
        )

    return RecordStream(path, names, parse, lenient=lenient, limit=limit)


def load_code_records(
    path: str | os.PathLike,
    kind: CodeKind | str,
    *,
    lenient: bool = False,
    limit: int | None = None,
    columns: dict[str, str] | None = None,
) -> RecordStream:
    """Stream :class:`CodeRecord` rows tagged with ``kind``; duplicates pass through."""
    kind = CodeKind(kind)
    names = {**CODE_COLUMNS, **(columns or {})}

    def parse(fields: dict[str, str], line: int) -> CodeRecord:
        code = fields["code"].strip()
        if not code:
            raise RecordError(f"empty {names['code']}", line)
        return CodeRecord(
            admission_id=_positive_int(fields["admission_id"], names["admission_id"], line),
            code=code,
            kind=kind,
            seq_num=_positive_int(fields["seq_num"], names["seq_num"], line),
        )

    return RecordStream(path, names, parse, lenient=lenient, limit=limit)


def load_code_descriptors(
    path: str | os.PathLike,
    kind: CodeKind | str,
    *,
    columns: dict[str, str] | None = None,
) -> dict[tuple[str, CodeKind], CodeDescriptor]:
    """Read a D_ICD_DIAGNOSES / D_ICD_PROCEDURES style table keyed by (code, kind)."""
    kind = CodeKind(kind)
    names = {**DESCRIPTOR_COLUMNS, **(columns or {})}

    def parse(fields: dict[str, str], line: int) -> CodeDescriptor:
        code = fields["code"].strip()
        if not code:
            raise RecordError(f"empty {names['code']}", line)
        return CodeDescriptor(code=code, kind=kind, short_title=fields["short_title"].strip())

    table: dict[tuple[str, CodeKind], CodeDescriptor] = {}
    stream = RecordStream(path, names, parse)
    for descriptor in stream:
        key = (descriptor.code, descriptor.kind)
        if key in table:
            raise RecordError(f"duplicate descriptor for {descriptor.code}", stream.rows_read + 1)
        table[key] = descriptor
    return table


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

# Every word below is a whole entry of the bundled desk vocabulary, so the
# synthetic notes tokenize without [UNK] and each code maps to one token.
FILLER_WORDS = (
    "patient admitted with history of and the was to no denies pain stable "
    "noted on for in is given discharge home follow up reports without seen"
).split()
DIAGNOSIS_KEYWORDS = (
    "hypertension diabetes sepsis pneumonia asthma anemia arrhythmia fibrillation "
    "cirrhosis hepatitis pancreatitis stroke seizure delirium dementia depression "
    "obesity gout lupus lymphoma leukemia melanoma edema embolism thrombosis "
    "hypothyroidism hyperlipidemia hyponatremia hypokalemia acidosis alkalosis "
    "bronchitis cellulitis colitis gastritis nephritis neuropathy osteoporosis "
    "psoriasis sarcoidosis tuberculosis urosepsis"
).split()
PROCEDURE_KEYWORDS = (
    "intubation extubation catheter transfusion dialysis bronchoscopy endoscopy "
    "colonoscopy angiography angioplasty biopsy bypass craniotomy debridement "
    "drainage gastrostomy laparotomy lumbar paracentesis pacemaker stent "
    "thoracentesis tracheostomy ultrasound ventilation vaccination arteriogram "
    "cholecystectomy appendectomy hemodialysis infusion ligation suture "
    "cystoscopy cardioversion defibrillator embolectomy excision fixation "
    "incision injection"
).split()
CATEGORIES = ("Discharge summary", "Nursing", "Physician", "Radiology")


@dataclass
class SyntheticCorpus:
    directory: Path
    notes: list[NoteEvent]
    diagnoses: list[CodeRecord]
    procedures: list[CodeRecord]
    paths: dict[str, Path] = field(default_factory=dict)


def synthetic_code(kind: CodeKind, index: int) -> str:
    if kind is CodeKind.DIAGNOSIS:
        return f"{100 + index:03d}.{(index * 7) % 10}"
    return f"{10 + index // 10:02d}.{index % 10}{(index * 3) % 10}"


def synthetic_keyword(kind: CodeKind, index: int) -> str:
    words = DIAGNOSIS_KEYWORDS if kind is CodeKind.DIAGNOSIS else PROCEDURE_KEYWORDS
    if index < len(words):
        return words[index]
    # Rare codes beyond the keyword list spell out their index letter by letter.
    letters = []
    n = index
    while True:
        letters.append(chr(ord("a") + n % 26))
        n //= 26
        if n == 0:
            break
    return ("zd" if kind is CodeKind.DIAGNOSIS else "zp") + "".join(letters)


def _zipf_weights(n: int, exponent: float) -> np.ndarray:
    weights = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return weights / weights.sum()


def _note_text(rng: np.random.Generator, keywords: list[str]) -> str:
    n_filler = int(rng.integers(2, 7))
    words = [FILLER_WORDS[i] for i in rng.integers(0, len(FILLER_WORDS), size=n_filler)]
    for keyword in keywords:
        for _ in range(int(rng.integers(1, 4))):
            words.insert(int(rng.integers(0, len(words) + 1)), keyword)
    if rng.random() < 0.3:
        words.insert(int(rng.integers(0, len(words) + 1)), "[**2101-10-4**]")
    if rng.random() < 0.5:
        words[0] = words[0].capitalize()
    # Break lines and add punctuation so the CSV writer must quote.
    cut = int(rng.integers(1, len(words)))
    return " ".join(words[:cut]) + ",\n" + " ".join(words[cut:]) + "."


def generate_synthetic_corpus(
    out_dir: str | os.PathLike,
    seed: int,
    n_admissions: int,
    n_codes: int,
    zipf_exponent: float = 1.1,
) -> SyntheticCorpus:
    """Write NOTEEVENTS / DIAGNOSES_ICD / PROCEDURES_ICD shaped files.

    Code frequencies are Zipf-distributed. Admission ``i < n_codes`` is also
    seeded with diagnosis ``i`` and procedure ``i`` so every code occurs. Each
    note of an admission contains the keyword of every code the admission
    carries, which makes the code assignment learnable from the text.
    """
    if n_admissions < 1:
        raise ValueError("n_admissions must be >= 1")
    if n_codes < 1:
        raise ValueError("n_codes must be >= 1")
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    weights = _zipf_weights(n_codes, zipf_exponent)

    notes: list[NoteEvent] = []
    diagnoses: list[CodeRecord] = []
    procedures: list[CodeRecord] = []
    for i in range(n_admissions):
        admission_id = 100001 + i
        subject_id = 10001 + i // 2
        carried: dict[CodeKind, list[int]] = {}
        for kind, low, high in ((CodeKind.DIAGNOSIS, 1, 4), (CodeKind.PROCEDURE, 0, 2)):
            count = int(rng.integers(low, high + 1))
            picks = [int(j) for j in rng.choice(n_codes, size=count, p=weights)]
            if i < n_codes:
                picks.append(i)
            unique = list(dict.fromkeys(picks))
            carried[kind] = unique
            target = diagnoses if kind is CodeKind.DIAGNOSIS else procedures
            for seq, index in enumerate(unique, start=1):
                target.append(CodeRecord(admission_id, synthetic_code(kind, index), kind, seq))
            # A repeated code row, as seen in real MIMIC tables.
            if unique and rng.random() < 0.1:
                target.append(
                    CodeRecord(admission_id, synthetic_code(kind, unique[0]), kind, len(unique) + 1)
                )
        keywords = [synthetic_keyword(k, j) for k in CodeKind for j in carried[k]]
        for _ in range(int(rng.integers(1, 4))):
            order = rng.permutation(len(keywords))
            notes.append(
                NoteEvent(
                    admission_id=admission_id,
                    subject_id=subject_id,
                    category=CATEGORIES[int(rng.integers(0, len(CATEGORIES)))],
                    text=_note_text(rng, [keywords[j] for j in order]),
                )
            )

    paths = {
        "notes": directory / NOTES_FILE,
        "diagnoses": directory / DIAGNOSES_FILE,
        "procedures": directory / PROCEDURES_FILE,
    }
    with open(paths["notes"], "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(NOTEEVENTS_HEADER)
        for row_id, note in enumerate(notes, start=1):
            day = 1 + (note.admission_id % 28)
            writer.writerow([
                row_id, note.subject_id, note.admission_id, f"2101-10-{day:02d}",
                "", "", note.category, "Report", "", "", note.text,
            ])
    for key, records in (("diagnoses", diagnoses), ("procedures", procedures)):
        with open(paths[key], "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(CODES_HEADER)
            for row_id, rec in enumerate(records, start=1):
                subject_id = 10001 + (rec.admission_id - 100001) // 2
                writer.writerow([row_id, subject_id, rec.admission_id, rec.seq_num, rec.code])

    manifest = {
        "generator": "icdbert.synthetic",
        "seed": seed,
        "n_admissions": n_admissions,
        "n_codes": n_codes,
        "zipf_exponent": zipf_exponent,
        "files": {
            key: {"name": path.name, "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}
            for key, path in paths.items()
        },
    }
    paths["manifest"] = directory / MANIFEST_FILE
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return SyntheticCorpus(directory, notes, diagnoses, procedures, paths)
