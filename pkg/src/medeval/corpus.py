"""Loading, validation, and snapshotting of clinical-note corpora.

Notes follow the MEDEC release layout: one record per note, the note text
pre-segmented into sentences, a binary error flag, and for flagged notes the
offending sentence id plus a gold corrected sentence.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "medeval-corpus"
SNAPSHOT_VERSION = 1

# Values treated as "absent" in tabular inputs, case-insensitive.
NA_MARKERS = frozenset({"", "na", "n/a", "nan", "none", "null"})


class CorpusError(Exception):
    """Base for corpus loading and validation failures."""


class MissingColumn(CorpusError):
    def __init__(self, column: str, path: str | None = None):
        self.column = column
        super().__init__(f"missing column {column!r}" + (f" in {path}" if path else ""))


class InvalidFlag(CorpusError):
    def __init__(self, note_id: str, detail: str):
        self.note_id = note_id
        super().__init__(f"note {note_id!r}: {detail}")


class DanglingErrorSentenceId(CorpusError):
    def __init__(self, note_id: str, sentence_id: str):
        self.note_id = note_id
        self.sentence_id = sentence_id
        super().__init__(
            f"note {note_id!r}: error_sentence_id {sentence_id!r} does not match any sentence"
        )


class DuplicateNoteId(CorpusError):
    def __init__(self, note_id: str):
        self.note_id = note_id
        super().__init__(f"duplicate note_id {note_id!r}")


class EmptyText(CorpusError):
    def __init__(self, note_id: str):
        self.note_id = note_id
        super().__init__(f"note {note_id!r} has no sentences")


class SnapshotFormatError(CorpusError):
    """Snapshot header missing, malformed, or of an unsupported version."""


class Collection(str, Enum):
    MS = "MS"
    UW = "UW"


class Split(str, Enum):
    TRAIN = "Train"
    VALIDATION = "Validation"
    TEST = "Test"


class ErrorType(str, Enum):
    DIAGNOSIS = "Diagnosis"
    MANAGEMENT = "Management"
    TREATMENT = "Treatment"
    PHARMACOTHERAPY = "Pharmacotherapy"
    CAUSAL_ORGANISM = "CausalOrganism"

    @property
    def display_name(self) -> str:
        return "Causal Organism" if self is ErrorType.CAUSAL_ORGANISM else self.value


def parse_error_type(raw: str) -> ErrorType:
    key = "".join(ch for ch in raw.lower() if ch.isalnum())
    for et in ErrorType:
        if "".join(ch for ch in et.value.lower() if ch.isalnum()) == key:
            return et
    raise CorpusError(f"unknown error type {raw!r}")


class Sentence(NamedTuple):
    sentence_id: str
    text: str


@dataclass(frozen=True, slots=True)
class ClinicalNote:
    note_id: str
    collection: Collection
    split: Split
    sentences: tuple[Sentence, ...]
    error_flag: int
    error_sentence_id: str | None = None
    gold_correction: str | None = None
    error_type: ErrorType | None = None

    def __post_init__(self):
        if not self.sentences:
            raise EmptyText(self.note_id)
        ids = [s.sentence_id for s in self.sentences]
        if len(set(ids)) != len(ids):
            raise InvalidFlag(self.note_id, "duplicate sentence ids")
        if self.error_flag not in (0, 1):
            raise InvalidFlag(self.note_id, f"error_flag must be 0 or 1, got {self.error_flag!r}")
        if self.error_flag == 1:
            if self.error_sentence_id is None:
                raise InvalidFlag(self.note_id, "error_flag=1 without error_sentence_id")
            if self.error_sentence_id not in set(ids):
                raise DanglingErrorSentenceId(self.note_id, self.error_sentence_id)
        else:
            for name in ("error_sentence_id", "gold_correction", "error_type"):
                if getattr(self, name) is not None:
                    raise InvalidFlag(self.note_id, f"error_flag=0 but {name} is present")
        if self.error_flag == 1 and self.gold_correction is not None:
            flagged = self.sentence_text(self.error_sentence_id)
            if flagged is not None and flagged.strip() == self.gold_correction.strip():
                logger.warning(
                    "note %s: gold correction equals the flagged sentence text", self.note_id
                )

    @property
    def sentence_ids(self) -> tuple[str, ...]:
        return tuple(s.sentence_id for s in self.sentences)

    def sentence_text(self, sentence_id: str | None) -> str | None:
        for s in self.sentences:
            if s.sentence_id == sentence_id:
                return s.text
        return None


def segment_text(raw_text: str, note_id: str = "?") -> tuple[Sentence, ...]:
    """Split pre-segmented note text into sentences.

    One sentence per line. When every non-blank line carries an ``id|text``
    marker (id non-empty, no internal whitespace), ids are taken verbatim;
    otherwise ids are assigned as 0-based decimal strings in order.
    """
    lines = [ln.rstrip("\r") for ln in raw_text.split("\n")]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise EmptyText(note_id)

    def marker(ln: str) -> tuple[str, str] | None:
        head, sep, rest = ln.partition("|")
        head = head.strip()
        if sep and head and not any(c.isspace() for c in head):
            return head, rest
        return None

    parsed = [marker(ln) for ln in lines]
    if all(p is not None for p in parsed):
        return tuple(Sentence(sid, text) for sid, text in parsed)  # type: ignore[misc]
    return tuple(Sentence(str(i), ln) for i, ln in enumerate(lines))


@dataclass(frozen=True, slots=True)
class ColumnSchema:
    """Maps logical fields to input-file column names.

    Defaults match the public MEDEC release. ``collection`` and ``split``
    columns are optional; when absent the loader's file-level values apply.
    """

    note_id: str = "Text ID"
    text: str = "Sentences"
    error_flag: str = "Error Flag"
    error_sentence_id: str = "Error Sentence ID"
    gold_correction: str = "Corrected Sentence"
    error_type: str | None = "Error Type"
    collection: str | None = None
    split: str | None = None


DEFAULT_SCHEMA = ColumnSchema()


def _clean(value: str | None) -> str | None:
    if value is None:
        return None
    v = value.strip()
    return None if v.lower() in NA_MARKERS else v


def load_corpus(
    path: str | Path,
    *,
    collection: Collection,
    split: Split,
    schema: ColumnSchema = DEFAULT_SCHEMA,
    delimiter: str | None = None,
) -> list[ClinicalNote]:
    """Load notes from a delimited file.

    Args:
        path: CSV or TSV file with a header row.
        collection: collection tag applied when the schema has no column for it.
        split: split tag applied when the schema has no column for it.
        schema: logical-field to column-name mapping.
        delimiter: override; default infers ',' or '\\t' from the extension.

    Raises:
        MissingColumn, InvalidFlag, DanglingErrorSentenceId, DuplicateNoteId,
        EmptyText on malformed inputs.
    """
    path = Path(path)
    if delimiter is None:
        delimiter = "\t" if path.suffix.lower() in (".tsv", ".tab") else ","
    notes: list[ClinicalNote] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        required = [schema.note_id, schema.text, schema.error_flag,
                    schema.error_sentence_id, schema.gold_correction]
        for col in required:
            if col not in header:
                raise MissingColumn(col, str(path))
        has_type = schema.error_type is not None and schema.error_type in header
        for row in reader:
            note_id = (row.get(schema.note_id) or "").strip()
            if not note_id:
                raise InvalidFlag("?", "row without a note id")
            if note_id in seen:
                raise DuplicateNoteId(note_id)
            seen.add(note_id)

            raw_flag = _clean(row.get(schema.error_flag))
            if raw_flag not in ("0", "1"):
                raise InvalidFlag(note_id, f"error_flag must be 0 or 1, got {raw_flag!r}")
            flag = int(raw_flag)

            sid = _clean(row.get(schema.error_sentence_id))
            if sid == "-1":  # release marks correct notes with -1
                sid = None
            correction = _clean(row.get(schema.gold_correction))
            if correction is not None:
                # a correction is one sentence; quoted CSV fields can smuggle
                # newlines in, which would break single-line answer rendering
                correction = " ".join(correction.split())
            etype_raw = _clean(row.get(schema.error_type)) if has_type else None
            etype = parse_error_type(etype_raw) if etype_raw else None

            row_collection = collection
            if schema.collection and _clean(row.get(schema.collection)):
                row_collection = Collection(row[schema.collection].strip())
            row_split = split
            if schema.split and _clean(row.get(schema.split)):
                row_split = Split(row[schema.split].strip())

            text = row.get(schema.text) or ""
            notes.append(
                ClinicalNote(
                    note_id=note_id,
                    collection=row_collection,
                    split=row_split,
                    sentences=segment_text(text, note_id),
                    error_flag=flag,
                    error_sentence_id=sid if flag == 1 else None,
                    gold_correction=correction if flag == 1 else None,
                    error_type=etype if flag == 1 else None,
                )
            )
    logger.info("loaded %d notes from %s", len(notes), path)
    return notes


def note_to_record(note: ClinicalNote) -> dict:
    return {
        "note_id": note.note_id,
        "collection": note.collection.value,
        "split": note.split.value,
        "sentences": [[s.sentence_id, s.text] for s in note.sentences],
        "error_flag": note.error_flag,
        "error_sentence_id": note.error_sentence_id,
        "gold_correction": note.gold_correction,
        "error_type": note.error_type.value if note.error_type else None,
    }


def note_from_record(rec: dict) -> ClinicalNote:
    return ClinicalNote(
        note_id=rec["note_id"],
        collection=Collection(rec["collection"]),
        split=Split(rec["split"]),
        sentences=tuple(Sentence(sid, text) for sid, text in rec["sentences"]),
        error_flag=rec["error_flag"],
        error_sentence_id=rec.get("error_sentence_id"),
        gold_correction=rec.get("gold_correction"),
        error_type=ErrorType(rec["error_type"]) if rec.get("error_type") else None,
    )


def corpus_fingerprint(notes: Sequence[ClinicalNote]) -> str:
    """Order-independent content hash of a set of notes."""
    digest = hashlib.sha256()
    for note in sorted(notes, key=lambda n: n.note_id):
        digest.update(json.dumps(note_to_record(note), sort_keys=True, ensure_ascii=True).encode())
        digest.update(b"\x00")
    return digest.hexdigest()


def save_snapshot(notes: Sequence[ClinicalNote], path: str | Path) -> str:
    """Write a line-delimited snapshot; returns the corpus fingerprint."""
    fingerprint = corpus_fingerprint(notes)
    header = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "count": len(notes),
        "fingerprint": fingerprint,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True, ensure_ascii=True) + "\n")
        for note in notes:
            fh.write(json.dumps(note_to_record(note), sort_keys=True, ensure_ascii=True) + "\n")
    return fingerprint


def load_snapshot(path: str | Path) -> tuple[list[ClinicalNote], str]:
    """Read a snapshot; returns (notes, fingerprint). Re-validates every note."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise SnapshotFormatError(f"{path}: empty snapshot")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise SnapshotFormatError(f"{path}: malformed header") from exc
        if header.get("format") != SNAPSHOT_FORMAT:
            raise SnapshotFormatError(f"{path}: not a corpus snapshot")
        if header.get("version") != SNAPSHOT_VERSION:
            raise SnapshotFormatError(
                f"{path}: unsupported snapshot version {header.get('version')!r}"
            )
        notes = [note_from_record(json.loads(line)) for line in fh if line.strip()]
    seen: set[str] = set()
    for note in notes:
        if note.note_id in seen:
            raise DuplicateNoteId(note.note_id)
        seen.add(note.note_id)
    actual = corpus_fingerprint(notes)
    stored = header.get("fingerprint")
    if stored and stored != actual:
        raise SnapshotFormatError(f"{path}: fingerprint mismatch, snapshot edited or corrupt")
    return notes, actual


@dataclass
class StatsCell:
    note_count: int = 0
    error_count: int = 0
    by_error_type: dict[str, int] = field(default_factory=dict)

    @property
    def error_rate(self) -> float | None:
        if self.note_count == 0:
            return None
        return self.error_count / self.note_count


def corpus_stats(notes: Iterable[ClinicalNote]) -> dict[tuple[str, str], StatsCell]:
    """Per (split, collection) counts plus a ('Total', 'All') row."""
    cells: dict[tuple[str, str], StatsCell] = {}
    total = StatsCell()
    for note in notes:
        key = (note.split.value, note.collection.value)
        cell = cells.setdefault(key, StatsCell())
        for c in (cell, total):
            c.note_count += 1
            if note.error_flag == 1:
                c.error_count += 1
                if note.error_type:
                    name = note.error_type.display_name
                    c.by_error_type[name] = c.by_error_type.get(name, 0) + 1
    cells[("Total", "All")] = total
    return cells
