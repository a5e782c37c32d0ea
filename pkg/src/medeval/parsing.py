"""Strict parsing of model output into structured predictions.

The expected grammar is exactly one of:

    CORRECT
    <sentence_id> <corrected sentence>

Anything else goes through a fixed recovery ladder; if that fails too, the
note is scored under the configured failed-parse policy. Parsing is total:
it never raises on model output.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

from .corpus import ClinicalNote

logger = logging.getLogger(__name__)

PREDICTIONS_FORMAT = "medeval-predictions"
PREDICTIONS_VERSION = 1

# Sentinel sentence id for unparseable outputs scored as "error claimed".
# Never matches a real sentence id, so it can only be wrong.
SENTINEL_SENTENCE_ID = "__unparsed__"


class ParsingError(Exception):
    pass


class SchemaVersionMismatch(ParsingError):
    pass


class ParseStatus(str, Enum):
    CLEAN = "Clean"
    RECOVERED = "Recovered"
    FAILED = "Failed"


class FailedParsePolicy(str, Enum):
    # Score an unparseable output as a wrong error claim (default): it counts
    # against flag accuracy on correct notes and can never match a sentence.
    FLAG_ERROR = "flag_error"
    # Score it as a CORRECT claim instead.
    FLAG_CORRECT = "flag_correct"


@dataclass(frozen=True, slots=True)
class Prediction:
    note_id: str
    flag: int
    sentence_id: str | None
    correction: str | None
    raw_text: str
    parse_status: ParseStatus

    def __post_init__(self):
        if self.flag not in (0, 1):
            raise ParsingError(f"flag must be 0 or 1, got {self.flag!r}")
        if self.parse_status is ParseStatus.FAILED:
            return
        if self.flag == 1 and (self.sentence_id is None or not self.correction):
            raise ParsingError(f"note {self.note_id!r}: flag=1 needs sentence_id and correction")
        if self.flag == 0 and (self.sentence_id is not None or self.correction is not None):
            raise ParsingError(f"note {self.note_id!r}: flag=0 excludes sentence fields")


_CORRECT_STRICT = re.compile(r"CORRECT\Z")
_CORRECT_LOOSE = re.compile(r"correct[.!]?\Z", re.IGNORECASE)
# the answer contract is a single line; multi-line output is off-grammar and
# must go through recovery so trailing commentary gets cut, not kept
_ERROR_LINE = re.compile(r"(\S+)[ \t]+(\S[^\n]*)\Z")
_FENCE = re.compile(r"```[a-zA-Z]*\n?(.*?)```", re.DOTALL)
_LABEL = re.compile(r"(?i)^(?:final answer|answer|output|response|correction)\s*[:\-]\s*")
_SENTENCE_PREFIX = re.compile(r"(?i)^sentence(?:\s+id)?\s*[#:]?\s*(\S+?)\s*[.:\-]?\s+(\S[^\n]*)\Z")
_ID_PUNCT = re.compile(r"^(\S+?)\s*[:|]\s*(\S[^\n]*)\Z")


def _try_grammar(text: str, sentence_ids: frozenset[str]) -> tuple[int, str | None, str | None] | None:
    """Match the exact output grammar; None when it does not apply."""
    if _CORRECT_STRICT.fullmatch(text):
        return 0, None, None
    m = _ERROR_LINE.fullmatch(text)
    if m and m.group(1) in sentence_ids:
        return 1, m.group(1), m.group(2).strip()
    return None


def _recovery_steps(text: str, sentence_ids: frozenset[str]):
    """Yield progressively normalized candidates, most conservative first."""
    m = _FENCE.search(text)
    if m:
        text = m.group(1).strip()
        yield text
    for quote in ('"', "'", "`"):
        if len(text) >= 2 and text.startswith(quote) and text.endswith(quote):
            text = text[1:-1].strip()
            yield text
            break
    stripped_label = _LABEL.sub("", text)
    if stripped_label != text:
        text = stripped_label.strip()
        yield text
    if "\n" in text:
        # chatty output: a valid answer line followed by commentary
        text = next((ln.strip() for ln in text.splitlines() if ln.strip()), "")
        yield text
    if _CORRECT_LOOSE.fullmatch(text):
        yield "CORRECT"
    m = _SENTENCE_PREFIX.match(text)
    if m:
        yield f"{m.group(1)} {m.group(2)}"
        text = f"{m.group(1)} {m.group(2)}"
    m = _ID_PUNCT.match(text)
    if m and (m.group(1) in sentence_ids or m.group(1).isdigit()):
        yield f"{m.group(1)} {m.group(2)}"
        text = f"{m.group(1)} {m.group(2)}"
    # numeric id normalization, recovery only: "03" -> "3"
    m = _ERROR_LINE.fullmatch(text)
    if m and m.group(1) not in sentence_ids and m.group(1).isdigit():
        canonical = str(int(m.group(1)))
        if canonical in sentence_ids:
            yield f"{canonical} {m.group(2)}"


def parse_completion(raw_text: str, note: ClinicalNote,
                     policy: FailedParsePolicy = FailedParsePolicy.FLAG_ERROR) -> Prediction:
    """Parse one completion against the note it answers. Total: never raises."""
    ids = frozenset(note.sentence_ids)
    text = (raw_text or "").strip()

    hit = _try_grammar(text, ids)
    if hit is not None:
        flag, sid, corr = hit
        return Prediction(note.note_id, flag, sid, corr, raw_text, ParseStatus.CLEAN)

    seen: set[str] = set()
    for candidate in _recovery_steps(text, ids):
        if candidate in seen:
            continue
        seen.add(candidate)
        hit = _try_grammar(candidate, ids)
        if hit is not None:
            flag, sid, corr = hit
            logger.debug("note %s: recovered output %r", note.note_id, candidate[:60])
            return Prediction(note.note_id, flag, sid, corr, raw_text, ParseStatus.RECOVERED)

    logger.debug("note %s: unparseable output %r", note.note_id, text[:60])
    if policy is FailedParsePolicy.FLAG_CORRECT:
        return Prediction(note.note_id, 0, None, None, raw_text, ParseStatus.FAILED)
    return Prediction(note.note_id, 1, SENTINEL_SENTENCE_ID, None, raw_text, ParseStatus.FAILED)


def prediction_to_record(pred: Prediction) -> dict:
    return {
        "note_id": pred.note_id,
        "flag": pred.flag,
        "sentence_id": pred.sentence_id,
        "correction": pred.correction,
        "raw_text": pred.raw_text,
        "parse_status": pred.parse_status.value,
    }


def prediction_from_record(rec: dict) -> Prediction:
    return Prediction(
        note_id=rec["note_id"],
        flag=rec["flag"],
        sentence_id=rec.get("sentence_id"),
        correction=rec.get("correction"),
        raw_text=rec.get("raw_text", ""),
        parse_status=ParseStatus(rec["parse_status"]),
    )


def save_predictions(preds: Sequence[Prediction], path: str | Path,
                     metadata: dict | None = None) -> None:
    """Line-delimited records under a versioned header; loss-free round trip."""
    header = {"format": PREDICTIONS_FORMAT, "version": PREDICTIONS_VERSION,
              "count": len(preds)}
    if metadata:
        header.update(metadata)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True, ensure_ascii=True) + "\n")
        for pred in preds:
            fh.write(json.dumps(prediction_to_record(pred), sort_keys=True,
                                ensure_ascii=True) + "\n")


def load_predictions(path: str | Path) -> tuple[list[Prediction], dict]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        try:
            header = json.loads(first) if first else {}
        except json.JSONDecodeError as exc:
            raise SchemaVersionMismatch(f"{path}: malformed header") from exc
        if header.get("format") != PREDICTIONS_FORMAT:
            raise SchemaVersionMismatch(f"{path}: not a predictions file")
        if header.get("version") != PREDICTIONS_VERSION:
            raise SchemaVersionMismatch(
                f"{path}: unsupported predictions version {header.get('version')!r}"
            )
        preds = [prediction_from_record(json.loads(line)) for line in fh if line.strip()]
    return preds, header
