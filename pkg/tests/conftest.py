"""Shared builders for synthetic notes and predictions."""

from __future__ import annotations

import random
from contextlib import contextmanager
from pathlib import Path

import pytest

from medeval.corpus import ClinicalNote, Collection, ErrorType, Sentence, Split
from medeval.parsing import ParseStatus, Prediction

FIXTURES = Path(__file__).parent / "fixtures"

WORDS = [
    "patient", "fever", "cough", "aspirin", "daily", "chest", "radiograph",
    "pneumonia", "treated", "with", "azithromycin", "blood", "pressure",
    "elevated", "started", "lisinopril", "glucose", "insulin", "admitted",
    "discharged", "stable", "followup", "renal", "function", "normal",
]


def make_note(
    note_id: str = "n1",
    n_sentences: int = 3,
    flag: int = 0,
    error_idx: int | None = None,
    correction: str | None = None,
    error_type: ErrorType | None = None,
    split: Split = Split.TEST,
    collection: Collection = Collection.MS,
    sentence_texts: list[str] | None = None,
) -> ClinicalNote:
    texts = sentence_texts or [f"sentence {i} about the {WORDS[i % len(WORDS)]}"
                               for i in range(n_sentences)]
    sentences = tuple(Sentence(str(i), t) for i, t in enumerate(texts))
    if flag == 1:
        idx = 1 if error_idx is None else error_idx
        return ClinicalNote(
            note_id=note_id, collection=collection, split=split, sentences=sentences,
            error_flag=1, error_sentence_id=str(idx),
            gold_correction=correction or f"corrected sentence {idx}",
            error_type=error_type,
        )
    return ClinicalNote(note_id=note_id, collection=collection, split=split,
                        sentences=sentences, error_flag=0)


def random_note(rng: random.Random, note_id: str, split: Split = Split.TEST,
                collection: Collection | None = None,
                typed: bool = True) -> ClinicalNote:
    n = rng.randint(2, 8)
    texts = [" ".join(rng.choices(WORDS, k=rng.randint(3, 10))) for _ in range(n)]
    flag = rng.randint(0, 1)
    etype = rng.choice(list(ErrorType)) if (flag and typed and rng.random() < 0.8) else None
    return make_note(
        note_id=note_id,
        n_sentences=n,
        flag=flag,
        error_idx=rng.randrange(n) if flag else None,
        correction=" ".join(rng.choices(WORDS, k=rng.randint(3, 10))) if flag else None,
        error_type=etype,
        split=split,
        collection=collection or rng.choice(list(Collection)),
        sentence_texts=texts,
    )


def make_prediction(note: ClinicalNote, flag: int, sentence_id: str | None = None,
                    correction: str | None = None,
                    status: ParseStatus = ParseStatus.CLEAN) -> Prediction:
    raw = "CORRECT" if flag == 0 else f"{sentence_id} {correction}"
    return Prediction(note_id=note.note_id, flag=flag, sentence_id=sentence_id,
                      correction=correction, raw_text=raw, parse_status=status)


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20240817)


# -- acceptance reporting ----------------------------------------------------
# test_acceptance.py records one verdict per criterion; they are echoed in the
# terminal summary so a run shows the full pass/fail slate at a glance.

ACCEPTANCE_RESULTS: list[tuple[str, str, str]] = []


def record_acceptance(criterion: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((criterion, "PASS" if passed else "FAIL", detail))


@contextmanager
def verdict(criterion: str, detail: str = ""):
    """Record one pass/fail line for an acceptance criterion, even on failure."""
    try:
        yield
    except BaseException:
        record_acceptance(criterion, False, "assertion failed")
        raise
    record_acceptance(criterion, True, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in ACCEPTANCE_RESULTS:
        suffix = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(f"{status}  {criterion}{suffix}")
