import csv

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medeval.corpus import (
    ClinicalNote,
    Collection,
    DanglingErrorSentenceId,
    DuplicateNoteId,
    EmptyText,
    ErrorType,
    InvalidFlag,
    MissingColumn,
    Sentence,
    SnapshotFormatError,
    Split,
    corpus_fingerprint,
    corpus_stats,
    load_corpus,
    load_snapshot,
    note_from_record,
    note_to_record,
    parse_error_type,
    save_snapshot,
    segment_text,
)
from tests.conftest import make_note, random_note


def write_csv(path, rows, header=("Text ID", "Sentences", "Error Flag",
                                  "Error Sentence ID", "Corrected Sentence", "Error Type")):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def test_segment_marked_lines():
    sents = segment_text("0|The patient has a fever.\n1|Aspirin was started.")
    assert sents == (Sentence("0", "The patient has a fever."),
                     Sentence("1", "Aspirin was started."))


def test_segment_unmarked_lines_get_sequential_ids():
    sents = segment_text("First line.\nSecond line.\n\nThird line.")
    assert [s.sentence_id for s in sents] == ["0", "1", "2"]
    assert sents[2].text == "Third line."


def test_segment_mixed_lines_fall_back_to_sequential():
    # one line without a marker means markers are not trusted for any line
    sents = segment_text("0|marked\nnot marked")
    assert [s.sentence_id for s in sents] == ["0", "1"]
    assert sents[0].text == "0|marked"


def test_segment_empty_raises():
    with pytest.raises(EmptyText):
        segment_text("   \n  ")


def test_note_invariants_flag_one_requires_existing_sentence():
    with pytest.raises(DanglingErrorSentenceId):
        ClinicalNote(
            note_id="x", collection=Collection.MS, split=Split.TEST,
            sentences=(Sentence("0", "a"),), error_flag=1,
            error_sentence_id="7", gold_correction="b",
        )


def test_note_invariants_flag_zero_excludes_error_fields():
    with pytest.raises(InvalidFlag):
        ClinicalNote(
            note_id="x", collection=Collection.MS, split=Split.TEST,
            sentences=(Sentence("0", "a"),), error_flag=0, gold_correction="b",
        )


def test_note_invariants_duplicate_sentence_ids():
    with pytest.raises(InvalidFlag):
        ClinicalNote(
            note_id="x", collection=Collection.MS, split=Split.TEST,
            sentences=(Sentence("0", "a"), Sentence("0", "b")), error_flag=0,
        )


def test_gold_correction_equal_to_flagged_sentence_warns_not_raises(caplog):
    with caplog.at_level("WARNING"):
        note = ClinicalNote(
            note_id="x", collection=Collection.MS, split=Split.TEST,
            sentences=(Sentence("0", "same text"),), error_flag=1,
            error_sentence_id="0", gold_correction="same text",
        )
    assert note.error_flag == 1
    assert any("gold correction equals" in r.message for r in caplog.records)


def test_load_corpus_roundtrip(tmp_path):
    path = tmp_path / "notes.csv"
    write_csv(path, [
        ["a1", "0|Patient is well.\n1|No issues.", "0", "-1", "NA", "NA"],
        ["a2", "0|Has pneumonia.\n1|Treat with aspirin.", "1", "1",
         "Treat with azithromycin.", "Pharmacotherapy"],
    ])
    notes = load_corpus(path, collection=Collection.MS, split=Split.TRAIN)
    assert len(notes) == 2
    assert notes[0].error_flag == 0
    assert notes[0].error_sentence_id is None
    assert notes[1].error_sentence_id == "1"
    assert notes[1].error_type is ErrorType.PHARMACOTHERAPY
    assert notes[1].split is Split.TRAIN


def test_load_corpus_missing_column(tmp_path):
    path = tmp_path / "notes.csv"
    write_csv(path, [["a1", "text", "0"]], header=("Text ID", "Sentences", "Error Flag"))
    with pytest.raises(MissingColumn):
        load_corpus(path, collection=Collection.MS, split=Split.TRAIN)


def test_load_corpus_bad_flag(tmp_path):
    path = tmp_path / "notes.csv"
    write_csv(path, [["a1", "0|x", "2", "-1", "NA", "NA"]])
    with pytest.raises(InvalidFlag):
        load_corpus(path, collection=Collection.MS, split=Split.TRAIN)


def test_load_corpus_duplicate_id(tmp_path):
    path = tmp_path / "notes.csv"
    write_csv(path, [
        ["a1", "0|x", "0", "-1", "NA", "NA"],
        ["a1", "0|y", "0", "-1", "NA", "NA"],
    ])
    with pytest.raises(DuplicateNoteId):
        load_corpus(path, collection=Collection.MS, split=Split.TRAIN)


def test_load_corpus_tsv_delimiter(tmp_path):
    path = tmp_path / "notes.tsv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("Text ID\tSentences\tError Flag\tError Sentence ID\tCorrected Sentence\n")
        fh.write("t1\t0|Fine.\t0\t-1\tNA\n")
    notes = load_corpus(path, collection=Collection.UW, split=Split.VALIDATION)
    assert notes[0].collection is Collection.UW


def test_parse_error_type_variants():
    assert parse_error_type("causal organism") is ErrorType.CAUSAL_ORGANISM
    assert parse_error_type("CausalOrganism") is ErrorType.CAUSAL_ORGANISM
    assert parse_error_type("diagnosis") is ErrorType.DIAGNOSIS
    assert ErrorType.CAUSAL_ORGANISM.display_name == "Causal Organism"


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=50, deadline=None)
def test_record_roundtrip_property(seed):
    import random as _random
    note = random_note(_random.Random(seed), f"note-{seed}")
    assert note_from_record(note_to_record(note)) == note


def test_snapshot_roundtrip(tmp_path, rng):
    notes = [random_note(rng, f"n{i}", split=Split.TRAIN) for i in range(20)]
    path = tmp_path / "corpus.jsonl"
    fp = save_snapshot(notes, path)
    loaded, fp2 = load_snapshot(path)
    assert loaded == notes
    assert fp == fp2


def test_snapshot_rejects_tampering(tmp_path, rng):
    notes = [random_note(rng, f"n{i}") for i in range(3)]
    path = tmp_path / "corpus.jsonl"
    save_snapshot(notes, path)
    lines = path.read_text().splitlines()
    lines.pop()  # drop a record, keep the header
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(SnapshotFormatError):
        load_snapshot(path)


def test_snapshot_rejects_unknown_version(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"format": "medeval-corpus", "version": 99}\n')
    with pytest.raises(SnapshotFormatError):
        load_snapshot(path)


def test_fingerprint_is_order_independent(rng):
    notes = [random_note(rng, f"n{i}") for i in range(10)]
    assert corpus_fingerprint(notes) == corpus_fingerprint(list(reversed(notes)))


def test_fingerprint_changes_with_content(rng):
    notes = [random_note(rng, f"n{i}") for i in range(5)]
    changed = notes[:-1] + [make_note(note_id=notes[-1].note_id, n_sentences=2)]
    assert corpus_fingerprint(notes) != corpus_fingerprint(changed)


def test_corpus_stats_counts():
    notes = [
        make_note("a", flag=1, error_type=ErrorType.DIAGNOSIS,
                  split=Split.TRAIN, collection=Collection.MS),
        make_note("b", flag=0, split=Split.TRAIN, collection=Collection.MS),
        make_note("c", flag=1, error_type=ErrorType.TREATMENT,
                  split=Split.TEST, collection=Collection.UW),
    ]
    stats = corpus_stats(notes)
    assert stats[("Train", "MS")].note_count == 2
    assert stats[("Train", "MS")].error_count == 1
    assert stats[("Train", "MS")].error_rate == 0.5
    assert stats[("Test", "UW")].by_error_type == {"Treatment": 1}
    assert stats[("Total", "All")].note_count == 3
    empty = corpus_stats([])
    assert empty[("Total", "All")].error_rate is None
