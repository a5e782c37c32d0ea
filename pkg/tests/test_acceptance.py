"""Acceptance gate: one verdict per criterion, echoed in the terminal summary.

Every check here pins an externally meaningful contract: metric definitions
against independent oracles, reference-result reproduction, data-leak walls,
byte-level reproducibility, and statistical calibration. Tolerances are
deliberate and stated inline; nothing here may be loosened to make a run green.
"""

import json
import random
import time
from collections import Counter

import numpy as np
import pytest

from medeval import cli
from medeval.corpus import Split
from medeval.gateway import MockProvider
from medeval.metrics import agg_score, confusion_counts, paired_bootstrap, rouge1
from medeval.parsing import ParseStatus, parse_completion
from medeval.prompting import (
    PromptStrategy,
    StrategyKind,
    build_prompt,
    render_exemplar,
    render_gold_answer,
    render_note,
)
from medeval.retrieval import (
    Chunk,
    ChunkConfig,
    ExemplarDocument,
    ExemplarIndex,
    HashedEmbedder,
    Metric,
    NonTrainDocument,
    build_index,
    retrieve,
    retrieve_by_vector,
    similarity,
)
from medeval.text import tokenize
from tests.conftest import FIXTURES, make_note, make_prediction, random_note, verdict

TRAIN_IDS = {f"tr-0{i}" for i in range(1, 9)}


def _fixture_config(tmp_path, **overrides) -> cli.RunConfig:
    data = {
        "workdir": str(tmp_path / "out"),
        "seed": 7,
        "corpus": {"files": [
            {"path": str(FIXTURES / "test_ms.csv"), "split": "Test", "collection": "MS"},
            {"path": str(FIXTURES / "test_uw.csv"), "split": "Test", "collection": "UW"},
            {"path": str(FIXTURES / "train_ms.csv"), "split": "Train", "collection": "MS"},
        ]},
        "provider": {"name": "mock", "model": "mock-detector-1",
                     "fixtures": str(FIXTURES / "mock_responses.json")},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return cli.config_from_dict(data)


# -- criterion 1: lexical overlap metric --------------------------------------

def _rouge1_oracle(candidate: str, reference: str) -> float | None:
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return None
    pool = list(ref)
    overlap = 0
    for tok in cand:
        if tok in pool:
            pool.remove(tok)
            overlap += 1
    p = overlap / len(cand)
    r = overlap / len(ref)
    return 0.0 if overlap == 0 else 2 * p * r / (p + r)


def test_c1_rouge_against_counting_oracle():
    with verdict("C1 unigram F1 matches an independent counting oracle "
                 "(1000 pairs, |diff| <= 1e-12)"):
        start = time.monotonic()
        rng = random.Random(101)
        vocab = [f"w{i}" for i in range(20)]
        for _ in range(1000):
            cand = " ".join(rng.choices(vocab, k=rng.randint(1, 40)))
            ref = " ".join(rng.choices(vocab, k=rng.randint(1, 40)))
            expected = _rouge1_oracle(cand, ref)
            got = rouge1(cand, ref)
            assert got is not None and expected is not None
            assert abs(got.f1 - expected) <= 1e-12
        assert time.monotonic() - start < 5.0


# -- criterion 2: aggregate score against reference results -------------------
# Reference rows reproduce the public benchmark's reported test-set results
# for ten-exemplar prompting (components: unigram F1, BERTScore, BLEURT, and
# the reported aggregate). Two rows disagree with the mean of their own
# components by more than rounding can explain; they are kept below as strict
# expected failures so the discrepancy stays visible instead of being patched.

REFERENCE_ROWS = [
    # (strategy, model, rouge1, bertscore, bleurt, reported_aggregate, tolerance)
    ("static", "gpt-4o-mini", 0.5239, 0.5029, 0.5640, 0.5303, 5e-5),
    ("static", "gpt-4.1-mini", 0.5316, 0.5215, 0.5623, 0.5385, 5e-5),
    # reported value sits two rounding steps from the component mean (.58563);
    # consistent only if the unrounded components happened to round this way
    ("static", "gpt-4o", 0.5913, 0.5524, 0.6132, 0.5857, 1e-4),
    ("static", "gpt-4.1", 0.6380, 0.6251, 0.6285, 0.6305, 5e-5),
    ("static", "gpt-5", 0.6327, 0.6627, 0.6465, 0.6473, 5e-5),
    ("static", "o1-mini", 0.6425, 0.6726, 0.6612, 0.6588, 5e-5),
    ("static", "claude-3.5-sonnet", 0.2329, 0.1237, 0.5123, 0.2896, 5e-5),
    ("static", "gemini-2.0-flash", 0.3828, 0.3329, 0.4987, 0.4048, 5e-5),
    ("retrieval", "gpt-4.1-mini", 0.5568, 0.5683, 0.5736, 0.5662, 5e-5),
    ("retrieval", "gpt-4o", 0.6644, 0.6840, 0.6641, 0.6708, 5e-5),
    ("retrieval", "gpt-4.1", 0.6655, 0.6832, 0.6635, 0.6707, 5e-5),
    ("retrieval", "gpt-5", 0.6142, 0.6639, 0.6575, 0.6452, 5e-5),
    # same near-boundary situation as gpt-4o above (.68743 vs .6875)
    ("retrieval", "o1-mini", 0.6727, 0.7065, 0.6831, 0.6875, 1e-4),
    ("retrieval", "o4-mini", 0.5527, 0.6002, 0.6189, 0.5906, 5e-5),
    ("retrieval", "claude-3.5-sonnet", 0.3120, 0.2132, 0.5381, 0.3544, 5e-5),
    ("retrieval", "gemini-2.0-flash", 0.3927, 0.3312, 0.5125, 0.4121, 5e-5),
]

INCONSISTENT_ROWS = [
    # component mean is .57710, a full .0200 from the reported .5571
    ("static", "o4-mini", 0.5432, 0.5958, 0.5923, 0.5571),
    # component mean is .53490, .0003 from the reported .5352
    ("retrieval", "gpt-4o-mini", 0.5235, 0.5089, 0.5723, 0.5352),
]


def test_c2_aggregate_reproduces_reference_rows():
    with verdict("C2 aggregate-of-three reproduces the reference results "
                 "(16 of 18 rows; 2 source rows are internally inconsistent)"):
        for strategy, model, r1, bs, bl, reported, tol in REFERENCE_ROWS:
            computed = agg_score(r1, bs, bl)
            assert computed == pytest.approx(reported, abs=tol), (
                f"{strategy}/{model}: mean({r1}, {bs}, {bl}) = {computed:.5f} "
                f"!= reported {reported}")


@pytest.mark.parametrize("strategy,model,r1,bs,bl,reported", INCONSISTENT_ROWS)
@pytest.mark.xfail(strict=True,
                   reason="reported aggregate contradicts the mean of its own components")
def test_c2_inconsistent_reference_rows(strategy, model, r1, bs, bl, reported):
    computed = agg_score(r1, bs, bl)
    from tests.conftest import record_acceptance
    record_acceptance(
        f"C2 reference row {strategy}/{model}", False,
        f"mean({r1}, {bs}, {bl}) = {computed:.5f} but source reports {reported}")
    assert computed == pytest.approx(reported, abs=1e-4)


# -- criterion 3: detection metrics -------------------------------------------

def test_c3_confusion_metrics_against_counting_oracle():
    with verdict("C3 detection metrics match a counting oracle (500 sets, exact)"):
        rng = random.Random(303)
        for _ in range(500):
            n = rng.randint(1, 25)
            golds, preds = [], []
            for i in range(n):
                gf, pf = rng.randint(0, 1), rng.randint(0, 1)
                note = make_note(f"n{i}", flag=gf, error_idx=1 if gf else None,
                                 correction="fix" if gf else None)
                golds.append(note)
                preds.append(make_prediction(note, flag=pf,
                                             sentence_id="1" if pf else None,
                                             correction="guess" if pf else None))
            c = confusion_counts(golds, preds)
            tp = sum(1 for g, p in zip(golds, preds) if g.error_flag and p.flag)
            fn = sum(1 for g, p in zip(golds, preds) if g.error_flag and not p.flag)
            fp = sum(1 for g, p in zip(golds, preds) if not g.error_flag and p.flag)
            tn = sum(1 for g, p in zip(golds, preds) if not g.error_flag and not p.flag)
            assert (c.tp, c.fn, c.fp, c.tn) == (tp, fn, fp, tn)
            assert c.accuracy == (tp + tn) / n
            assert c.recall == (tp / (tp + fn) if tp + fn else None)
            assert c.fpr == (fp / (fp + tn) if fp + tn else None)


# -- criterion 4: retrieval ranking -------------------------------------------

def _index_from_vectors(vectors: dict[str, list[np.ndarray]], dim: int) -> ExemplarIndex:
    chunks, rows = [], []
    for note_id in vectors:
        for j, vec in enumerate(vectors[note_id]):
            chunks.append(Chunk(f"{note_id}#{j}", note_id, 0, 1, f"chunk {j}"))
            rows.append(vec)
    return ExemplarIndex(
        chunks=chunks,
        matrix=np.asarray(rows, dtype=np.float64).reshape(len(rows), dim),
        docs={nid: f"doc {nid}" for nid in vectors},
        backend_identity="oracle-test",
        dim=dim,
        chunk_config=ChunkConfig(),
        corpus_fingerprint="fp",
    )


def _brute_force(vectors, query, metric, k):
    best = {}
    for note_id, vecs in vectors.items():
        for vec in vecs:
            s = similarity(np.asarray(vec, dtype=np.float64), query, metric)
            if note_id not in best or s > best[note_id]:
                best[note_id] = s
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


def _lattice_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    # entries k/8 with k integer are exact in binary floating point, so the
    # vectorized path and the pairwise oracle must agree bit for bit
    while True:
        v = rng.integers(-8, 9, size=dim) / 8.0
        if np.any(v):
            return v


def test_c4_retrieval_against_brute_force_oracle():
    with verdict("C4 top-k retrieval matches a brute-force oracle "
                 "(200 corpora, both metrics, exact scores and order)"):
        rng = np.random.default_rng(404)
        for trial in range(200):
            dim = int(rng.choice([8, 16, 32, 64]))
            n_docs = int(rng.integers(1, 26))
            vectors = {}
            for i in range(n_docs):
                vectors[f"d{i:02d}"] = [_lattice_vector(rng, dim)
                                        for _ in range(int(rng.integers(1, 5)))]
            if n_docs > 1 and rng.random() < 0.5:
                # force score ties across documents to exercise the id tie-break
                src, dst = f"d{0:02d}", f"d{n_docs - 1:02d}"
                vectors[dst] = [v.copy() for v in vectors[src]]
            index = _index_from_vectors(vectors, dim)
            query = _lattice_vector(rng, dim)
            k = int(rng.integers(1, n_docs + 1))
            metric = Metric.COSINE if trial % 2 == 0 else Metric.DOT
            got = retrieve_by_vector(index, query, k, metric)
            expected = _brute_force(vectors, query, metric, k)
            assert [(d.note_id, d.score) for d in got] == expected


# -- criterion 5: train/test wall ---------------------------------------------

def test_c5_exemplars_never_leave_training_split(tmp_path):
    with verdict("C5 exemplar sources stay inside the training split "
                 "(end-to-end audit + direct wall check)"):
        cfg = _fixture_config(tmp_path, strategy={"kind": "rdp", "n_exemplars": 2})
        cli.cmd_ingest(cfg)
        cli.cmd_index(cfg)
        cli.cmd_run(cfg, provider=MockProvider.from_fixture(cfg.fixtures))
        log = [json.loads(line) for line in cfg.run_log_path.read_text().splitlines()]
        assert len(log) == 12
        for rec in log:
            assert rec["exemplars"], f"note {rec['note_id']} got no exemplars"
            assert set(rec["exemplars"]) <= TRAIN_IDS, rec

        # the wall also holds at build time: a non-train document is refused
        doc = ExemplarDocument("test-split-note", "0|some text\nCORRECT")
        with pytest.raises(NonTrainDocument):
            build_index([doc], embedder=HashedEmbedder(dim=32),
                        chunk_config=ChunkConfig(), train_ids={"someone-else"},
                        corpus_fingerprint="fp")


# -- criterion 6: parser/renderer round trip ----------------------------------

def test_c6_gold_answers_round_trip():
    with verdict("C6 rendered gold answers parse back unchanged (200 notes)"):
        rng = random.Random(606)
        for i in range(200):
            note = random_note(rng, f"n{i}")
            pred = parse_completion(render_gold_answer(note), note)
            assert pred.parse_status is ParseStatus.CLEAN
            assert pred.flag == note.error_flag
            assert pred.sentence_id == note.error_sentence_id
            expected_corr = note.gold_correction if note.error_flag else None
            assert pred.correction == expected_corr


# -- criterion 7: reproducibility and cache replay ------------------------------

def test_c7_byte_identical_reports_and_cache_replay(tmp_path):
    with verdict("C7 two fresh runs produce byte-identical reports; "
                 "a repeat run makes zero provider calls"):
        start = time.monotonic()
        artifacts = {}
        for name in ("a", "b"):
            cfg = _fixture_config(tmp_path / name)
            cli.cmd_ingest(cfg)
            provider = MockProvider.from_fixture(cfg.fixtures)
            cli.cmd_run(cfg, provider=provider)
            assert provider.calls == 12
            cli.cmd_score(cfg)
            artifacts[name] = (cfg.report_path.read_bytes(),
                               (cfg.out / "report_tables.tsv").read_bytes(),
                               cfg.predictions_path.read_bytes(),
                               cfg)
        assert artifacts["a"][0] == artifacts["b"][0]
        assert artifacts["a"][1] == artifacts["b"][1]
        assert artifacts["a"][2] == artifacts["b"][2]

        cfg = artifacts["a"][3]
        replay = MockProvider.from_fixture(cfg.fixtures)
        cli.cmd_run(cfg, provider=replay)
        assert replay.calls == 0  # every completion replayed from the disk cache
        assert cfg.predictions_path.read_bytes() == artifacts["a"][2]
        assert time.monotonic() - start < 10.0


# -- criterion 8: bootstrap calibration -----------------------------------------

def test_c8_bootstrap_calibration():
    with verdict("C8 paired bootstrap: ties never significant, clear wins are, "
                 "same seed is bit-exact"):
        start = time.monotonic()
        scores = [0.3, 0.7, 0.5, 0.9, 0.1] * 10
        for seed in range(50):
            res = paired_bootstrap(scores, scores, iterations=200, seed=seed)
            assert res.delta == 0.0
            assert res.p_value == 1.0

        res = paired_bootstrap([1.0] * 100, [0.0] * 100, iterations=1000, seed=0)
        assert res.delta == 1.0
        assert res.p_value == 0.0

        rng = np.random.default_rng(88)
        a = rng.normal(0.6, 0.2, size=60)
        b = a - rng.normal(0.03, 0.2, size=60)
        r1 = paired_bootstrap(a, b, iterations=1000, seed=5)
        r2 = paired_bootstrap(a, b, iterations=1000, seed=5)
        assert (r1.delta, r1.p_value, r1.iterations) == (r2.delta, r2.p_value, 1000)
        assert time.monotonic() - start < 10.0


# -- criterion 9: degenerate configurations -------------------------------------

def test_c9_degenerate_configurations_collapse_to_baselines():
    with verdict("C9 zero-exemplar sampling equals the zero-shot prompt; "
                 "an indexed duplicate retrieves at cosine 1.0"):
        note = make_note("q1", sentence_texts=["Distinct query sentence one.",
                                               "Distinct query sentence two."])
        pool = [make_note(f"p{i}", split=Split.TRAIN,
                          sentence_texts=[f"Pool note {i} body."]) for i in range(4)]
        zero = build_prompt(note, PromptStrategy(StrategyKind.ZERO_SHOT))
        spr0 = build_prompt(note, PromptStrategy(StrategyKind.SPR, n_exemplars=0,
                                                 rng_seed=123), pool=pool)
        assert spr0.text == zero.text
        assert spr0.exemplar_note_ids == ()

        # a document whose text equals the query must come back first, at
        # exactly cosine 1.0 up to float associativity
        docs = [ExemplarDocument("dup-src", render_note(note))] + [
            ExemplarDocument(p.note_id, render_note(p)) for p in pool]
        index = build_index(docs, embedder=HashedEmbedder(dim=256),
                            chunk_config=ChunkConfig(),
                            train_ids={"dup-src"} | {p.note_id for p in pool},
                            corpus_fingerprint="fp")
        hits = retrieve(index, render_note(note), k=1, metric=Metric.COSINE)
        assert hits[0].note_id == "dup-src"
        assert hits[0].score == pytest.approx(1.0, abs=1e-12)

        # with full exemplar rendering (note body plus gold answer) the
        # duplicate body still dominates the ranking, just below 1.0
        train_note = make_note("dup-src", split=Split.TRAIN, flag=1, error_idx=0,
                               correction="Fixed first sentence.",
                               sentence_texts=[s.text for s in note.sentences])
        rendered = [ExemplarDocument("dup-src", render_exemplar(train_note))] + [
            ExemplarDocument(p.note_id, render_exemplar(p)) for p in pool]
        index2 = build_index(rendered, embedder=HashedEmbedder(dim=256),
                             chunk_config=ChunkConfig(),
                             train_ids={"dup-src"} | {p.note_id for p in pool},
                             corpus_fingerprint="fp")
        hits2 = retrieve(index2, render_note(note), k=2, metric=Metric.COSINE)
        assert hits2[0].note_id == "dup-src"
        assert hits2[0].score > hits2[1].score


# -- criterion 10: misclassification partition ----------------------------------

def test_c10_misclassification_partition():
    from medeval.analysis import MisclassCategory, categorize
    from medeval.metrics import sentence_correct

    with verdict("C10 misclassification labels partition the misses "
                 "(500 trials, one label per miss, categories re-derived)"):
        rng = random.Random(1010)
        for _ in range(500):
            n = rng.randint(1, 20)
            distance = rng.randint(1, 3)
            golds, preds = [], []
            for i in range(n):
                gf, pf = rng.randint(0, 1), rng.randint(0, 1)
                note = make_note(f"n{i}", n_sentences=6, flag=gf,
                                 error_idx=rng.randrange(6) if gf else None,
                                 correction="fix" if gf else None)
                golds.append(note)
                preds.append(make_prediction(
                    note, flag=pf, sentence_id=str(rng.randrange(6)) if pf else None,
                    correction="guess" if pf else None))
            labels = categorize(golds, preds, near_miss_distance=distance)
            misses = {g.note_id for g, p in zip(golds, preds)
                      if not sentence_correct(g, p)}
            assert Counter(lb.note_id for lb in labels) == Counter(misses)
            for lb, (g, p) in zip(labels, [(g, p) for g, p in zip(golds, preds)
                                           if not sentence_correct(g, p)]):
                if g.error_flag == 0:
                    expected = MisclassCategory.OVER_CORRECTION
                elif p.flag == 0:
                    expected = MisclassCategory.FALSE_NEGATIVE_FLAG
                else:
                    delta = abs(int(p.sentence_id) - int(g.error_sentence_id))
                    expected = (MisclassCategory.NEAR_MISS
                                if 1 <= delta <= distance
                                else MisclassCategory.WRONG_SENTENCE_OTHER)
                assert lb.category is expected, (lb, g.note_id)
