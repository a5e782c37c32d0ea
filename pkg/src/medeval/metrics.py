"""Scoring: detection metrics, correction-quality metrics, paired bootstrap.

Detection is scored as binary error-flag agreement plus sentence-level
localization. Correction quality uses lexical ROUGE-1 locally and defers
BERTScore/BLEURT to an external scoring service; without that service those
columns are NA, never silently zero.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
import requests

from .corpus import ClinicalNote
from .parsing import Prediction
from .text import tokenize

logger = logging.getLogger(__name__)

REPORT_FORMAT = "medeval-report"
REPORT_VERSION = 1


class MetricsError(Exception):
    pass


class Misalignment(MetricsError):
    pass


class LengthMismatch(MetricsError):
    pass


class ScorerUnavailable(MetricsError):
    pass


class NaPolicy(str, Enum):
    # Gold-error notes the system declined to correct are excluded from
    # correction-quality means (default), or scored as 0.0 instead.
    EXCLUDE = "exclude"
    ZERO = "zero"


def check_aligned(golds: Sequence[ClinicalNote], preds: Sequence[Prediction]) -> None:
    if len(golds) != len(preds):
        raise Misalignment(f"{len(golds)} notes vs {len(preds)} predictions")
    for g, p in zip(golds, preds):
        if g.note_id != p.note_id:
            raise Misalignment(f"note order differs: {g.note_id!r} vs {p.note_id!r}")


def align_predictions(golds: Sequence[ClinicalNote],
                      preds: Sequence[Prediction]) -> list[Prediction]:
    """Reorder predictions to match gold order; ids must correspond 1:1."""
    by_id = {p.note_id: p for p in preds}
    if len(by_id) != len(preds):
        raise Misalignment("duplicate note_id among predictions")
    missing = [g.note_id for g in golds if g.note_id not in by_id]
    extra = set(by_id) - {g.note_id for g in golds}
    if missing or extra:
        raise Misalignment(f"missing predictions for {missing[:5]}, unmatched {sorted(extra)[:5]}")
    return [by_id[g.note_id] for g in golds]


@dataclass(frozen=True, slots=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float | None:
        return (self.tp + self.tn) / self.total if self.total else None

    @property
    def recall(self) -> float | None:
        pos = self.tp + self.fn
        return self.tp / pos if pos else None

    @property
    def fpr(self) -> float | None:
        neg = self.fp + self.tn
        return self.fp / neg if neg else None


def confusion_counts(golds: Sequence[ClinicalNote],
                     preds: Sequence[Prediction]) -> ConfusionCounts:
    check_aligned(golds, preds)
    tp = tn = fp = fn = 0
    for g, p in zip(golds, preds):
        if g.error_flag == 1:
            if p.flag == 1:
                tp += 1
            else:
                fn += 1
        else:
            if p.flag == 1:
                fp += 1
            else:
                tn += 1
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def sentence_correct(gold: ClinicalNote, pred: Prediction) -> bool:
    """Localization is right when both say CORRECT or both point at the same
    sentence."""
    if gold.error_flag == 0:
        return pred.flag == 0
    return pred.flag == 1 and pred.sentence_id == gold.error_sentence_id


def sentence_accuracy(golds: Sequence[ClinicalNote],
                      preds: Sequence[Prediction]) -> float | None:
    check_aligned(golds, preds)
    if not golds:
        return None
    hits = sum(1 for g, p in zip(golds, preds) if sentence_correct(g, p))
    return hits / len(golds)


def sentence_recall(golds: Sequence[ClinicalNote],
                    preds: Sequence[Prediction]) -> float | None:
    """Share of gold-error notes whose flagged sentence was found exactly."""
    check_aligned(golds, preds)
    errors = [(g, p) for g, p in zip(golds, preds) if g.error_flag == 1]
    if not errors:
        return None
    hits = sum(1 for g, p in errors if p.flag == 1 and p.sentence_id == g.error_sentence_id)
    return hits / len(errors)


@dataclass(frozen=True, slots=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def rouge1(candidate: str, reference: str) -> RougeScore | None:
    """Unigram multiset overlap; NA when either side has no tokens."""
    cand = Counter(tokenize(candidate))
    ref = Counter(tokenize(reference))
    n_cand = sum(cand.values())
    n_ref = sum(ref.values())
    if n_cand == 0 or n_ref == 0:
        return None
    overlap = sum((cand & ref).values())
    precision = overlap / n_cand
    recall = overlap / n_ref
    if overlap == 0:
        return RougeScore(precision, recall, 0.0)
    return RougeScore(precision, recall, 2 * precision * recall / (precision + recall))


def agg_score(rouge: float | None, bertscore: float | None,
              bleurt: float | None) -> float | None:
    """Arithmetic mean of the three correction metrics; NA unless all present."""
    if rouge is None or bertscore is None or bleurt is None:
        return None
    return (rouge + bertscore + bleurt) / 3.0


@dataclass(frozen=True, slots=True)
class CorrectionScores:
    rouge1: float | None
    bertscore: float | None
    bleurt: float | None

    @property
    def aggscore(self) -> float | None:
        return agg_score(self.rouge1, self.bertscore, self.bleurt)


class ScorerClient:
    """Client for the external semantic scoring service.

    The service is always remote (its model stack is deliberately not a
    dependency of this package); when unreachable, callers downgrade the
    semantic columns to NA rather than failing the run.
    """

    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout

    def health(self) -> dict:
        try:
            resp = requests.get(self.endpoint + "/health", timeout=self.timeout)
        except requests.RequestException as exc:
            raise ScorerUnavailable(f"scorer health check failed: {exc}") from exc
        if resp.status_code != 200:
            raise ScorerUnavailable(f"scorer health returned {resp.status_code}")
        return resp.json()

    def score_pairs(self, pairs: Sequence[tuple[str, str]]) -> list[tuple[float, float]]:
        if not pairs:
            return []
        body = {"pairs": [{"candidate": c, "reference": r} for c, r in pairs]}
        try:
            resp = requests.post(self.endpoint + "/score", json=body, timeout=self.timeout)
        except requests.RequestException as exc:
            raise ScorerUnavailable(f"scorer request failed: {exc}") from exc
        if resp.status_code != 200:
            raise ScorerUnavailable(f"scorer returned {resp.status_code}: {resp.text[:200]}")
        try:
            scores = resp.json()["scores"]
            out = [(float(s["bertscore"]), float(s["bleurt"])) for s in scores]
        except (KeyError, TypeError, ValueError) as exc:
            raise ScorerUnavailable(f"malformed scorer response: {exc}") from exc
        if len(out) != len(pairs):
            raise ScorerUnavailable(f"scorer returned {len(out)} scores for {len(pairs)} pairs")
        return out


@dataclass
class CorrectionScoring:
    per_note: dict[str, CorrectionScores]  # gold-error notes only
    n_scored: int
    n_na: int
    means: CorrectionScores
    mean_aggscore: float | None
    scorer_versions: dict | None = None


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def score_corrections(golds: Sequence[ClinicalNote], preds: Sequence[Prediction],
                      scorer: ScorerClient | None = None,
                      na_policy: NaPolicy = NaPolicy.EXCLUDE) -> CorrectionScoring:
    """Correction quality over gold-error notes.

    A pair is scorable when the gold note carries a correction and the
    prediction offers one. Everything else is NA under EXCLUDE, or scored as
    0.0 under ZERO.
    """
    check_aligned(golds, preds)
    error_notes = [(g, p) for g, p in zip(golds, preds) if g.error_flag == 1]
    scorable = [(g, p) for g, p in error_notes
                if g.gold_correction and p.flag == 1 and p.correction]

    semantic: dict[str, tuple[float, float]] = {}
    semantic_active = False
    versions: dict | None = None
    if scorer is not None:
        try:
            versions = scorer.health().get("models")
            pairs = [(p.correction, g.gold_correction) for g, p in scorable]
            for (g, _), (bs, bl) in zip(scorable, scorer.score_pairs(pairs)):
                semantic[g.note_id] = (bs, bl)
            semantic_active = True
        except ScorerUnavailable as exc:
            logger.warning("semantic scorer unavailable, columns downgraded to NA: %s", exc)
            semantic = {}
            versions = None

    per_note: dict[str, CorrectionScores] = {}
    scorable_ids = {g.note_id for g, _ in scorable}
    for g, p in error_notes:
        if g.note_id in scorable_ids:
            r = rouge1(p.correction, g.gold_correction)
            bs_bl = semantic.get(g.note_id)
            per_note[g.note_id] = CorrectionScores(
                rouge1=r.f1 if r else None,
                bertscore=bs_bl[0] if bs_bl else None,
                bleurt=bs_bl[1] if bs_bl else None,
            )
        elif na_policy is NaPolicy.ZERO and g.gold_correction:
            per_note[g.note_id] = CorrectionScores(
                rouge1=0.0,
                bertscore=0.0 if semantic_active else None,
                bleurt=0.0 if semantic_active else None,
            )

    scored = [s for s in per_note.values() if s.rouge1 is not None]
    means = CorrectionScores(
        rouge1=_mean([s.rouge1 for s in per_note.values() if s.rouge1 is not None]),
        bertscore=_mean([s.bertscore for s in per_note.values() if s.bertscore is not None]),
        bleurt=_mean([s.bleurt for s in per_note.values() if s.bleurt is not None]),
    )
    aggs = [s.aggscore for s in per_note.values() if s.aggscore is not None]
    return CorrectionScoring(
        per_note=per_note,
        n_scored=len(scored),
        n_na=len(error_notes) - len(scored),
        means=means,
        mean_aggscore=_mean(aggs),
        scorer_versions=versions,
    )


@dataclass(frozen=True, slots=True)
class BootstrapResult:
    delta: float
    p_value: float
    iterations: int
    seed: int


def paired_bootstrap(scores_a: Sequence[float], scores_b: Sequence[float],
                     iterations: int = 1000, seed: int = 0) -> BootstrapResult:
    """One-sided paired bootstrap for mean(a) > mean(b).

    Resamples note indices with replacement; the p-value is the fraction of
    resamples where the delta is <= 0, ties counting against significance.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"paired scores must match: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise LengthMismatch(f"need at least 2 paired scores, got {n}")
    if iterations < 1:
        raise LengthMismatch(f"iterations must be >= 1, got {iterations}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(iterations, n))
    deltas = a[idx].mean(axis=1) - b[idx].mean(axis=1)
    return BootstrapResult(
        delta=float(a.mean() - b.mean()),
        p_value=float(np.mean(deltas <= 0.0)),
        iterations=iterations,
        seed=seed,
    )


@dataclass
class MetricsReport:
    provenance: dict
    n_notes: int
    counts: ConfusionCounts
    flag_accuracy: float | None
    sentence_accuracy: float | None
    flag_recall: float | None
    sentence_recall: float | None
    fpr: float | None
    correction: CorrectionScores
    mean_aggscore: float | None
    n_scored: int
    n_na: int
    parse_status_counts: dict[str, int] = field(default_factory=dict)
    per_note: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "provenance": self.provenance,
            "overall": {
                "n_notes": self.n_notes,
                "counts": {"tp": self.counts.tp, "tn": self.counts.tn,
                           "fp": self.counts.fp, "fn": self.counts.fn},
                "flag_accuracy": self.flag_accuracy,
                "sentence_accuracy": self.sentence_accuracy,
                "flag_recall": self.flag_recall,
                "sentence_recall": self.sentence_recall,
                "fpr": self.fpr,
                "parse_status_counts": self.parse_status_counts,
            },
            "correction": {
                "rouge1": self.correction.rouge1,
                "bertscore": self.correction.bertscore,
                "bleurt": self.correction.bleurt,
                "aggscore": self.mean_aggscore,
                "n_scored": self.n_scored,
                "n_na": self.n_na,
            },
            "per_note": self.per_note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("format") != REPORT_FORMAT:
            raise MetricsError("not a metrics report")
        if d.get("version") != REPORT_VERSION:
            raise MetricsError(f"unsupported report version {d.get('version')!r}")
        overall = d["overall"]
        correction = d["correction"]
        return cls(
            provenance=d.get("provenance", {}),
            n_notes=overall["n_notes"],
            counts=ConfusionCounts(**overall["counts"]),
            flag_accuracy=overall["flag_accuracy"],
            sentence_accuracy=overall["sentence_accuracy"],
            flag_recall=overall["flag_recall"],
            sentence_recall=overall["sentence_recall"],
            fpr=overall["fpr"],
            correction=CorrectionScores(rouge1=correction["rouge1"],
                                        bertscore=correction["bertscore"],
                                        bleurt=correction["bleurt"]),
            mean_aggscore=correction["aggscore"],
            n_scored=correction["n_scored"],
            n_na=correction["n_na"],
            parse_status_counts=overall.get("parse_status_counts", {}),
            per_note=d.get("per_note", []),
        )


def build_report(golds: Sequence[ClinicalNote], preds: Sequence[Prediction],
                 scorer: ScorerClient | None = None,
                 na_policy: NaPolicy = NaPolicy.EXCLUDE,
                 provenance: Mapping | None = None) -> MetricsReport:
    check_aligned(golds, preds)
    counts = confusion_counts(golds, preds)
    scoring = score_corrections(golds, preds, scorer=scorer, na_policy=na_policy)
    provenance = dict(provenance or {})
    provenance.setdefault("na_policy", na_policy.value)
    if scoring.scorer_versions:
        provenance["scorer_models"] = scoring.scorer_versions
    status_counts: dict[str, int] = {}
    for p in preds:
        status_counts[p.parse_status.value] = status_counts.get(p.parse_status.value, 0) + 1
    per_note = []
    for g, p in zip(golds, preds):
        scores = scoring.per_note.get(g.note_id)
        per_note.append({
            "note_id": g.note_id,
            "gold_flag": g.error_flag,
            "pred_flag": p.flag,
            "flag_correct": int(p.flag == g.error_flag),
            "sentence_correct": int(sentence_correct(g, p)),
            "parse_status": p.parse_status.value,
            "rouge1": scores.rouge1 if scores else None,
            "bertscore": scores.bertscore if scores else None,
            "bleurt": scores.bleurt if scores else None,
            "aggscore": scores.aggscore if scores else None,
        })
    return MetricsReport(
        provenance=provenance,
        n_notes=len(golds),
        counts=counts,
        flag_accuracy=counts.accuracy,
        sentence_accuracy=sentence_accuracy(golds, preds),
        flag_recall=counts.recall,
        sentence_recall=sentence_recall(golds, preds),
        fpr=counts.fpr,
        correction=scoring.means,
        mean_aggscore=scoring.mean_aggscore,
        n_scored=scoring.n_scored,
        n_na=scoring.n_na,
        parse_status_counts=status_counts,
        per_note=per_note,
    )
