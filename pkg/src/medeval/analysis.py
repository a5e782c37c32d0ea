"""Post-hoc analysis: misclassification taxonomy and sliced metric tables."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

from .corpus import ClinicalNote, Collection, ErrorType
from .metrics import CorrectionScoring, check_aligned, sentence_correct
from .parsing import Prediction


class Task(str, Enum):
    FLAG_DETECTION = "FlagDetection"
    SENTENCE_DETECTION = "SentenceDetection"


class MisclassCategory(str, Enum):
    NEAR_MISS = "NearMiss"
    OVER_CORRECTION = "OverCorrection"
    FALSE_NEGATIVE_FLAG = "FalseNegativeFlag"
    WRONG_SENTENCE_OTHER = "WrongSentenceOther"


@dataclass(frozen=True, slots=True)
class MisclassificationLabel:
    note_id: str
    task: Task
    category: MisclassCategory
    detail: str = ""


def categorize(golds: Sequence[ClinicalNote], preds: Sequence[Prediction],
               near_miss_distance: int = 1) -> list[MisclassificationLabel]:
    """Exactly one label per localization miss; correct notes get none.

    Flag disagreements are flag-detection failures; within-note sentence
    mix-ups where both sides agree an error exists are sentence-detection
    failures, split into numeric near misses and everything else.
    """
    check_aligned(golds, preds)
    labels: list[MisclassificationLabel] = []
    for g, p in zip(golds, preds):
        if sentence_correct(g, p):
            continue
        if g.error_flag == 0 and p.flag == 1:
            labels.append(MisclassificationLabel(
                g.note_id, Task.FLAG_DETECTION, MisclassCategory.OVER_CORRECTION,
                detail=f"pred={p.sentence_id}"))
        elif g.error_flag == 1 and p.flag == 0:
            labels.append(MisclassificationLabel(
                g.note_id, Task.FLAG_DETECTION, MisclassCategory.FALSE_NEGATIVE_FLAG,
                detail=f"gold={g.error_sentence_id}"))
        else:  # both flagged, wrong sentence
            category = MisclassCategory.WRONG_SENTENCE_OTHER
            try:
                delta = abs(int(p.sentence_id) - int(g.error_sentence_id))
                if 1 <= delta <= near_miss_distance:
                    category = MisclassCategory.NEAR_MISS
            except (TypeError, ValueError):
                pass
            labels.append(MisclassificationLabel(
                g.note_id, Task.SENTENCE_DETECTION, category,
                detail=f"gold={g.error_sentence_id} pred={p.sentence_id}"))
    return labels


def misclassification_summary(labels: Sequence[MisclassificationLabel],
                              n_notes: int) -> dict:
    counts = {c.value: 0 for c in MisclassCategory}
    for label in labels:
        counts[label.category.value] += 1
    rates = {k: (v / n_notes if n_notes else None) for k, v in counts.items()}
    return {
        "n_notes": n_notes,
        "n_misses": len(labels),
        "miss_rate": len(labels) / n_notes if n_notes else None,
        "counts": counts,
        "rates": rates,
    }


_TYPE_ORDER = [et.value for et in ErrorType] + ["Unspecified"]


def by_error_type(golds: Sequence[ClinicalNote], preds: Sequence[Prediction],
                  scoring: CorrectionScoring) -> list[dict]:
    """Recall and correction quality per gold error type.

    Every gold-error note lands in exactly one row (untyped ones under
    "Unspecified"), so row denominators sum to the error-present count.
    """
    check_aligned(golds, preds)
    groups: dict[str, list[tuple[ClinicalNote, Prediction]]] = {}
    for g, p in zip(golds, preds):
        if g.error_flag != 1:
            continue
        key = g.error_type.value if g.error_type else "Unspecified"
        groups.setdefault(key, []).append((g, p))
    rows = []
    for key in _TYPE_ORDER:
        if key not in groups:
            continue
        pairs = groups[key]
        n = len(pairs)
        flagged = sum(1 for _, p in pairs if p.flag == 1)
        localized = sum(1 for g, p in pairs
                        if p.flag == 1 and p.sentence_id == g.error_sentence_id)
        def col(attr: str) -> float | None:
            vals = [getattr(scoring.per_note[g.note_id], attr) for g, _ in pairs
                    if g.note_id in scoring.per_note
                    and getattr(scoring.per_note[g.note_id], attr) is not None]
            return sum(vals) / len(vals) if vals else None
        rows.append({
            "error_type": key,
            "n": n,
            "flag_recall": flagged / n,
            "sentence_recall": localized / n,
            "rouge1": col("rouge1"),
            "bertscore": col("bertscore"),
            "bleurt": col("bleurt"),
            "aggscore": col("aggscore"),
        })
    return rows


def by_subset(golds: Sequence[ClinicalNote], preds: Sequence[Prediction],
              scoring: CorrectionScoring) -> list[dict]:
    """Detection and correction quality per source collection."""
    check_aligned(golds, preds)
    rows = []
    for collection in Collection:
        pairs = [(g, p) for g, p in zip(golds, preds) if g.collection is collection]
        if not pairs:
            continue
        n = len(pairs)
        flag_hits = sum(1 for g, p in pairs if p.flag == g.error_flag)
        sent_hits = sum(1 for g, p in pairs if sentence_correct(g, p))
        aggs = [scoring.per_note[g.note_id].aggscore for g, _ in pairs
                if g.note_id in scoring.per_note
                and scoring.per_note[g.note_id].aggscore is not None]
        rouges = [scoring.per_note[g.note_id].rouge1 for g, _ in pairs
                  if g.note_id in scoring.per_note
                  and scoring.per_note[g.note_id].rouge1 is not None]
        rows.append({
            "collection": collection.value,
            "n": n,
            "flag_accuracy": flag_hits / n,
            "sentence_accuracy": sent_hits / n,
            "rouge1": sum(rouges) / len(rouges) if rouges else None,
            "aggscore": sum(aggs) / len(aggs) if aggs else None,
        })
    return rows


def build_analysis(golds: Sequence[ClinicalNote], preds: Sequence[Prediction],
                   scoring: CorrectionScoring, near_miss_distance: int = 1,
                   external_labels: Mapping[str, str] | None = None) -> dict:
    labels = categorize(golds, preds, near_miss_distance)
    label_rows = [{
        "note_id": lb.note_id,
        "task": lb.task.value,
        "category": lb.category.value,
        "detail": lb.detail,
        "external": (external_labels or {}).get(lb.note_id),
    } for lb in labels]
    return {
        "misclassification": misclassification_summary(labels, len(golds)),
        "labels": label_rows,
        "by_error_type": by_error_type(golds, preds, scoring),
        "by_subset": by_subset(golds, preds, scoring),
    }


def format_cell(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def render_tsv(headers: Sequence[str], rows: Sequence[Mapping]) -> str:
    lines = ["\t".join(headers)]
    for row in rows:
        lines.append("\t".join(format_cell(row.get(h)) for h in headers))
    return "\n".join(lines) + "\n"


def render_text_table(headers: Sequence[str], rows: Sequence[Mapping]) -> str:
    cells = [[format_cell(row.get(h)) for h in headers] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    def line(parts: Sequence[str]) -> str:
        return "  ".join(p.ljust(widths[i]) for i, p in enumerate(parts)).rstrip()
    out = [line(headers), line(["-" * w for w in widths])]
    out.extend(line(r) for r in cells)
    return "\n".join(out) + "\n"
