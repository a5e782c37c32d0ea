"""Prompt construction: zero-shot, random static exemplars, retrieved exemplars.

The instruction template is a versioned text asset; prompts are deterministic
functions of (template, strategy, seed, pool, note), which is what makes cache
keys and golden-run comparisons meaningful.
"""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Sequence

from .corpus import ClinicalNote
from .retrieval import ExemplarIndex, Metric, NonTrainDocument, retrieve

logger = logging.getLogger(__name__)

TEMPLATE_VERSION = "v1"
EXEMPLAR_HEADER = "--- Example ---"
TARGET_HEADER = "--- Text to check ---"


class PromptingError(Exception):
    pass


class PoolTooSmall(PromptingError):
    def __init__(self, requested: int, available: int):
        self.requested = requested
        self.available = available
        super().__init__(f"requested {requested} exemplars, pool has {available}")


class MissingGoldCorrection(PromptingError):
    def __init__(self, note_id: str):
        self.note_id = note_id
        super().__init__(f"note {note_id!r} is flagged but has no gold correction")


class IndexMissing(PromptingError):
    pass


class InvalidStrategy(PromptingError):
    pass


class StrategyKind(str, Enum):
    ZERO_SHOT = "zero"
    SPR = "spr"  # static prompting with seeded random exemplars
    RDP = "rdp"  # dynamic prompting with retrieved exemplars


@dataclass(frozen=True, slots=True)
class PromptStrategy:
    kind: StrategyKind
    n_exemplars: int = 0
    rng_seed: int | None = None
    # SPR only: derive a fresh sample per note instead of one sample per run
    per_note_sampling: bool = False

    def __post_init__(self):
        if self.n_exemplars < 0:
            raise InvalidStrategy(f"n_exemplars must be >= 0, got {self.n_exemplars}")
        if self.kind is StrategyKind.ZERO_SHOT and self.n_exemplars != 0:
            raise InvalidStrategy("zero-shot takes no exemplars")
        if self.kind is StrategyKind.SPR and self.rng_seed is None:
            raise InvalidStrategy("spr requires rng_seed")
        if self.kind is StrategyKind.RDP and self.n_exemplars < 1:
            raise InvalidStrategy("rdp requires n_exemplars >= 1")


@dataclass(frozen=True, slots=True)
class RenderedPrompt:
    note_id: str
    strategy_kind: str
    exemplar_note_ids: tuple[str, ...]
    text: str
    text_hash: str
    exemplars_dropped: int = 0


def template_text() -> str:
    raw = resources.files("medeval").joinpath("assets/prompt_template.txt").read_text("utf-8")
    return raw.rstrip("\n")


def template_hash() -> str:
    return hashlib.sha256(template_text().encode("utf-8")).hexdigest()


def render_note(note: ClinicalNote) -> str:
    """One `id|text` line per sentence, no trailing newline."""
    return "\n".join(f"{s.sentence_id}|{s.text}" for s in note.sentences)


def render_gold_answer(note: ClinicalNote) -> str:
    """The exact output a perfect system would produce for this note."""
    if note.error_flag == 0:
        return "CORRECT"
    if not note.gold_correction:
        raise MissingGoldCorrection(note.note_id)
    return f"{note.error_sentence_id} {note.gold_correction}"


def render_exemplar(note: ClinicalNote) -> str:
    return render_note(note) + "\n" + render_gold_answer(note)


def _derive_seed(seed: int, note_id: str) -> int:
    digest = hashlib.sha256(f"{seed}\x1f{note_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def choose_spr_exemplars(pool_ids: Sequence[str], strategy: PromptStrategy,
                         note_id: str) -> list[str]:
    """Seeded sample from the sorted pool, never including the target note.

    In per-run mode every note sees the same sample (modulo target exclusion);
    in per-note mode the seed is derived from (run seed, note_id).
    """
    ordered = sorted(pool_ids)
    n = strategy.n_exemplars
    if n == 0:
        return []
    available = len([i for i in ordered if i != note_id])
    if available == 0:
        raise PoolTooSmall(n, 0)
    if n > available:
        logger.warning("exemplar pool has %d usable notes, clamping n from %d", available, n)
        n = available
    seed = strategy.rng_seed if not strategy.per_note_sampling \
        else _derive_seed(strategy.rng_seed, note_id)
    rng = random.Random(seed)
    drawn = rng.sample(ordered, min(n + 1, len(ordered)))
    drawn = [i for i in drawn if i != note_id]
    return drawn[:n]


def _assemble(note: ClinicalNote, strategy: PromptStrategy,
              exemplar_texts: Sequence[tuple[str, str]], dropped: int) -> RenderedPrompt:
    blocks = [template_text()]
    for _, text in exemplar_texts:
        blocks.append(EXEMPLAR_HEADER + "\n" + text)
    blocks.append(TARGET_HEADER + "\n" + render_note(note))
    text = "\n\n".join(blocks)
    return RenderedPrompt(
        note_id=note.note_id,
        strategy_kind=strategy.kind.value,
        exemplar_note_ids=tuple(nid for nid, _ in exemplar_texts),
        text=text,
        text_hash=hashlib.sha256(text.encode("utf-8")).hexdigest(),
        exemplars_dropped=dropped,
    )


def build_prompt(
    note: ClinicalNote,
    strategy: PromptStrategy,
    *,
    pool: Sequence[ClinicalNote] | None = None,
    index: ExemplarIndex | None = None,
    metric: Metric = Metric.COSINE,
    max_chars: int | None = None,
) -> RenderedPrompt:
    """Build the full prompt for one note under the given strategy.

    SPR needs `pool` (training notes); RDP needs `index`. The target note is
    never an exemplar, and RDP exemplars are checked against the index's
    training-document set at runtime.
    """
    exemplars: list[tuple[str, str]] = []
    if strategy.kind is StrategyKind.SPR:
        if pool is None:
            raise InvalidStrategy("spr requires an exemplar pool")
        by_id = {n.note_id: n for n in pool}
        for nid in choose_spr_exemplars(list(by_id), strategy, note.note_id):
            exemplars.append((nid, render_exemplar(by_id[nid])))
    elif strategy.kind is StrategyKind.RDP:
        if index is None:
            raise IndexMissing("rdp requires a built exemplar index")
        results = retrieve(index, render_note(note), strategy.n_exemplars + 1, metric)
        results = [r for r in results if r.note_id != note.note_id][:strategy.n_exemplars]
        if len(results) < strategy.n_exemplars:
            logger.warning("retrieved %d exemplars for note %s, wanted %d",
                           len(results), note.note_id, strategy.n_exemplars)
        for r in results:
            if r.note_id not in index.note_ids:
                raise NonTrainDocument(r.note_id)
            exemplars.append((r.note_id, index.docs[r.note_id]))
        logger.debug("note %s exemplars: %s", note.note_id,
                     ",".join(nid for nid, _ in exemplars))

    dropped = 0
    prompt = _assemble(note, strategy, exemplars, dropped)
    while max_chars is not None and len(prompt.text) > max_chars and exemplars:
        exemplars.pop()  # lowest-ranked / last-sampled goes first
        dropped += 1
        prompt = _assemble(note, strategy, exemplars, dropped)
    if dropped:
        logger.warning("note %s: dropped %d exemplars to fit %d chars",
                       note.note_id, dropped, max_chars)
    return prompt
