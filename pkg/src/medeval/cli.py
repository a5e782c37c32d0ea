"""Command-line pipeline: ingest -> index -> run -> score -> compare/report.

Each stage persists its artifact with enough provenance (config fingerprint,
corpus fingerprint, format version) for the next stage to refuse stale or
mismatched inputs instead of silently mixing runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from . import analysis as analysis_mod
from . import corpus as corpus_mod
from . import gateway, metrics, parsing, prompting, retrieval

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    pass


class MissingArtifact(Exception):
    def __init__(self, path: Path, producer: str):
        self.path = path
        self.producer = producer
        super().__init__(f"{path} not found; produce it with the {producer!r} command")


def _check_keys(section: dict, allowed: set[str], context: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} keys: {', '.join(sorted(unknown))}")


@dataclass(frozen=True, slots=True)
class CorpusFile:
    path: str
    split: corpus_mod.Split
    collection: corpus_mod.Collection


@dataclass
class RunConfig:
    workdir: str = "medeval_out"
    cache_dir: str | None = None
    seed: int = 42
    eval_split: corpus_mod.Split = corpus_mod.Split.TEST
    na_policy: metrics.NaPolicy = metrics.NaPolicy.EXCLUDE
    failed_parse_policy: parsing.FailedParsePolicy = parsing.FailedParsePolicy.FLAG_ERROR
    near_miss_distance: int = 1
    max_prompt_chars: int | None = None
    bootstrap_iterations: int = 1000
    corpus_files: list[CorpusFile] = field(default_factory=list)
    schema: corpus_mod.ColumnSchema = corpus_mod.DEFAULT_SCHEMA
    strategy_kind: prompting.StrategyKind = prompting.StrategyKind.ZERO_SHOT
    n_exemplars: int = 0
    per_note_sampling: bool = False
    provider_name: str = "mock"
    model: str = "unset"
    endpoint: str | None = None
    credential_env: str | None = None
    temperature: float = 0.0
    max_in_flight: int = 4
    timeout: float = 60.0
    fixtures: str | None = None
    retry_max_attempts: int = 3
    retry_base_backoff: float = 0.5
    retrieval_metric: retrieval.Metric = retrieval.Metric.COSINE
    chunk: retrieval.ChunkConfig = retrieval.ChunkConfig()
    backend_kind: str = "hashed"
    backend_dim: int = 512
    backend_endpoint: str | None = None
    backend_model: str | None = None
    backend_credential_env: str | None = None
    backend_batch_size: int = 64
    scorer_endpoint: str | None = None
    scorer_timeout: float = 60.0

    # -- derived paths -----------------------------------------------------
    @property
    def out(self) -> Path:
        return Path(self.workdir)

    @property
    def snapshot_path(self) -> Path:
        return self.out / "corpus.jsonl"

    @property
    def index_path(self) -> Path:
        return self.out / "index.jsonl"

    @property
    def predictions_path(self) -> Path:
        return self.out / "predictions.jsonl"

    @property
    def report_path(self) -> Path:
        return self.out / "report.json"

    @property
    def run_log_path(self) -> Path:
        return self.out / "run_log.jsonl"

    @property
    def cache_path(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else self.out / "cache"

    def strategy(self) -> prompting.PromptStrategy:
        return prompting.PromptStrategy(
            kind=self.strategy_kind,
            n_exemplars=self.n_exemplars,
            rng_seed=self.seed if self.strategy_kind is not prompting.StrategyKind.ZERO_SHOT
            else None,
            per_note_sampling=self.per_note_sampling,
        )

    def provider_config(self) -> gateway.ProviderConfig:
        return gateway.ProviderConfig(
            name=self.provider_name,
            model=self.model,
            endpoint=self.endpoint,
            credential_env=self.credential_env,
            temperature=self.temperature,
            max_in_flight=self.max_in_flight,
            timeout=self.timeout,
            retry=gateway.RetryPolicy(self.retry_max_attempts, self.retry_base_backoff),
        )

    def embedder(self) -> retrieval.Embedder:
        if self.backend_kind == "hashed":
            return retrieval.HashedEmbedder(dim=self.backend_dim)
        if self.backend_kind == "remote":
            if not self.backend_endpoint or not self.backend_model:
                raise ConfigError("remote embedding backend needs endpoint and model")
            return retrieval.RemoteEmbedder(
                endpoint=self.backend_endpoint,
                model=self.backend_model,
                credential_env=self.backend_credential_env or "",
                dim=self.backend_dim or None,
                batch_size=self.backend_batch_size,
            )
        raise ConfigError(f"unknown embedding backend kind {self.backend_kind!r}")

    def fingerprint(self) -> str:
        """Hash of every field that can change pipeline outputs.

        Filesystem locations are excluded: corpus content is fingerprinted
        separately and cache/workdir placement cannot alter results.
        """
        semantic = {
            "seed": self.seed,
            "eval_split": self.eval_split.value,
            "na_policy": self.na_policy.value,
            "failed_parse_policy": self.failed_parse_policy.value,
            "near_miss_distance": self.near_miss_distance,
            "max_prompt_chars": self.max_prompt_chars,
            "strategy": {
                "kind": self.strategy_kind.value,
                "n_exemplars": self.n_exemplars,
                "per_note_sampling": self.per_note_sampling,
            },
            "provider": {
                "name": self.provider_name,
                "model": self.model,
                "temperature": self.temperature,
            },
            "retrieval": {
                "metric": self.retrieval_metric.value,
                "chunk": self.chunk.to_dict(),
                "backend": {
                    "kind": self.backend_kind,
                    "dim": self.backend_dim,
                    "model": self.backend_model,
                },
            },
            "template_version": prompting.TEMPLATE_VERSION,
            "template_hash": prompting.template_hash(),
            "schema": {
                "note_id": self.schema.note_id,
                "text": self.schema.text,
                "error_flag": self.schema.error_flag,
                "error_sentence_id": self.schema.error_sentence_id,
                "gold_correction": self.schema.gold_correction,
                "error_type": self.schema.error_type,
            },
        }
        blob = json.dumps(semantic, sort_keys=True, ensure_ascii=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_TOP_KEYS = {"workdir", "cache_dir", "seed", "eval_split", "na_policy",
             "failed_parse_policy", "near_miss_distance", "max_prompt_chars",
             "bootstrap_iterations", "corpus", "strategy", "provider",
             "retrieval", "scorer"}


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must be a mapping")
    return config_from_dict(raw, base_dir=path.parent)


def config_from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    _check_keys(raw, _TOP_KEYS, "top-level")
    cfg = RunConfig()

    def resolve(p: str) -> str:
        if base_dir is None:
            return p
        q = Path(p)
        return str(q if q.is_absolute() else base_dir / q)

    try:
        if "workdir" in raw:
            cfg.workdir = resolve(str(raw["workdir"]))
        if raw.get("cache_dir"):
            cfg.cache_dir = resolve(str(raw["cache_dir"]))
        if "seed" in raw:
            cfg.seed = int(raw["seed"])
        if "eval_split" in raw:
            cfg.eval_split = corpus_mod.Split(raw["eval_split"])
        if "na_policy" in raw:
            cfg.na_policy = metrics.NaPolicy(raw["na_policy"])
        if "failed_parse_policy" in raw:
            cfg.failed_parse_policy = parsing.FailedParsePolicy(raw["failed_parse_policy"])
        if "near_miss_distance" in raw:
            cfg.near_miss_distance = int(raw["near_miss_distance"])
        if raw.get("max_prompt_chars") is not None:
            cfg.max_prompt_chars = int(raw["max_prompt_chars"])
        if "bootstrap_iterations" in raw:
            cfg.bootstrap_iterations = int(raw["bootstrap_iterations"])

        corpus_sec = raw.get("corpus", {})
        _check_keys(corpus_sec, {"files", "schema"}, "corpus")
        schema_sec = corpus_sec.get("schema", {})
        _check_keys(schema_sec, {"note_id", "text", "error_flag", "error_sentence_id",
                                 "gold_correction", "error_type", "collection", "split"},
                    "corpus.schema")
        if schema_sec:
            cfg.schema = corpus_mod.ColumnSchema(
                **{**{k: getattr(corpus_mod.DEFAULT_SCHEMA, k)
                      for k in ("note_id", "text", "error_flag", "error_sentence_id",
                                "gold_correction", "error_type", "collection", "split")},
                   **schema_sec})
        for entry in corpus_sec.get("files", []):
            _check_keys(entry, {"path", "split", "collection"}, "corpus.files")
            cfg.corpus_files.append(CorpusFile(
                path=resolve(entry["path"]),
                split=corpus_mod.Split(entry["split"]),
                collection=corpus_mod.Collection(entry["collection"]),
            ))

        strat = raw.get("strategy", {})
        _check_keys(strat, {"kind", "n_exemplars", "per_note_sampling"}, "strategy")
        if "kind" in strat:
            cfg.strategy_kind = prompting.StrategyKind(strat["kind"])
        if "n_exemplars" in strat:
            cfg.n_exemplars = int(strat["n_exemplars"])
        if "per_note_sampling" in strat:
            cfg.per_note_sampling = bool(strat["per_note_sampling"])

        prov = raw.get("provider", {})
        _check_keys(prov, {"name", "model", "endpoint", "credential_env", "temperature",
                           "max_in_flight", "timeout", "fixtures", "retry"}, "provider")
        if "name" in prov:
            cfg.provider_name = str(prov["name"])
        if "model" in prov:
            cfg.model = str(prov["model"])
        if prov.get("endpoint"):
            cfg.endpoint = str(prov["endpoint"])
        if prov.get("credential_env"):
            cfg.credential_env = str(prov["credential_env"])
        if "temperature" in prov:
            cfg.temperature = float(prov["temperature"])
        if "max_in_flight" in prov:
            cfg.max_in_flight = int(prov["max_in_flight"])
        if "timeout" in prov:
            cfg.timeout = float(prov["timeout"])
        if prov.get("fixtures"):
            cfg.fixtures = resolve(str(prov["fixtures"]))
        retry = prov.get("retry", {})
        _check_keys(retry, {"max_attempts", "base_backoff"}, "provider.retry")
        if "max_attempts" in retry:
            cfg.retry_max_attempts = int(retry["max_attempts"])
        if "base_backoff" in retry:
            cfg.retry_base_backoff = float(retry["base_backoff"])

        retr = raw.get("retrieval", {})
        _check_keys(retr, {"metric", "chunk", "backend"}, "retrieval")
        if "metric" in retr:
            cfg.retrieval_metric = retrieval.Metric(retr["metric"])
        chunk_sec = retr.get("chunk", {})
        _check_keys(chunk_sec, {"max_len", "overlap", "separators"}, "retrieval.chunk")
        if chunk_sec:
            cfg.chunk = retrieval.ChunkConfig(
                max_len=int(chunk_sec.get("max_len", 2000)),
                overlap=int(chunk_sec.get("overlap", 200)),
                separators=tuple(chunk_sec.get("separators", ["\n\n", "\n", " ", ""])),
            )
        backend = retr.get("backend", {})
        _check_keys(backend, {"kind", "dim", "endpoint", "model", "credential_env",
                              "batch_size"}, "retrieval.backend")
        if "kind" in backend:
            cfg.backend_kind = str(backend["kind"])
        if "dim" in backend:
            cfg.backend_dim = int(backend["dim"])
        if backend.get("endpoint"):
            cfg.backend_endpoint = str(backend["endpoint"])
        if backend.get("model"):
            cfg.backend_model = str(backend["model"])
        if backend.get("credential_env"):
            cfg.backend_credential_env = str(backend["credential_env"])
        if "batch_size" in backend:
            cfg.backend_batch_size = int(backend["batch_size"])

        scorer = raw.get("scorer", {})
        _check_keys(scorer, {"endpoint", "timeout"}, "scorer")
        if scorer.get("endpoint"):
            cfg.scorer_endpoint = str(scorer["endpoint"])
        if "timeout" in scorer:
            cfg.scorer_timeout = float(scorer["timeout"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    return cfg


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Command-line flags win over file values."""
    mapping = {
        "strategy": ("strategy_kind", prompting.StrategyKind),
        "n": ("n_exemplars", int),
        "seed": ("seed", int),
        "model": ("model", str),
        "provider": ("provider_name", str),
        "max_in_flight": ("max_in_flight", int),
        "temperature": ("temperature", float),
        "na_policy": ("na_policy", metrics.NaPolicy),
        "scorer_endpoint": ("scorer_endpoint", str),
        "workdir": ("workdir", str),
    }
    for arg_name, (field_name, cast) in mapping.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            try:
                setattr(cfg, field_name, cast(value))
            except ValueError as exc:
                raise ConfigError(f"invalid --{arg_name.replace('_', '-')}: {exc}") from exc
    return cfg


# -- subcommands -----------------------------------------------------------

def cmd_ingest(cfg: RunConfig) -> Path:
    if not cfg.corpus_files:
        raise ConfigError("no corpus files configured (corpus.files)")
    notes: list[corpus_mod.ClinicalNote] = []
    seen: set[str] = set()
    for cf in cfg.corpus_files:
        if not Path(cf.path).exists():
            raise MissingArtifact(Path(cf.path), "corpus download/preparation")
        loaded = corpus_mod.load_corpus(cf.path, collection=cf.collection,
                                        split=cf.split, schema=cfg.schema)
        for note in loaded:
            if note.note_id in seen:
                raise corpus_mod.DuplicateNoteId(note.note_id)
            seen.add(note.note_id)
        notes.extend(loaded)
    fingerprint = corpus_mod.save_snapshot(notes, cfg.snapshot_path)
    stats = corpus_mod.corpus_stats(notes)
    rows = [{"split": k[0], "collection": k[1], "notes": c.note_count,
             "errors": c.error_count, "error_rate": c.error_rate}
            for k, c in sorted(stats.items(), key=lambda kv: (kv[0][0] != "Total", kv[0]))]
    print(analysis_mod.render_text_table(
        ["split", "collection", "notes", "errors", "error_rate"], rows))
    print(f"snapshot: {cfg.snapshot_path} (fingerprint {fingerprint[:12]})")
    return cfg.snapshot_path


def _load_snapshot(cfg: RunConfig) -> tuple[list[corpus_mod.ClinicalNote], str]:
    if not cfg.snapshot_path.exists():
        raise MissingArtifact(cfg.snapshot_path, "ingest")
    return corpus_mod.load_snapshot(cfg.snapshot_path)


def cmd_index(cfg: RunConfig) -> Path:
    notes, _ = _load_snapshot(cfg)
    train = [n for n in notes if n.split is corpus_mod.Split.TRAIN]
    if not train:
        raise ConfigError("snapshot has no Train notes to index")
    docs = [retrieval.ExemplarDocument(n.note_id, prompting.render_exemplar(n))
            for n in train]
    index = retrieval.build_index(
        docs,
        embedder=cfg.embedder(),
        chunk_config=cfg.chunk,
        train_ids={n.note_id for n in train},
        corpus_fingerprint=corpus_mod.corpus_fingerprint(train),
        batch_size=cfg.backend_batch_size,
    )
    retrieval.save_index(index, cfg.index_path)
    print(f"index: {cfg.index_path} ({len(index.docs)} docs, {len(index.chunks)} chunks, "
          f"backend {index.backend_identity})")
    return cfg.index_path


def cmd_run(cfg: RunConfig, provider: gateway.Provider | None = None) -> Path:
    notes, corpus_fp = _load_snapshot(cfg)
    eval_notes = [n for n in notes if n.split is cfg.eval_split]
    if not eval_notes:
        raise ConfigError(f"snapshot has no {cfg.eval_split.value} notes")
    train = [n for n in notes if n.split is corpus_mod.Split.TRAIN]
    strategy = cfg.strategy()

    index = None
    if strategy.kind is prompting.StrategyKind.RDP:
        if not cfg.index_path.exists():
            raise MissingArtifact(cfg.index_path, "index")
        embedder = cfg.embedder()
        index = retrieval.load_index(cfg.index_path, embedder)
        retrieval.check_index_fresh(
            index,
            backend_identity=embedder.identity,
            chunk_config=cfg.chunk,
            corpus_fingerprint=corpus_mod.corpus_fingerprint(train),
        )

    if provider is None:
        provider = _make_provider(cfg)
    provider_cfg = cfg.provider_config()
    cache = gateway.DiskCache(cfg.cache_path)

    prompts = []
    for note in eval_notes:
        prompt = prompting.build_prompt(
            note, strategy, pool=train, index=index,
            metric=cfg.retrieval_metric, max_chars=cfg.max_prompt_chars,
        )
        if strategy.kind is prompting.StrategyKind.RDP:
            leaked = set(prompt.exemplar_note_ids) - {n.note_id for n in train}
            if leaked:
                raise retrieval.NonTrainDocument(sorted(leaked)[0])
        prompts.append(prompt)

    results = gateway.complete_batch(prompts, provider_cfg, cache, provider)

    preds: list[parsing.Prediction] = []
    log_records = []
    for note, prompt, result in zip(eval_notes, prompts, results):
        if isinstance(result, gateway.FailedCompletion):
            logger.warning("note %s: no completion (%s), scoring under failed-parse policy",
                           note.note_id, result.error)
            pred = parsing.parse_completion("", note, cfg.failed_parse_policy)
            log_records.append({"note_id": note.note_id, "exemplars": list(prompt.exemplar_note_ids),
                                "error": result.error, "attempts": result.attempts,
                                "from_cache": False, "parse_status": pred.parse_status.value,
                                "exemplars_dropped": prompt.exemplars_dropped})
        else:
            pred = parsing.parse_completion(result.raw_text, note, cfg.failed_parse_policy)
            log_records.append({"note_id": note.note_id, "exemplars": list(prompt.exemplar_note_ids),
                                "from_cache": result.from_cache, "attempts": result.attempts,
                                "parse_status": pred.parse_status.value,
                                "exemplars_dropped": prompt.exemplars_dropped})
        preds.append(pred)

    metadata = {
        "config_fingerprint": cfg.fingerprint(),
        "corpus_fingerprint": corpus_fp,
        "model": cfg.model,
        "provider": cfg.provider_name,
        "strategy": strategy.kind.value,
        "n_exemplars": strategy.n_exemplars,
        "seed": cfg.seed,
        "eval_split": cfg.eval_split.value,
        "template_version": prompting.TEMPLATE_VERSION,
    }
    parsing.save_predictions(preds, cfg.predictions_path, metadata)
    with open(cfg.run_log_path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in log_records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=True) + "\n")
    n_failed = sum(1 for p in preds if p.parse_status is parsing.ParseStatus.FAILED)
    print(f"predictions: {cfg.predictions_path} ({len(preds)} notes, "
          f"{n_failed} failed parses)")
    return cfg.predictions_path


def _make_provider(cfg: RunConfig) -> gateway.Provider:
    if cfg.provider_name == "mock":
        if not cfg.fixtures:
            raise ConfigError("mock provider requires provider.fixtures")
        if not Path(cfg.fixtures).exists():
            raise MissingArtifact(Path(cfg.fixtures), "fixture preparation")
        return gateway.MockProvider.from_fixture(cfg.fixtures)
    if cfg.provider_name in ("http", "openai", "azure"):
        return gateway.HttpChatProvider()
    raise ConfigError(f"unknown provider {cfg.provider_name!r}")


def cmd_score(cfg: RunConfig, predictions_path: Path | None = None) -> Path:
    notes, corpus_fp = _load_snapshot(cfg)
    golds = [n for n in notes if n.split is cfg.eval_split]
    pred_path = predictions_path or cfg.predictions_path
    if not Path(pred_path).exists():
        raise MissingArtifact(Path(pred_path), "run")
    preds, header = parsing.load_predictions(pred_path)
    if header.get("corpus_fingerprint") not in (None, corpus_fp):
        logger.warning("predictions were produced from a different corpus snapshot")
    if header.get("config_fingerprint") not in (None, cfg.fingerprint()):
        logger.warning("predictions were produced under a different configuration")
    aligned = metrics.align_predictions(golds, preds)

    scorer = None
    if cfg.scorer_endpoint:
        scorer = metrics.ScorerClient(cfg.scorer_endpoint, timeout=cfg.scorer_timeout)

    provenance = {
        "config_fingerprint": cfg.fingerprint(),
        "corpus_fingerprint": corpus_fp,
        "model": header.get("model", cfg.model),
        "provider": header.get("provider", cfg.provider_name),
        "strategy": header.get("strategy", cfg.strategy_kind.value),
        "n_exemplars": header.get("n_exemplars", cfg.n_exemplars),
        "seed": header.get("seed", cfg.seed),
        "eval_split": cfg.eval_split.value,
        "template_version": prompting.TEMPLATE_VERSION,
        "failed_parse_policy": cfg.failed_parse_policy.value,
    }
    report = metrics.build_report(golds, aligned, scorer=scorer,
                                  na_policy=cfg.na_policy, provenance=provenance)
    scoring = metrics.score_corrections(golds, aligned, scorer=scorer,
                                        na_policy=cfg.na_policy)
    tables = analysis_mod.build_analysis(golds, aligned, scoring,
                                         near_miss_distance=cfg.near_miss_distance)
    payload = report.to_dict()
    payload["analysis"] = tables

    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.report_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, ensure_ascii=True, indent=2)
        fh.write("\n")
    _write_tables(payload, cfg.out)
    print(render_report_text(payload))
    print(f"report: {cfg.report_path}")
    return cfg.report_path


def _overall_rows(payload: dict) -> list[dict]:
    overall = payload["overall"]
    correction = payload["correction"]
    return [{
        "n": overall["n_notes"],
        "flag_accuracy": overall["flag_accuracy"],
        "sentence_accuracy": overall["sentence_accuracy"],
        "flag_recall": overall["flag_recall"],
        "sentence_recall": overall["sentence_recall"],
        "fpr": overall["fpr"],
        "rouge1": correction["rouge1"],
        "bertscore": correction["bertscore"],
        "bleurt": correction["bleurt"],
        "aggscore": correction["aggscore"],
        "n_scored": correction["n_scored"],
        "n_na": correction["n_na"],
    }]


_SECTIONS = [
    ("overall", ["n", "flag_accuracy", "sentence_accuracy", "flag_recall",
                 "sentence_recall", "fpr", "rouge1", "bertscore", "bleurt",
                 "aggscore", "n_scored", "n_na"]),
    ("by_error_type", ["error_type", "n", "flag_recall", "sentence_recall",
                       "rouge1", "bertscore", "bleurt", "aggscore"]),
    ("by_subset", ["collection", "n", "flag_accuracy", "sentence_accuracy",
                   "rouge1", "aggscore"]),
    ("misclassification", ["category", "count", "rate"]),
]


def _section_rows(payload: dict, name: str) -> list[dict]:
    if name == "overall":
        return _overall_rows(payload)
    tables = payload.get("analysis", {})
    if name == "misclassification":
        # pin row order: a report loaded from JSON has sorted keys, a fresh
        # one has insertion order, and the rendered tables must not differ
        summary = tables.get("misclassification", {})
        counts = summary.get("counts", {})
        order = [c.value for c in analysis_mod.MisclassCategory]
        keys = [k for k in order if k in counts]
        keys += [k for k in counts if k not in order]
        return [{"category": k, "count": counts[k],
                 "rate": summary.get("rates", {}).get(k)}
                for k in keys]
    return tables.get(name, [])


def _write_tables(payload: dict, out_dir: Path) -> None:
    fingerprint = payload.get("provenance", {}).get("config_fingerprint", "")
    tsv_parts = [f"# config_fingerprint\t{fingerprint}"]
    txt_parts = []
    for name, headers in _SECTIONS:
        rows = _section_rows(payload, name)
        tsv_parts.append(f"# {name}")
        tsv_parts.append(analysis_mod.render_tsv(headers, rows).rstrip("\n"))
        txt_parts.append(f"== {name} ==")
        txt_parts.append(analysis_mod.render_text_table(headers, rows).rstrip("\n"))
        txt_parts.append("")
    with open(out_dir / "report_tables.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(tsv_parts) + "\n")
    with open(out_dir / "report_tables.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(txt_parts) + "\n")


def render_report_text(payload: dict) -> str:
    prov = payload.get("provenance", {})
    lines = [
        f"model={prov.get('model')} strategy={prov.get('strategy')} "
        f"n={prov.get('n_exemplars')} split={prov.get('eval_split')} "
        f"config={str(prov.get('config_fingerprint'))[:12]}",
    ]
    for name, headers in _SECTIONS:
        lines.append(f"== {name} ==")
        lines.append(analysis_mod.render_text_table(headers, _section_rows(payload, name)))
    return "\n".join(lines)


def cmd_report(report_path: Path, out_dir: Path | None = None) -> None:
    with open(report_path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != metrics.REPORT_FORMAT:
        raise ConfigError(f"{report_path} is not a metrics report")
    print(render_report_text(payload))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_tables(payload, out_dir)
        print(f"tables: {out_dir}")


_COMPARE_METRICS = ["flag_correct", "sentence_correct", "rouge1", "aggscore"]


def cmd_compare(path_a: Path, path_b: Path, iterations: int = 1000,
                seed: int = 0, out: Path | None = None) -> dict:
    def load(path: Path) -> dict[str, dict]:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != metrics.REPORT_FORMAT:
            raise ConfigError(f"{path} is not a metrics report")
        return {row["note_id"]: row for row in payload.get("per_note", [])}

    a_rows, b_rows = load(path_a), load(path_b)
    if set(a_rows) != set(b_rows):
        only_a = sorted(set(a_rows) - set(b_rows))[:5]
        only_b = sorted(set(b_rows) - set(a_rows))[:5]
        raise metrics.Misalignment(
            f"reports cover different notes (only in A: {only_a}, only in B: {only_b})")
    ids = sorted(a_rows)

    rows = []
    for metric_name in _COMPARE_METRICS:
        a_vals, b_vals = [], []
        for nid in ids:
            va, vb = a_rows[nid].get(metric_name), b_rows[nid].get(metric_name)
            if va is None or vb is None:
                continue
            a_vals.append(float(va))
            b_vals.append(float(vb))
        if len(a_vals) < 2:
            rows.append({"metric": metric_name, "n": len(a_vals), "mean_a": None,
                         "mean_b": None, "delta": None, "p_value": None})
            continue
        result = metrics.paired_bootstrap(a_vals, b_vals, iterations=iterations, seed=seed)
        rows.append({
            "metric": metric_name,
            "n": len(a_vals),
            "mean_a": sum(a_vals) / len(a_vals),
            "mean_b": sum(b_vals) / len(b_vals),
            "delta": result.delta,
            "p_value": result.p_value,
        })
    headers = ["metric", "n", "mean_a", "mean_b", "delta", "p_value"]
    print(analysis_mod.render_text_table(headers, rows))
    outcome = {"iterations": iterations, "seed": seed, "a": str(path_a),
               "b": str(path_b), "rows": rows}
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(outcome, fh, sort_keys=True, ensure_ascii=True, indent=2)
            fh.write("\n")
    return outcome


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medeval",
        description="Evaluate LLM error detection and correction on clinical notes.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--workdir", help="override artifact directory")

    p = sub.add_parser("ingest", help="load, validate, and snapshot corpus files")
    add_config(p)

    p = sub.add_parser("index", help="build the exemplar retrieval index")
    add_config(p)

    p = sub.add_parser("run", help="build prompts, query the model, parse output")
    add_config(p)
    p.add_argument("--strategy", choices=[k.value for k in prompting.StrategyKind])
    p.add_argument("--n", type=int, help="number of exemplars")
    p.add_argument("--seed", type=int)
    p.add_argument("--model")
    p.add_argument("--provider")
    p.add_argument("--max-in-flight", dest="max_in_flight", type=int)
    p.add_argument("--temperature", type=float)

    p = sub.add_parser("score", help="score predictions into a metrics report")
    add_config(p)
    p.add_argument("--predictions", help="predictions file (default: workdir)")
    p.add_argument("--scorer-endpoint", dest="scorer_endpoint",
                   help="semantic scoring service URL")
    p.add_argument("--na-policy", dest="na_policy",
                   choices=[p.value for p in metrics.NaPolicy])

    p = sub.add_parser("compare", help="paired bootstrap comparison of two reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--bootstrap", type=int, default=1000, help="resample iterations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the comparison as JSON")

    p = sub.add_parser("report", help="render tables from a stored report")
    p.add_argument("report")
    p.add_argument("--out-dir", dest="out_dir")
    return parser


_EXIT_CODES = [
    ((ConfigError, corpus_mod.CorpusError, parsing.ParsingError,
      prompting.PromptingError, metrics.MetricsError, ValueError), 2),
    ((MissingArtifact, retrieval.StaleIndex), 3),
    ((gateway.GatewayError, retrieval.BackendUnavailable), 4),
    ((retrieval.RetrievalError,), 2),
]


def _exit_code(exc: Exception) -> int:
    for types, code in _EXIT_CODES:
        if isinstance(exc, types):
            return code
    return 1


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "compare":
            cmd_compare(Path(args.report_a), Path(args.report_b),
                        iterations=args.bootstrap, seed=args.seed,
                        out=Path(args.out) if args.out else None)
            return 0
        if args.command == "report":
            cmd_report(Path(args.report),
                       Path(args.out_dir) if args.out_dir else None)
            return 0
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "ingest":
            cmd_ingest(cfg)
        elif args.command == "index":
            cmd_index(cfg)
        elif args.command == "run":
            cmd_run(cfg)
        elif args.command == "score":
            pred = Path(args.predictions) if getattr(args, "predictions", None) else None
            cmd_score(cfg, predictions_path=pred)
        return 0
    except Exception as exc:  # noqa: BLE001 - single reporting point for the CLI
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        if isinstance(exc, (KeyboardInterrupt, SystemExit)):
            raise
        logger.debug("command failed", exc_info=True)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
