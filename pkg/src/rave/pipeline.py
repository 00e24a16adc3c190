"""End-to-end runs: extract, retrieve, score, select and decide for every claim."""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence, TypeVar

from rave import decision as dec
from rave import extraction
from rave.config import ConfigError, RunConfig
from rave.evaluation import EvalReport, compute_metrics, ingest_corpus
from rave.gateway import Gateway, GatewayError, GatewayMode
from rave.model import Claim, ContextPool, Decision, DecisionError, ExtractionResult, ScoredSnippet, Strategy, write_records
from rave.retrieval import build_pool
from rave.scoring import CredibilityTable, ScoringConfig, default_table, embed_pool, score_pool

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

COUNTER_KEYS = (
    "claims",
    "claim_errors",
    "entities",
    "entities_dropped_unknown_kind",
    "entities_dropped_ungrounded",
    "extraction_failures",
    "zero_entity_claims",
    "search_failures",
    "duplicate_urls_removed",
    "empty_pools",
    "snippets",
    "snippets_dropped",
    "decisions",
    "unparseable",
    "decision_errors",
)


@dataclass
class Prepared:
    """Per-claim retrieval state shared by every strategy, K and alpha."""

    claim: Claim
    extraction: Optional[ExtractionResult] = None
    pool: Optional[ContextPool] = None
    embeddings: dict[int, list[float]] = field(default_factory=dict)
    error: str = ""
    counters: Counter = field(default_factory=Counter)


@dataclass
class RunResult:
    claims: list[Claim]
    decisions: dict[Strategy, list[Decision | DecisionError]]
    extractions: list[ExtractionResult]
    pools: list[ContextPool]
    manifest: dict[str, Any]

    @property
    def exit_code(self) -> int:
        return self.manifest["exit_status"]


class Pipeline:
    def __init__(self, config: RunConfig, gateway: Gateway, table: Optional[CredibilityTable] = None):
        self.config = config
        self.gateway = gateway
        if table is None:
            table = CredibilityTable.from_file(config.credibility_rules) if config.credibility_rules else default_table()
        self.table = table

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        """Apply ``fn`` on a bounded worker pool; results keep input order."""
        workers = self.config.workers or os.cpu_count() or 1
        if workers == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))

    def prepare(self, claim: Claim) -> Prepared:
        prep = Prepared(claim)
        c = prep.counters
        try:
            prep.extraction = extraction.extract_or_empty(claim, self.gateway, c)
            prep.pool = build_pool(
                claim,
                prep.extraction.entities,
                self.gateway,
                results_per_query=self.config.results_per_query,
                fallback_claim_query=self.config.fallback_claim_query,
                counters=c,
            )
            prep.embeddings = embed_pool(prep.pool, self.gateway, c)
            if prep.pool.snippets:
                self.gateway.embed([claim.text])
        except GatewayError as exc:
            logger.error("claim %s: retrieval failed: %s", claim.id, exc)
            prep.error = f"{type(exc).__name__}: {exc}"
            c["claim_errors"] += 1
        return prep

    def score(self, prep: Prepared, alpha: float) -> list[ScoredSnippet]:
        return score_pool(
            prep.claim,
            prep.pool,
            self.gateway,
            ScoringConfig(alpha, self.config.k),
            table=self.table,
            embeddings=prep.embeddings,
        )

    def decide(
        self, prep: Prepared, strategy: Strategy, k: Optional[int] = None, alpha: Optional[float] = None
    ) -> Decision | DecisionError:
        claim = prep.claim
        c = prep.counters
        if strategy is not Strategy.TEXT_ONLY and prep.pool is None:
            c["decision_errors"] += 1
            return DecisionError(claim_id=claim.id, strategy=strategy, error=f"retrieval failed: {prep.error}")
        cfg = ScoringConfig(self.config.alpha if alpha is None else alpha, self.config.k if k is None else k)
        try:
            if strategy is Strategy.TEXT_ONLY:
                inp = dec.StrategyInput.for_strategy(strategy, claim)
            else:
                scored = self.score(prep, cfg.alpha)
                inp = dec.assemble_evidence(
                    strategy,
                    claim,
                    prep.pool,
                    scored,
                    cfg,
                    rng_seed=dec.claim_seed(self.config.seed, claim.id),
                    embeddings=prep.embeddings,
                    results_per_query=self.config.results_per_query,
                )
            result = dec.decide_or_error(inp, self.gateway)
        except GatewayError as exc:
            logger.error("claim %s/%s: %s", claim.id, strategy.value, exc)
            c["decision_errors"] += 1
            return DecisionError(claim_id=claim.id, strategy=strategy, error=f"{type(exc).__name__}: {exc}")
        if isinstance(result, DecisionError):
            logger.warning("claim %s/%s: %s", claim.id, strategy.value, result.error)
            c["unparseable"] += 1
        else:
            c["decisions"] += 1
        return result

    def process(self, claim: Claim, strategies: Sequence[Strategy]) -> tuple[Prepared, dict[Strategy, Decision | DecisionError]]:
        needs_retrieval = any(s is not Strategy.TEXT_ONLY for s in strategies)
        prep = self.prepare(claim) if needs_retrieval else Prepared(claim)
        prep.counters["claims"] += 1
        return prep, {s: self.decide(prep, s) for s in strategies}

    # -- sweeps ----------------------------------------------------------------

    def evaluate_at(
        self, prepared: Sequence[Prepared], strategy: Strategy, *, k: Optional[int] = None, alpha: Optional[float] = None
    ) -> tuple[list[Decision | DecisionError], EvalReport]:
        decisions = self.map(lambda p: self.decide(p, strategy, k=k, alpha=alpha), list(prepared))
        golds = {p.claim.id: p.claim.gold_label for p in prepared}
        report = compute_metrics(
            decisions,
            golds,
            strategy=strategy.value,
            dataset=_dataset_tag(p.claim for p in prepared),
            config=self.snapshot(k=k, alpha=alpha),
        )
        return decisions, report

    def snapshot(self, *, k: Optional[int] = None, alpha: Optional[float] = None) -> dict[str, Any]:
        return {
            "alpha": self.config.alpha if alpha is None else alpha,
            "k": self.config.k if k is None else k,
            "model_id": self.config.model_id,
            "embed_model_id": self.config.embed_model_id,
            "extraction_template": extraction.TEMPLATE_DIGEST,
            "decision_template": dec.TEMPLATE_DIGEST,
            "credibility_rules": self.table.digest,
        }


def _dataset_tag(claims: Iterable[Claim]) -> str:
    tags = sorted({c.source_dataset or "" for c in claims})
    return "+".join(t for t in tags if t)


def make_gateway(config: RunConfig, **kwargs: Any) -> Gateway:
    gw = Gateway(config.gateway_config(), **kwargs)
    return gw


def required_services(strategies: Sequence[Strategy]) -> tuple[str, ...]:
    if all(s is Strategy.TEXT_ONLY for s in strategies):
        return ("chat",)
    return ("chat", "embed", "search")


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_manifest(
    config: RunConfig, pipeline: Pipeline, counters: Counter, started: str, extra: Optional[dict[str, Any]] = None
) -> dict[str, Any]:
    gw = pipeline.gateway
    terminal = counters["claim_errors"] + counters["unparseable"] + counters["decision_errors"]
    manifest = {
        "config": config.snapshot(),
        "templates": {"extraction": extraction.TEMPLATE_DIGEST, "decision": dec.TEMPLATE_DIGEST},
        "credibility_rules_digest": pipeline.table.digest,
        "fixture_cache_digest": gw.cache.digest() if gw.cache is not None else "",
        "started_at": started,
        "finished_at": now(),
        "counters": {key: counters.get(key, 0) for key in COUNTER_KEYS},
        "network_calls": gw.network_calls,
        "exit_status": 1 if terminal else 0,
    }
    manifest.update(extra or {})
    return manifest


def load_claims(config: RunConfig) -> list[Claim]:
    if not config.corpus:
        raise ConfigError("no corpus configured (set --corpus or corpus in the config file)")
    return ingest_corpus(config.corpus, config.corpus_format)


def run_pipeline(
    config: RunConfig,
    claims: Optional[Sequence[Claim]] = None,
    gateway: Optional[Gateway] = None,
    *,
    write: bool = True,
) -> RunResult:
    """Run every configured strategy over the corpus.

    Credentials are checked before the first claim. Per-claim failures are
    recorded as DecisionError lines and make the manifest exit status 1.
    """
    started = now()
    strategies = config.strategy_list
    gateway = gateway or make_gateway(config)
    gateway.check_credentials(required_services(strategies))
    pipeline = Pipeline(config, gateway)
    claims = list(claims) if claims is not None else load_claims(config)

    outcomes = pipeline.map(lambda c: pipeline.process(c, strategies), claims)

    counters: Counter = Counter()
    decisions: dict[Strategy, list[Decision | DecisionError]] = {s: [] for s in strategies}
    extractions, pools = [], []
    for prep, by_strategy in outcomes:
        counters.update(prep.counters)
        if prep.extraction is not None:
            extractions.append(prep.extraction)
        if prep.pool is not None:
            pools.append(prep.pool)
        for s in strategies:
            decisions[s].append(by_strategy[s])

    manifest = build_manifest(config, pipeline, counters, started, {"strategies": [s.value for s in strategies]})
    result = RunResult(claims, decisions, extractions, pools, manifest)
    if write:
        write_run(Path(config.output_dir), result)
    return result


def decisions_path(out_dir: Path, strategy: Strategy) -> Path:
    return out_dir / f"decisions.{strategy.value}.jsonl"


def write_run(out_dir: Path, result: RunResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for strategy, rows in result.decisions.items():
        write_records(decisions_path(out_dir, strategy), rows)
    write_records(out_dir / "extractions.jsonl", result.extractions)
    write_records(out_dir / "pools.jsonl", result.pools)
    write_manifest(out_dir / "manifest.json", result.manifest)


def write_manifest(path: Path, manifest: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def prepare_all(config: RunConfig, claims: Sequence[Claim], gateway: Gateway) -> tuple[Pipeline, list[Prepared]]:
    gateway.check_credentials(("chat", "embed", "search"))
    pipeline = Pipeline(config, gateway)
    return pipeline, pipeline.map(pipeline.prepare, list(claims))


def record_fixtures(
    config: RunConfig,
    claims: Sequence[Claim],
    gateway: Gateway,
    *,
    k_values: Sequence[int] = (),
    alpha_values: Sequence[float] = (),
) -> dict[str, Any]:
    """Populate the response cache for a corpus: every strategy, plus extra K and alpha points for RAVE.

    The gateway must be in RECORD mode.
    """
    if gateway.mode is not GatewayMode.RECORD:
        raise ValueError("record_fixtures needs a gateway in RECORD mode")
    result = run_pipeline(config, claims, gateway, write=False)
    pipeline, prepared = prepare_all(config, claims, gateway)
    for k in k_values:
        pipeline.map(lambda p: pipeline.decide(p, Strategy.RAVE, k=k), prepared)
    for alpha in alpha_values:
        pipeline.map(lambda p: pipeline.decide(p, Strategy.RAVE, alpha=alpha), prepared)
    return {"entries": len(gateway.cache), "cache_digest": gateway.cache.digest(), "exit_status": result.exit_code}
