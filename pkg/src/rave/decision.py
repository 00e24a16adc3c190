"""Evidence assembly per strategy, the shared decision prompt, and verdict parsing.

Six strategies share one prompt template and differ only in the context
block:

    TEXT_ONLY   claim only
    RAND_K      k uniformly sampled snippets (text + domain/title)
    SEARCH_K    first k snippets in search-engine order (text + domain/title)
    RAVE_STATS  aggregated retrieval statistics, no snippets
    RAVE_META   top-k by combined score: domain/title + scores, no text
    RAVE        top-k by combined score: text + domain/title + scores
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from string import Template
from typing import TYPE_CHECKING, Mapping, Optional, Sequence

from rave.jsonblock import find_json_object
from rave.model import (
    Claim,
    ContextPool,
    Decision,
    DecisionError,
    Entity,
    RetrievalStats,
    ScoredSnippet,
    Strategy,
    VerifiabilityLabel,
)
from rave.scoring import ScoringConfig, relevance, select_top_k

if TYPE_CHECKING:
    from rave.gateway import Gateway

logger = logging.getLogger(__name__)

_TEMPLATE_TEXT = Path(__file__).with_name("assets").joinpath("decision_prompt.txt").read_text(encoding="utf-8")
DECISION_TEMPLATE = Template(_TEMPLATE_TEXT)
TEMPLATE_DIGEST = hashlib.sha256(_TEMPLATE_TEXT.encode("utf-8")).hexdigest()

NO_CONTEXT_MARKER = "CONTEXT: no external context provided"
NO_SNIPPETS_MARKER = "CONTEXT: no snippets retrieved"
REPAIR_SUFFIX = (
    "\n\nYour previous reply could not be parsed. Reply with only the JSON object "
    '{"label": ..., "rationale": ...} described above and nothing else.'
)

# strategy -> (show snippet text, show scores)
_FLAGS = {
    Strategy.TEXT_ONLY: (False, False),
    Strategy.RAND_K: (True, False),
    Strategy.SEARCH_K: (True, False),
    Strategy.RAVE_STATS: (False, False),
    Strategy.RAVE_META: (False, True),
    Strategy.RAVE: (True, True),
}


class ConfigurationError(ValueError):
    pass


class DecisionFormatError(ValueError):
    def __init__(self, claim_id: str, raw_output: str):
        super().__init__(f"claim {claim_id}: no parseable verdict in model output")
        self.claim_id = claim_id
        self.raw_output = raw_output


@dataclass(frozen=True)
class StrategyInput:
    strategy: Strategy
    claim: Claim
    evidence: tuple[ScoredSnippet, ...] = ()
    stats: Optional[RetrievalStats] = None
    include_snippet_text: bool = False
    include_scores: bool = False
    rng_seed: Optional[int] = None

    def __post_init__(self):
        text, scores = _FLAGS[self.strategy]
        if (self.include_snippet_text, self.include_scores) != (text, scores):
            raise ConfigurationError(f"{self.strategy.value}: flags must be text={text}, scores={scores}")
        if self.strategy in (Strategy.TEXT_ONLY, Strategy.RAVE_STATS) and self.evidence:
            raise ConfigurationError(f"{self.strategy.value} takes no snippets")
        if (self.strategy is Strategy.RAVE_STATS) != (self.stats is not None):
            raise ConfigurationError("retrieval stats are given to RAVE_STATS and only to it")

    @classmethod
    def for_strategy(cls, strategy: Strategy, claim: Claim, evidence=(), stats=None, rng_seed=None) -> "StrategyInput":
        text, scores = _FLAGS[strategy]
        return cls(strategy, claim, tuple(evidence), stats, text, scores, rng_seed)


def claim_seed(base_seed: int, claim_id: str) -> int:
    """Per-claim RNG seed derived from the run seed; independent of scheduling."""
    digest = hashlib.sha256(f"{base_seed}:{claim_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def search_order(pool: ContextPool, scored: Sequence[ScoredSnippet]) -> list[ScoredSnippet]:
    """Snippets sorted by (entity order, engine rank)."""
    position = {e: i for i, e in enumerate(pool.entities)}
    return sorted(scored, key=lambda s: (position.get(s.snippet.origin_entity, len(position)), s.snippet.rank_in_search))


def compute_stats(
    entities: Sequence[Entity],
    pool: ContextPool,
    embeddings: Sequence[Sequence[float]] = (),
    results_per_query: int = 5,
) -> RetrievalStats:
    """Aggregate retrieval statistics for RAVE_STATS.

    Agreement is the mean pairwise cosine of the snippet embeddings and is
    1.0 for fewer than two snippets.
    """
    n_ent = len(entities)
    size = len(pool.snippets)
    covered = {s.origin_entity for s in pool.snippets}
    entity_coverage = sum(e in covered for e in entities) / n_ent if n_ent else 0.0
    snippet_coverage = min(1.0, size / (n_ent * results_per_query)) if n_ent else 0.0
    diversity = len({s.domain for s in pool.snippets}) / size if size else 0.0
    sims = []
    for u, v in itertools.combinations(embeddings, 2):
        try:
            sims.append(relevance(u, v))
        except ValueError:
            continue
    agreement = sum(sims) / len(sims) if sims else 1.0
    return RetrievalStats(
        entity_count=n_ent,
        entity_coverage=entity_coverage,
        snippet_coverage=snippet_coverage,
        source_diversity=diversity,
        inter_snippet_agreement=max(-1.0, min(1.0, agreement)),
    )


def assemble_evidence(
    strategy: Strategy,
    claim: Claim,
    pool: ContextPool,
    scored: Sequence[ScoredSnippet],
    config: ScoringConfig = ScoringConfig(),
    rng_seed: Optional[int] = None,
    *,
    embeddings: Optional[Mapping[int, Sequence[float]]] = None,
    results_per_query: int = 5,
) -> StrategyInput:
    strategy = Strategy(strategy)
    k = config.k
    if strategy is Strategy.TEXT_ONLY:
        return StrategyInput.for_strategy(strategy, claim)
    if strategy is Strategy.RAND_K:
        if rng_seed is None:
            raise ConfigurationError("RAND_K needs an rng seed")
        picks = random.Random(rng_seed).sample(range(len(scored)), min(k, len(scored)))
        return StrategyInput.for_strategy(strategy, claim, [scored[i] for i in picks], rng_seed=rng_seed)
    if strategy is Strategy.SEARCH_K:
        return StrategyInput.for_strategy(strategy, claim, search_order(pool, scored)[:k])
    if strategy is Strategy.RAVE_STATS:
        vectors = [embeddings[i] for i in sorted(embeddings)] if embeddings else []
        stats = compute_stats(pool.entities, pool, vectors, results_per_query)
        return StrategyInput.for_strategy(strategy, claim, stats=stats)
    return StrategyInput.for_strategy(strategy, claim, select_top_k(scored, k))


def _one_line(text: str) -> str:
    return " ".join(text.split())


def render_context(inp: StrategyInput) -> str:
    if inp.strategy is Strategy.TEXT_ONLY:
        return NO_CONTEXT_MARKER
    if inp.strategy is Strategy.RAVE_STATS:
        st = inp.stats
        return "\n".join(
            [
                "CONTEXT: aggregated retrieval statistics (no snippets shown)",
                f"entities extracted: {st.entity_count}",
                f"entity coverage: {st.entity_coverage:.4f}",
                f"snippet coverage: {st.snippet_coverage:.4f}",
                f"source diversity: {st.source_diversity:.4f}",
                f"inter-snippet agreement: {st.inter_snippet_agreement:.4f}",
            ]
        )
    if not inp.evidence:
        return NO_SNIPPETS_MARKER
    lines = [f"CONTEXT: retrieved evidence, {len(inp.evidence)} snippet(s)"]
    for i, item in enumerate(inp.evidence, 1):
        snip = item.snippet
        lines.append(f"[{i}] domain: {snip.domain}")
        lines.append(f"    title: {_one_line(snip.title)}")
        if inp.include_scores:
            lines.append(f"    relevance: {item.relevance:.4f}")
            lines.append(f"    credibility: {item.credibility:.2f}")
        if inp.include_snippet_text:
            lines.append(f"    text: {_one_line(snip.text)}")
    return "\n".join(lines)


def render_decision_prompt(inp: StrategyInput) -> str:
    return DECISION_TEMPLATE.substitute(claim=inp.claim.text, context=render_context(inp))


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def parse_verdict(raw: str) -> Optional[VerifiabilityLabel]:
    block = find_json_object(raw, "label")
    if block is None or not isinstance(block["label"], str):
        return None
    try:
        return VerifiabilityLabel.from_token(block["label"])
    except ValueError:
        return None


def decide(inp: StrategyInput, gateway: "Gateway") -> Decision:
    """Run the model on the rendered prompt; one repair re-prompt on bad format.

    Raises DecisionFormatError when no verdict can be parsed.
    """
    prompt = render_decision_prompt(inp)
    raw = gateway.complete(prompt)
    label = parse_verdict(raw)
    if label is None:
        logger.info("claim %s/%s: verdict unparseable, re-prompting", inp.claim.id, inp.strategy.value)
        raw = gateway.complete(prompt + REPAIR_SUFFIX)
        label = parse_verdict(raw)
        if label is None:
            raise DecisionFormatError(inp.claim.id, raw)
    return Decision(
        claim_id=inp.claim.id,
        strategy=inp.strategy,
        label=label,
        raw_model_output=raw,
        evidence_used=inp.evidence,
        stats=inp.stats,
        prompt_hash=prompt_hash(prompt),
        template_digest=TEMPLATE_DIGEST,
    )


def decide_or_error(inp: StrategyInput, gateway: "Gateway") -> Decision | DecisionError:
    try:
        return decide(inp, gateway)
    except DecisionFormatError as exc:
        return DecisionError(
            claim_id=inp.claim.id,
            strategy=inp.strategy,
            error=str(exc),
            raw_model_output=exc.raw_output,
            prompt_hash=prompt_hash(render_decision_prompt(inp)),
        )


def input_from_decision(decision: Decision, claim: Claim) -> StrategyInput:
    """Rebuild the strategy input recorded in a decision (used to re-render its prompt)."""
    return StrategyInput.for_strategy(decision.strategy, claim, decision.evidence_used, decision.stats)
