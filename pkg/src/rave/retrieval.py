"""Per-claim context pool: one search per entity, merged and url-deduplicated."""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from typing import TYPE_CHECKING, Optional, Sequence

from rave.gateway import GatewayError, SearchHit
from rave.model import Claim, ContextPool, Entity, EntityCount, EntityKind, Snippet, canonical_url

if TYPE_CHECKING:
    from rave.gateway import Gateway

logger = logging.getLogger(__name__)


def dedup_key(snippet: Snippet) -> str:
    return canonical_url(snippet.url)


def _query(gateway: "Gateway", entity: Entity, n: int) -> tuple[list[SearchHit], bool]:
    try:
        return gateway.search(entity.surface, n), False
    except GatewayError as exc:
        logger.warning("search failed for %r: %s", entity.surface, exc)
        return [], True


def build_pool(
    claim: Claim,
    entities: Sequence[Entity],
    gateway: "Gateway",
    *,
    results_per_query: Optional[int] = None,
    fallback_claim_query: bool = False,
    max_workers: int = 4,
    counters: Optional[Counter] = None,
) -> ContextPool:
    """Search each entity surface and merge the hits.

    Order is entity order then engine rank; the first snippet seen for a url
    wins. A failed search contributes nothing and is flagged in
    ``per_entity_counts``. With no entities the pool is empty unless
    ``fallback_claim_query`` is set, in which case the whole claim text is
    searched as a single CLAIM_OBJECT (off by default).
    """
    n = results_per_query or gateway.config.results_per_query
    entities = list(entities)
    if not entities and fallback_claim_query:
        entities = [Entity(surface=" ".join(claim.text.split()), kind=EntityKind.CLAIM_OBJECT)]
    if not entities:
        if counters is not None:
            counters["empty_pools"] += 1
        return ContextPool(claim_id=claim.id)

    if max_workers > 1 and len(entities) > 1:
        with ThreadPoolExecutor(max_workers=min(max_workers, len(entities))) as ex:
            results = list(ex.map(lambda e: _query(gateway, e, n), entities))
    else:
        results = [_query(gateway, e, n) for e in entities]

    snippets: list[Snippet] = []
    seen: set[str] = set()
    counts = []
    duplicates = 0
    for entity, (hits, failed) in zip(entities, results):
        counts.append(EntityCount(entity=entity, count=len(hits), failed=failed))
        for hit in hits:
            snippet = Snippet(
                text=hit.text,
                domain=hit.domain,
                title=hit.title,
                url=hit.url,
                origin_entity=entity,
                rank_in_search=hit.rank,
            )
            key = dedup_key(snippet)
            if key in seen:
                duplicates += 1
                continue
            seen.add(key)
            snippets.append(snippet)

    failures = sum(c.failed for c in counts)
    if failures == len(counts):
        logger.warning("claim %s: every entity search failed; continuing with an empty pool", claim.id)
    if counters is not None:
        counters["search_failures"] += failures
        counters["duplicate_urls_removed"] += duplicates
        counters["snippets"] += len(snippets)
        if not snippets:
            counters["empty_pools"] += 1
    return ContextPool(claim_id=claim.id, snippets=tuple(snippets), per_entity_counts=tuple(counts))
