"""Relevance, source credibility, the combined score and top-K selection."""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Optional, Sequence

import numpy as np

from rave.model import CREDIBILITY_LEVELS, Claim, ContextPool, ScoredSnippet

if TYPE_CHECKING:
    from rave.gateway import Gateway

logger = logging.getLogger(__name__)

ASSETS_DIR = Path(__file__).with_name("assets")

DEFAULT_ALPHA = 0.6
DEFAULT_K = 3


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested for a zero vector."""


@dataclass(frozen=True)
class ScoringConfig:
    alpha: float = DEFAULT_ALPHA
    k: int = DEFAULT_K

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 1:
            raise ValueError(f"k must be an integer >= 1, got {self.k!r}")


def relevance(claim_embedding: Sequence[float], snippet_embedding: Sequence[float]) -> float:
    """Cosine similarity between two embeddings, clamped to [-1, 1]."""
    u = np.asarray(claim_embedding, dtype=np.float64)
    v = np.asarray(snippet_embedding, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"embedding shapes differ: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero vector")
    cos = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, cos))


def combined_score(r: float, c: float, alpha: float) -> float:
    return alpha * r + (1 - alpha) * c


# -- credibility ---------------------------------------------------------------

RULE_KINDS = ("exact", "suffix", "keyword", "default")


@dataclass(frozen=True)
class CredibilityRule:
    kind: str
    pattern: str
    score: float
    priority: int

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if self.score not in CREDIBILITY_LEVELS:
            raise ValueError(f"rule score {self.score} is not a credibility level")

    def matches(self, host: str) -> bool:
        if self.kind == "exact":
            return host == self.pattern or host.endswith("." + self.pattern)
        if self.kind == "suffix":
            return host == self.pattern.lstrip(".") or host.endswith(self.pattern)
        if self.kind == "keyword":
            return self.pattern in host
        return True


class CredibilityTable:
    """Priority-ordered domain rules; the first rule that matches decides the score."""

    def __init__(self, rules: Sequence[CredibilityRule], digest: str = ""):
        rules = sorted(rules, key=lambda r: r.priority)
        if not rules or rules[-1].kind != "default":
            raise ValueError("the last credibility rule must be the default rule")
        if sum(r.kind == "default" for r in rules) != 1:
            raise ValueError("exactly one default credibility rule is required")
        self.rules = tuple(rules)
        self.digest = digest

    @classmethod
    def parse(cls, text: str) -> "CredibilityTable":
        rules = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(f"credibility rules line {lineno}: expected 3 tab-separated fields")
            kind, pattern, score = fields
            rules.append(CredibilityRule(kind, pattern.lower(), float(score), priority=len(rules)))
        return cls(rules, digest=hashlib.sha256(text.encode("utf-8")).hexdigest())

    @classmethod
    def from_file(cls, path: str | Path) -> "CredibilityTable":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def rule_for(self, domain: str) -> CredibilityRule:
        host = domain.lower().rstrip(".")
        for rule in self.rules:
            if rule.matches(host):
                return rule
        raise AssertionError("default rule always matches")

    def score(self, domain: str) -> float:
        return self.rule_for(domain).score


@lru_cache(maxsize=1)
def default_table() -> CredibilityTable:
    return CredibilityTable.from_file(ASSETS_DIR / "credibility_rules.tsv")


def credibility(domain: str, table: Optional[CredibilityTable] = None) -> float:
    return (table or default_table()).score(domain)


# -- pool scoring and selection ------------------------------------------------


def embedding_text(snippet) -> str:
    return snippet.text.strip() or snippet.title.strip()


def embed_pool(pool: ContextPool, gateway: "Gateway", counters: Optional[Counter] = None) -> dict[int, list[float]]:
    """Embeddings keyed by snippet position; snippets that cannot be embedded are absent."""
    texts = {i: embedding_text(s) for i, s in enumerate(pool.snippets)}
    usable = {i: t for i, t in texts.items() if t}
    for i in texts.keys() - usable.keys():
        logger.warning("claim %s: snippet %s has no text to embed; dropped", pool.claim_id, pool.snippets[i].url)
        if counters is not None:
            counters["snippets_dropped"] += 1
    if not usable:
        return {}
    order = sorted(usable)
    try:
        vectors = gateway.embed([usable[i] for i in order])
        return dict(zip(order, vectors))
    except Exception as exc:  # isolate the failing snippet(s)
        logger.warning("claim %s: batch embedding failed (%s); retrying per snippet", pool.claim_id, exc)
    out = {}
    for i in order:
        try:
            out[i] = gateway.embed([usable[i]])[0]
        except Exception as exc:
            logger.warning("claim %s: embedding failed for %s: %s", pool.claim_id, pool.snippets[i].url, exc)
            if counters is not None:
                counters["snippets_dropped"] += 1
    return out


def score_pool(
    claim: Claim,
    pool: ContextPool,
    gateway: "Gateway",
    config: ScoringConfig = ScoringConfig(),
    *,
    table: Optional[CredibilityTable] = None,
    embeddings: Optional[Mapping[int, Sequence[float]]] = None,
    counters: Optional[Counter] = None,
) -> list[ScoredSnippet]:
    """Score every snippet in ``pool`` against ``claim``.

    Snippets whose embedding is missing or degenerate are dropped and counted
    under ``snippets_dropped``. Pass ``embeddings`` (from :func:`embed_pool`)
    to reuse vectors already fetched for the pool.
    """
    if not pool.snippets:
        return []
    table = table or default_table()
    claim_vec = gateway.embed([claim.text])[0]
    if embeddings is None:
        embeddings = embed_pool(pool, gateway, counters)
    scored = []
    for i, snippet in enumerate(pool.snippets):
        vec = embeddings.get(i)
        if vec is None:
            continue
        try:
            r = relevance(claim_vec, vec)
        except ValueError as exc:
            logger.warning("claim %s: relevance undefined for %s: %s", claim.id, snippet.url, exc)
            if counters is not None:
                counters["snippets_dropped"] += 1
            continue
        scored.append(ScoredSnippet.build(snippet, r, table.score(snippet.domain), config.alpha))
    return scored


def selection_key(item: tuple[int, ScoredSnippet]):
    idx, s = item
    return (-s.combined, -s.credibility, s.snippet.rank_in_search, idx)


def select_top_k(scored: Sequence[ScoredSnippet], k: int) -> list[ScoredSnippet]:
    """The ``min(k, n)`` best snippets by combined score, best first.

    Ties go to higher credibility, then better engine rank, then input order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(enumerate(scored), key=selection_key)
    return [s for _, s in ranked[:k]]
