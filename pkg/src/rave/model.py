"""Shared domain types and the one-record-per-line corpus format.

Every record is a frozen pydantic model. On disk a record is a single JSON
object carrying ``schema_version`` and ``record_type`` alongside its fields::

    {"schema_version":1,"record_type":"claim","id":"c1","text":"...","gold_label":"VERIFIABLE",...}

Labels serialize with the hyphenated form ``NON-VERIFIABLE``.
"""

from __future__ import annotations

import enum
import json
from pathlib import Path
from typing import Any, ClassVar, Iterable, Iterator, Optional
from urllib.parse import urlsplit

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

SCHEMA_VERSION = 1

# Table of heuristic source-credibility levels; nothing else is a legal score.
CREDIBILITY_LEVELS: tuple[float, ...] = (1.00, 0.95, 0.85, 0.75, 0.65, 0.50, 0.40)


class RecordError(ValueError):
    """Base class for record parsing problems."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class RecordParseError(RecordError):
    """Line is not a well-formed record of a known type (bad JSON, missing or mistyped field)."""


class RecordValidationError(RecordError):
    """Line is well-formed but violates a type invariant."""


class VerifiabilityLabel(str, enum.Enum):
    VERIFIABLE = "VERIFIABLE"
    NON_VERIFIABLE = "NON-VERIFIABLE"

    @classmethod
    def from_token(cls, token: str) -> "VerifiabilityLabel":
        """Lenient lookup: accepts ``NON_VERIFIABLE``, ``non verifiable`` and friends."""
        norm = " ".join(token.strip().upper().replace("_", " ").replace("-", " ").split())
        if norm == "VERIFIABLE":
            return cls.VERIFIABLE
        if norm in ("NON VERIFIABLE", "NONVERIFIABLE", "NOT VERIFIABLE", "UNVERIFIABLE"):
            return cls.NON_VERIFIABLE
        raise ValueError(f"unknown verifiability label {token!r}")


class EntityKind(str, enum.Enum):
    PERSON = "PERSON"
    ORG = "ORG"
    LOCATION = "LOCATION"
    EVENT = "EVENT"
    CLAIM_OBJECT = "CLAIM_OBJECT"


class Strategy(str, enum.Enum):
    TEXT_ONLY = "TEXT_ONLY"
    RAND_K = "RAND_K"
    SEARCH_K = "SEARCH_K"
    RAVE_STATS = "RAVE_STATS"
    RAVE_META = "RAVE_META"
    RAVE = "RAVE"


def domain_from_url(url: str) -> str:
    """Host of ``url``: scheme, port and a leading ``www.`` removed, lowercased."""
    parts = urlsplit(url if "//" in url else "//" + url)
    host = parts.hostname
    if not host or any(ch.isspace() for ch in host):
        raise ValueError(f"cannot parse a host from url {url!r}")
    host = host.rstrip(".")
    if host.startswith("www."):
        host = host[4:]
    return host


def canonical_url(url: str) -> str:
    """Dedup key for a url.

    Lowercased host without scheme or ``www.``, trailing slash and fragment
    removed, query string kept. Unparseable urls are returned verbatim.
    """
    try:
        host = domain_from_url(url)
        parts = urlsplit(url if "//" in url else "//" + url)
    except ValueError:
        return url
    key = host + parts.path.rstrip("/")
    if parts.query:
        key += "?" + parts.query
    return key


_RECORD_TYPES: dict[str, type["Record"]] = {}


class Record(BaseModel):
    """Immutable base for everything that can be written as a line record."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    record_type: ClassVar[str] = ""

    def __init_subclass__(cls, **kwargs: Any):
        super().__init_subclass__(**kwargs)
        tag = cls.__dict__.get("record_type")
        if tag:
            _RECORD_TYPES[tag] = cls


class Claim(Record):
    record_type: ClassVar[str] = "claim"

    id: str = Field(min_length=1)
    text: str
    gold_label: Optional[VerifiabilityLabel] = None
    source_dataset: Optional[str] = None

    @field_validator("text")
    @classmethod
    def _text_not_blank(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("claim text is empty")
        return v


class Entity(Record):
    record_type: ClassVar[str] = "entity"

    surface: str = Field(min_length=1)
    kind: EntityKind

    @property
    def norm_key(self) -> tuple[str, EntityKind]:
        return (normalize_surface(self.surface), self.kind)


def normalize_surface(text: str) -> str:
    return " ".join(text.split()).casefold()


class Snippet(Record):
    record_type: ClassVar[str] = "snippet"

    text: str
    domain: str
    title: str
    url: str
    origin_entity: Entity
    rank_in_search: int = Field(ge=1)

    @model_validator(mode="after")
    def _domain_matches_url(self) -> "Snippet":
        expected = domain_from_url(self.url)
        if self.domain != expected:
            raise ValueError(f"domain {self.domain!r} does not match url host {expected!r}")
        return self


class ScoredSnippet(Record):
    """A snippet with its relevance, credibility and combined score.

    ``alpha`` is carried so the combined value can be re-checked on load.
    """

    record_type: ClassVar[str] = "scored_snippet"

    snippet: Snippet
    relevance: float = Field(ge=-1.0, le=1.0)
    credibility: float
    alpha: float = Field(ge=0.0, le=1.0)
    combined: float

    @field_validator("credibility")
    @classmethod
    def _credibility_level(cls, v: float) -> float:
        if v not in CREDIBILITY_LEVELS:
            raise ValueError(f"credibility {v!r} is not one of {CREDIBILITY_LEVELS}")
        return v

    @model_validator(mode="after")
    def _combined_consistent(self) -> "ScoredSnippet":
        from rave.scoring import combined_score

        if self.combined != combined_score(self.relevance, self.credibility, self.alpha):
            raise ValueError("combined score is not alpha*relevance + (1-alpha)*credibility")
        return self

    @classmethod
    def build(cls, snippet: Snippet, relevance: float, credibility: float, alpha: float) -> "ScoredSnippet":
        from rave.scoring import combined_score

        return cls(
            snippet=snippet,
            relevance=relevance,
            credibility=credibility,
            alpha=alpha,
            combined=combined_score(relevance, credibility, alpha),
        )


class RetrievalStats(Record):
    record_type: ClassVar[str] = "retrieval_stats"

    entity_count: int = Field(ge=0)
    entity_coverage: float = Field(ge=0.0, le=1.0)
    snippet_coverage: float = Field(ge=0.0, le=1.0)
    source_diversity: float = Field(ge=0.0, le=1.0)
    inter_snippet_agreement: float = Field(ge=-1.0, le=1.0)

    @model_validator(mode="after")
    def _no_entities_no_coverage(self) -> "RetrievalStats":
        if self.entity_count == 0 and self.entity_coverage != 0:
            raise ValueError("entity_coverage must be 0 when entity_count is 0")
        return self


class ExtractionResult(Record):
    record_type: ClassVar[str] = "extraction"

    claim_id: str
    entities: tuple[Entity, ...] = ()
    raw_model_output: str = ""
    template_digest: str = ""
    failed: bool = False
    dropped_unknown_kind: int = Field(default=0, ge=0)
    dropped_ungrounded: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _deduplicated(self) -> "ExtractionResult":
        keys = [e.norm_key for e in self.entities]
        if len(keys) != len(set(keys)):
            raise ValueError("entities are not deduplicated by (surface, kind)")
        return self


class EntityCount(Record):
    record_type: ClassVar[str] = "entity_count"

    entity: Entity
    count: int = Field(ge=0)
    failed: bool = False


class ContextPool(Record):
    record_type: ClassVar[str] = "context_pool"

    claim_id: str
    snippets: tuple[Snippet, ...] = ()
    per_entity_counts: tuple[EntityCount, ...] = ()

    @model_validator(mode="after")
    def _pool_invariants(self) -> "ContextPool":
        keys = [canonical_url(s.url) for s in self.snippets]
        if len(keys) != len(set(keys)):
            raise ValueError("pool contains duplicate urls")
        entities = {c.entity for c in self.per_entity_counts}
        for s in self.snippets:
            if s.origin_entity not in entities:
                raise ValueError(f"snippet origin {s.origin_entity.surface!r} is not a queried entity")
        return self

    @property
    def entities(self) -> list[Entity]:
        return [c.entity for c in self.per_entity_counts]


class Decision(Record):
    record_type: ClassVar[str] = "decision"

    claim_id: str
    strategy: Strategy
    label: VerifiabilityLabel
    raw_model_output: str
    evidence_used: tuple[ScoredSnippet, ...] = ()
    stats: Optional[RetrievalStats] = None
    prompt_hash: str
    template_digest: str = ""

    @model_validator(mode="after")
    def _text_only_has_no_evidence(self) -> "Decision":
        if self.strategy is Strategy.TEXT_ONLY and self.evidence_used:
            raise ValueError("TEXT_ONLY decisions carry no evidence")
        return self


class DecisionError(Record):
    """A claim whose verdict could not be obtained; counted, never defaulted to a label."""

    record_type: ClassVar[str] = "decision_error"

    claim_id: str
    strategy: Strategy
    error: str
    raw_model_output: str = ""
    prompt_hash: str = ""


# -- line format ---------------------------------------------------------------

_SCHEMA_ERROR_TYPES = {"missing", "extra_forbidden", "enum", "literal_error", "model_type", "model_attributes_type"}


def _is_schema_error(err_type: str) -> bool:
    return err_type in _SCHEMA_ERROR_TYPES or err_type.endswith("_type") or err_type.endswith("_parsing")


def record_to_dict(record: Record) -> dict[str, Any]:
    if not record.record_type:
        raise TypeError(f"{type(record).__name__} is not a registered record type")
    return {"schema_version": SCHEMA_VERSION, "record_type": record.record_type, **record.model_dump(mode="json")}


def serialize_record(record: Record) -> str:
    """One-line JSON form of ``record``; lossless through :func:`parse_record`."""
    return json.dumps(record_to_dict(record), ensure_ascii=False, separators=(",", ":"))


def record_from_dict(data: Any) -> Record:
    if not isinstance(data, dict):
        raise RecordParseError("record is not a JSON object")
    data = dict(data)
    version = data.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise RecordParseError(f"unsupported schema_version {version!r}", field="schema_version")
    tag = data.pop("record_type", None)
    cls = _RECORD_TYPES.get(tag) if isinstance(tag, str) else None
    if cls is None:
        raise RecordParseError(f"unknown record_type {tag!r}", field="record_type")
    try:
        return cls.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or tag
        schema = [e for e in exc.errors() if _is_schema_error(e["type"])]
        if schema:
            e = schema[0]
            field = ".".join(str(p) for p in e["loc"]) or tag
            raise RecordParseError(f"{tag}: field {field!r}: {e['msg']}", field=field) from exc
        raise RecordValidationError(f"{tag}: field {field!r}: {first['msg']}", field=field) from exc


def parse_record(line: str) -> Record:
    """Inverse of :func:`serialize_record`.

    Raises RecordParseError for malformed lines and RecordValidationError for
    records that parse but break an invariant.
    """
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordParseError(f"malformed record line: {exc.msg} at column {exc.colno}") from exc
    return record_from_dict(data)


def write_records(path: str | Path, records: Iterable[Record]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(serialize_record(rec))
            fh.write("\n")


def read_records(path: str | Path) -> Iterator[Record]:
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield parse_record(line)
            except RecordError as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}", field=exc.field) from exc
