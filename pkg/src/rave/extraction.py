"""Zero-shot, prompt-based extraction of typed entities from a claim."""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from pathlib import Path
from string import Template
from typing import TYPE_CHECKING, Any, Optional

from rave.jsonblock import find_json_object
from rave.model import Claim, Entity, EntityKind, ExtractionResult, normalize_surface

if TYPE_CHECKING:
    from rave.gateway import Gateway

logger = logging.getLogger(__name__)

_TEMPLATE_TEXT = Path(__file__).with_name("assets").joinpath("extraction_prompt.txt").read_text(encoding="utf-8")
EXTRACTION_TEMPLATE = Template(_TEMPLATE_TEXT)
TEMPLATE_DIGEST = hashlib.sha256(_TEMPLATE_TEXT.encode("utf-8")).hexdigest()

REPAIR_SUFFIX = (
    "\n\nYour previous reply could not be parsed. Reply with only the JSON object "
    '{"entities": [...]} described above and nothing else.'
)


class ExtractionFormatError(ValueError):
    def __init__(self, claim_id: str, raw_output: str):
        super().__init__(f"claim {claim_id}: entity list could not be parsed from model output")
        self.claim_id = claim_id
        self.raw_output = raw_output


def render_extraction_prompt(claim: Claim) -> str:
    return EXTRACTION_TEMPLATE.substitute(claim=claim.text)


def parse_entities(raw: str, claim_text: str) -> Optional[tuple[list[Entity], int, int]]:
    """Entities from model output as ``(entities, unknown_kinds, ungrounded)``.

    Returns None when the output has no ``{"entities": [...]}`` block.
    Unknown kinds and surfaces that do not occur in the claim are dropped
    and counted; duplicates by (normalized surface, kind) collapse to the
    first mention.
    """
    block = find_json_object(raw, "entities")
    if block is None or not isinstance(block["entities"], list):
        return None
    haystack = normalize_surface(claim_text)
    seen = set()
    entities = []
    unknown = ungrounded = 0
    for item in block["entities"]:
        surface, kind = _item_fields(item)
        if kind is None:
            unknown += 1
            logger.warning("dropping entity %r with unknown kind", item)
            continue
        if not surface or normalize_surface(surface) not in haystack:
            ungrounded += 1
            logger.warning("dropping entity %r: not found in claim text", surface)
            continue
        entity = Entity(surface=surface, kind=kind)
        if entity.norm_key in seen:
            continue
        seen.add(entity.norm_key)
        entities.append(entity)
    return entities, unknown, ungrounded


def _item_fields(item: Any) -> tuple[str, Optional[EntityKind]]:
    if not isinstance(item, dict):
        return "", None
    surface = item.get("text", item.get("surface", ""))
    surface = " ".join(str(surface).split())
    kind_token = str(item.get("type", item.get("kind", ""))).strip().upper().replace(" ", "_")
    try:
        return surface, EntityKind(kind_token)
    except ValueError:
        return surface, None


def extract_entities(claim: Claim, gateway: "Gateway") -> ExtractionResult:
    """Ask the model for the claim's entities, with one format-repair retry.

    Raises ExtractionFormatError when neither reply is parseable.
    """
    prompt = render_extraction_prompt(claim)
    raw = gateway.complete(prompt)
    parsed = parse_entities(raw, claim.text)
    if parsed is None:
        logger.info("claim %s: extraction output unparseable, re-prompting", claim.id)
        raw = gateway.complete(prompt + REPAIR_SUFFIX)
        parsed = parse_entities(raw, claim.text)
        if parsed is None:
            raise ExtractionFormatError(claim.id, raw)
    entities, unknown, ungrounded = parsed
    return ExtractionResult(
        claim_id=claim.id,
        entities=tuple(entities),
        raw_model_output=raw,
        template_digest=TEMPLATE_DIGEST,
        dropped_unknown_kind=unknown,
        dropped_ungrounded=ungrounded,
    )


def extract_or_empty(claim: Claim, gateway: "Gateway", counters: Optional[Counter] = None) -> ExtractionResult:
    """Pipeline wrapper: a format failure yields zero entities instead of an exception."""
    try:
        result = extract_entities(claim, gateway)
    except ExtractionFormatError as exc:
        logger.warning("%s; continuing with zero entities", exc)
        if counters is not None:
            counters["extraction_failures"] += 1
        result = ExtractionResult(
            claim_id=claim.id, raw_model_output=exc.raw_output, template_digest=TEMPLATE_DIGEST, failed=True
        )
    if counters is not None:
        counters["entities"] += len(result.entities)
        counters["entities_dropped_unknown_kind"] += result.dropped_unknown_kind
        counters["entities_dropped_ungrounded"] += result.dropped_ungrounded
        if not result.entities:
            counters["zero_entity_claims"] += 1
    return result
