"""Locate a JSON object inside free-form model output."""

from __future__ import annotations

import json
from typing import Any, Optional

_DECODER = json.JSONDecoder()


def find_json_object(text: str, required_key: str) -> Optional[dict[str, Any]]:
    """First JSON object in ``text`` that has ``required_key``.

    Tolerates code fences and prose around the object. Returns None when no
    such object exists.
    """
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = _DECODER.raw_decode(text, pos)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict) and required_key in obj:
            return obj
        pos = text.find("{", pos + 1)
    return None
