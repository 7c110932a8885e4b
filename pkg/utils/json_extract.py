import json
import re
from typing import Any, List, Optional

_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\n(.*?)```", re.DOTALL)
_DECODER = json.JSONDecoder()


def find_json_candidates(text: str) -> List[Any]:
    """
    Scans free text for embedded JSON objects or arrays.

    Every bracket-balanced value that decodes is returned in order of appearance;
    nested values are not returned separately from their container.
    """
    candidates = []
    pos = 0
    while True:
        starts = [i for i in (text.find("{", pos), text.find("[", pos)) if i != -1]
        if not starts:
            break
        start = min(starts)
        try:
            value, end = _DECODER.raw_decode(text, start)
        except json.JSONDecodeError:
            pos = start + 1
            continue
        candidates.append(value)
        pos = end
    return candidates


def first_json_object(text: str) -> Optional[dict]:
    """Returns the first embedded JSON object, or None."""
    stripped = text.strip()
    try:
        value = json.loads(stripped)
        if isinstance(value, dict):
            return value
    except json.JSONDecodeError:
        pass
    for value in find_json_candidates(text):
        if isinstance(value, dict):
            return value
    return None


def fenced_blocks(text: str, language: str) -> List[str]:
    """Bodies of ```<language> fenced blocks, in order."""
    return [body for lang, body in _FENCE.findall(text) if lang.lower() == language.lower()]
