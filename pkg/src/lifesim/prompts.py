"""Prompt template catalog.

Templates live in ``templates/<name>.txt`` and use ``str.format`` syntax, so
literal braces in JSON examples are doubled. A different directory can be
swapped in with :func:`set_template_dir`.
"""

from __future__ import annotations

import string
from functools import lru_cache
from pathlib import Path
from typing import Mapping

_DEFAULT_DIR = Path(__file__).parent / "templates"
_template_dir = _DEFAULT_DIR


class TemplateError(KeyError):
    def __str__(self):
        return str(self.args[0])


def set_template_dir(path: str | Path | None):
    global _template_dir
    _template_dir = Path(path) if path else _DEFAULT_DIR
    _load.cache_clear()


def template_names() -> list[str]:
    return sorted(p.stem for p in _template_dir.glob("*.txt"))


@lru_cache(maxsize=None)
def _load(name: str) -> str:
    path = _template_dir / f"{name}.txt"
    if not path.exists():
        raise TemplateError(f"unknown template {name!r}")
    return path.read_text()


def placeholders(name: str) -> list[str]:
    fields = []
    for _, field, _, _ in string.Formatter().parse(_load(name)):
        if field is not None and field not in fields:
            fields.append(field)
    return fields


def render_prompt(name: str, bindings: Mapping[str, object] | None = None, **kw) -> str:
    values = dict(bindings or {}, **kw)
    missing = [f for f in placeholders(name) if f not in values]
    if missing:
        raise TemplateError(f"template {name!r}: unbound placeholder {{{missing[0]}}}")
    return _load(name).format(**{k: "" if v is None else v for k, v in values.items()})


# Short in-context examples bound to the {examples} slots.
EXAMPLES = {
    "pseudo_profile": (
        "Example: Youth (18-35 years old), Asian, not religious, Cities, Middle Income, working. "
        "Personality traits include: curious, organized. Preferences expressed in daily life and "
        "communication include: prefers concise answers; enjoys trying new cafes after work."
    ),
    "intent_normalization": (
        'Example question: "how do i stop my knees hurting when i run" -> '
        '{"is_valid_intent": "true", "intent": "The user wants to reduce knee pain while running."}'
    ),
    "trigger_events": (
        'For the intention: "The user wants to understand whether a weighted blanket affects muscle '
        'growth", a possible triggering event could be: "Recently resumed strength training but '
        'noticed that muscle growth has plateaued."'
    ),
    "event_refinement": (
        "Event: NAME_1 skipped lunch at the office. Intent: The user wants a quick snack idea.\n"
        '-> {"event": "After a long meeting ran over lunch, the user is hungry at their desk.", '
        '"intent": "Looking for a quick, healthy snack to get through the afternoon."}'
    ),
    "subintent_extraction": (
        'Intent: "The user wants to soothe a twisted ankle after jogging." -> '
        '["Seeks quick remedies for ankle pain.", "Wants to know when it is safe to run again.", '
        '"Hopes to avoid similar injuries in future."]'
    ),
    "intent_classification": (
        '[{"description": "Seeks quick remedies for ankle pain.", "type": "explicit"}, '
        '{"description": "Hopes to avoid similar injuries in future.", "type": "implicit"}]'
    ),
    "persona_alignment_eval": '{"Preference for concise communication": 1, "Need for autonomy": 0}',
}
