"""Sub-intent decomposition and explicit/implicit labelling."""

from __future__ import annotations

from typing import Sequence

from ..gateway import ChatBackend, ChatRequest, ParseError, ask_structured
from ..profiles import UserProfile
from ..prompts import EXAMPLES, render_prompt
from ..scenario import KINDS, ChecklistItem, IntentChecklist, check_kind_balance

MIN_ITEMS, MAX_ITEMS = 2, 6


class ChecklistError(ValueError):
    pass


def decompose_intent(profile: UserProfile, dialogue_scene: str, event: str, intent: str,
                     chat: ChatBackend) -> list[str]:
    prompt = render_prompt("subintent_extraction", examples=EXAMPLES["subintent_extraction"],
                           user_profile=profile.narrative, dialogue_scene=dialogue_scene, event=event,
                           user_intent=intent)
    out = ask_structured(chat, ChatRequest.single(prompt, tag="decompose", temperature=0.0,
                                                  meta={"intent": intent}))
    if not isinstance(out, list) or not all(isinstance(x, str) and x.strip() for x in out):
        raise ParseError("decompose: expected a JSON array of strings", raw=str(out))
    items = [x.strip() for x in out]
    if len(items) > MAX_ITEMS:
        raise ChecklistError(f"decompose: {len(items)} sub-intents exceeds the maximum {MAX_ITEMS}")
    if len(items) < MIN_ITEMS:
        raise ChecklistError(f"decompose: {len(items)} sub-intent(s) is below the minimum {MIN_ITEMS}")
    return items


def classify_intents(sub_intents: Sequence[str], profile: UserProfile, dialogue_scene: str, event: str,
                     chat: ChatBackend, scenario_ref: str = "") -> IntentChecklist:
    listing = "\n".join(f"{i}. {s}" for i, s in enumerate(sub_intents, 1))
    prompt = render_prompt("intent_classification", examples=EXAMPLES["intent_classification"],
                           user_profile=profile.narrative, dialogue_scene=dialogue_scene, event=event,
                           user_sub_intent=listing)
    out = ask_structured(chat, ChatRequest.single(prompt, tag="classify", temperature=0.0,
                                                  meta={"items": list(sub_intents)}))
    if not isinstance(out, list) or len(out) != len(sub_intents):
        raise ParseError(f"classify: expected {len(sub_intents)} labelled items", raw=str(out))
    items = []
    for src, rec in zip(sub_intents, out):
        kind = rec.get("type") if isinstance(rec, dict) else None
        if kind not in KINDS:
            raise ParseError(f"classify: bad type {kind!r}", raw=str(out))
        items.append(ChecklistItem(str(rec.get("description") or src), kind))
    try:
        check_kind_balance([i.kind for i in items])
    except ValueError as e:
        raise ChecklistError(f"classify: {e}") from None
    return IntentChecklist(tuple(items), scenario_ref)
