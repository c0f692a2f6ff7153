"""LLM-as-judge scoring calls; every judge request runs at temperature 0."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from ..behavior import Conversation
from ..gateway import ChatBackend, ChatRequest, ParseError, as_bool, ask_structured_reply, rationale
from ..prompts import EXAMPLES, render_prompt
from ..scenario import IntentChecklist, Scenario
from .metrics import item_accuracy, persona_alignment, scalar_to_100

JUDGE_TEMPERATURE = 0.0
SCALAR_TEMPLATES = {
    "naturalness": "naturalness_eval",
    "coherence": "coherence_eval",
    "environment_alignment": "environment_alignment_eval",
}
EVENT_TEMPLATES = {
    "persona_alignment": "event_persona_alignment",
    "coherence": "event_coherence",
    "naturalness": "event_naturalness",
}


@dataclass
class JudgeVerdict:
    judge: str
    metric: str
    binaries: list[int] | None = None
    rating: int | None = None
    rationale: str = ""

    def __post_init__(self):
        if self.binaries is not None and any(b not in (0, 1) for b in self.binaries):
            raise ValueError("verdict binaries must be 0 or 1")
        if self.rating is not None and self.rating not in range(1, 6):
            raise ValueError("verdict rating must lie in 1..5")

    def to_record(self) -> dict:
        rec = {"judge": self.judge, "metric": self.metric}
        if self.binaries is not None:
            rec["binaries"] = self.binaries
        if self.rating is not None:
            rec["rating"] = self.rating
        rec["rationale"] = self.rationale
        return rec


def _ask(judge: ChatBackend, prompt: str, tag: str, meta: dict):
    return ask_structured_reply(judge, ChatRequest.single(prompt, tag=tag, temperature=JUDGE_TEMPERATURE, meta=meta))


def _bit(value) -> int:
    if isinstance(value, bool):
        return int(value)
    if value in (0, 1, "0", "1"):
        return int(value)
    raise ValueError(f"not a binary: {value!r}")


def _lookup(out: Mapping, keys: Sequence[str]):
    lowered = {str(k).strip().lower(): v for k, v in out.items()}
    for k in keys:
        if k.lower() in lowered:
            return lowered[k.lower()]
    raise KeyError(keys[0])


def _checklist_text(checklist: IntentChecklist) -> str:
    return "\n".join(f"Checklist item {k}: {it.text}" for k, it in enumerate(checklist.items, 1))


def _item_binaries(out, checklist: IntentChecklist, raw: str) -> list[int]:
    if not isinstance(out, dict):
        raise ParseError("judge: expected a JSON object of item scores", raw=raw)
    bins = []
    for k, it in enumerate(checklist.items, 1):
        try:
            bins.append(_bit(_lookup(out, [f"Checklist item {k}", it.text, str(k)])))
        except (KeyError, ValueError) as e:
            raise ParseError(f"judge: no usable score for checklist item {k} ({e})", raw=raw) from None
    return bins


def _meta(scenario: Scenario, model: str, **kw) -> dict:
    return {"scenario": scenario.id, "model": model, **kw}


def score_intent_recognition(checklist: IntentChecklist, predicted_intents: Sequence[str], conversation: Conversation,
                             judge: ChatBackend, scenario: Scenario, model: str = "") -> tuple[JudgeVerdict, dict]:
    predicted = "\n".join(f"- {p}" for p in predicted_intents) or "(none)"
    prompt = render_prompt("intent_recognition_eval", checklist=_checklist_text(checklist),
                           conversation=conversation.transcript(), predicted_intent=predicted)
    out, raw = _ask(judge, prompt, "judge_items",
                    _meta(scenario, model, kind="recognition", items=[i.text for i in checklist.items],
                          conversation=predicted))
    bins = _item_binaries(out, checklist, raw)
    v = JudgeVerdict(judge.name, "recognition", binaries=bins, rationale=rationale(raw))
    return v, item_accuracy(bins, [i.kind for i in checklist.items])


def score_intent_completion(checklist: IntentChecklist, conversation: Conversation, judge: ChatBackend,
                            scenario: Scenario, model: str = "") -> tuple[JudgeVerdict, dict]:
    prompt = render_prompt("intent_completion_eval", user_profile=scenario.profile.narrative,
                           dialogue_scene=scenario.dialogue_scene, checklist=_checklist_text(checklist),
                           conversation=conversation.transcript())
    out, raw = _ask(judge, prompt, "judge_items",
                    _meta(scenario, model, kind="completion", items=[i.text for i in checklist.items],
                          conversation=conversation.transcript()))
    bins = _item_binaries(out, checklist, raw)
    v = JudgeVerdict(judge.name, "completion", binaries=bins, rationale=rationale(raw))
    return v, item_accuracy(bins, [i.kind for i in checklist.items])


def _rating(out, key: str, raw: str) -> int:
    value = out.get(key) if isinstance(out, dict) else None
    if isinstance(value, str) and value.strip().isdigit():
        value = int(value)
    if isinstance(value, bool) or not isinstance(value, int) or not 1 <= value <= 5:
        raise ParseError(f"judge: '{key}' must be an integer 1..5", raw=raw)
    return value


def score_scalar(conversation: Conversation, metric: str, judge: ChatBackend, scenario: Scenario,
                 model: str = "") -> tuple[JudgeVerdict, float]:
    if metric not in SCALAR_TEMPLATES:
        raise ValueError(f"unknown scalar metric {metric!r}")
    bindings = {"user_profile": scenario.profile.narrative, "dialogue_scene": scenario.dialogue_scene,
                "user_intent": scenario.intent, "conversation": conversation.transcript()}
    prompt = render_prompt(SCALAR_TEMPLATES[metric], bindings)
    out, raw = _ask(judge, prompt, "judge_rating", _meta(scenario, model, metric=metric))
    rating = _rating(out, "rating", raw)
    return JudgeVerdict(judge.name, metric, rating=rating, rationale=rationale(raw)), scalar_to_100(rating)


def score_persona(conversation: Conversation, preferences: Mapping[str, str], judge: ChatBackend,
                  scenario: Scenario, model: str = "") -> tuple[JudgeVerdict, float]:
    dims = list(preferences)
    if not dims:
        raise ValueError("no preference dimensions to judge")
    prompt = render_prompt("persona_alignment_eval", examples=EXAMPLES["persona_alignment_eval"],
                           user_preferences="\n".join(f"- {d}: {lvl}" for d, lvl in preferences.items()),
                           conversation=conversation.transcript())
    out, raw = _ask(judge, prompt, "judge_persona", _meta(scenario, model, dimensions=dims))
    if not isinstance(out, dict):
        raise ParseError("persona judge: expected a JSON object", raw=raw)
    try:
        bins = [_bit(_lookup(out, [d])) for d in dims]
    except (KeyError, ValueError) as e:
        raise ParseError(f"persona judge: missing or bad dimension score ({e})", raw=raw) from None
    return JudgeVerdict(judge.name, "persona_alignment", binaries=bins, rationale=rationale(raw)), \
        persona_alignment(bins)


def rigid_labels(conversation: Conversation, judge: ChatBackend, scenario: Scenario,
                 model: str = "") -> list[bool | None]:
    """One label per assistant reply; an unparseable label is None."""
    labels: list[bool | None] = []
    for i, t in enumerate(conversation.turns):
        if t.speaker != "assistant":
            continue
        prompt = render_prompt("rigid_reasoning_eval", conversation=conversation.transcript(conversation.turns[:i]),
                               reply=t.text)
        try:
            out, _ = _ask(judge, prompt, "judge_rigid", _meta(scenario, model, reply=t.text, turn=i))
            labels.append(as_bool(out["rigid"]))
        except (ParseError, KeyError, TypeError, ValueError):
            labels.append(None)
    return labels


def intention_quality(scenario: Scenario, judge: ChatBackend) -> list[tuple[str, bool]]:
    """Judge whether each checklist intention is a reasonable request; returns (kind, verdict)."""
    out_labels = []
    for item in scenario.checklist.items:
        prompt = render_prompt("intention_quality_eval", user_profile=scenario.profile.narrative,
                               dialogue_scene=scenario.dialogue_scene, event=scenario.event, kind=item.kind,
                               intent=item.text)
        out, raw = _ask(judge, prompt, "judge_intention", {"scenario": scenario.id, "intent": item.text})
        if not isinstance(out, dict) or "reasonable" not in out:
            raise ParseError("intention judge: reply lacks 'reasonable'", raw=raw)
        out_labels.append((item.kind, as_bool(out["reasonable"])))
    return out_labels


def score_event_sequence(profile_text: str, events: Sequence[str], metric: str, judge: ChatBackend,
                         ref: str = "") -> tuple[JudgeVerdict, float]:
    if metric not in EVENT_TEMPLATES:
        raise ValueError(f"unknown event-sequence metric {metric!r}")
    seq = "\n".join(f"{i}. {e}" for i, e in enumerate(events, 1))
    prompt = render_prompt(EVENT_TEMPLATES[metric], {"user_profile": profile_text, "event_sequences": seq})
    out, raw = _ask(judge, prompt, "judge_event_score", {"scenario": ref, "metric": metric, "model": "events"})
    score = _rating(out, "score", raw)
    return JudgeVerdict(judge.name, f"events_{metric}", rating=score, rationale=rationale(raw)), scalar_to_100(score)
