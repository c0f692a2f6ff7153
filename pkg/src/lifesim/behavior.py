"""User-side behavior: memory perception, emotion, action, and utterance, plus the dialogue loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .gateway import ChatBackend, ChatRequest, Embedder, GatewayError, ParseError, as_bool, ask_structured
from .prompts import render_prompt
from .records import dumps, read_jsonl
from .rng import derive_seed
from .scenario import Scenario
from .synthetic import EMOTIONS

log = logging.getLogger(__name__)

DEFAULT_THETA = 0.7
ACTIONS = {"Continue Conversation": "continue", "End Conversation": "end"}


class BehaviorError(GatewayError):
    pass


@dataclass(frozen=True)
class MemoryEntry:
    query: str
    value: str
    embedding: np.ndarray
    source_turn: int

    def __post_init__(self):
        if abs(np.linalg.norm(self.embedding) - 1.0) > 1e-6:
            raise ValueError("memory embedding is not unit-norm")


@dataclass(frozen=True)
class MemoryPerception:
    stored: MemoryEntry | None
    negative: bool
    max_similarity: float

    def describe(self) -> str:
        if self.negative:
            return ("Negative memory perception: the assistant's latest reply repeats advice you have "
                    f"already received (similarity {self.max_similarity:.2f}). You find this unhelpful.")
        return "No negative memory perception: the latest reply does not repeat earlier advice."

    def to_record(self) -> dict:
        rec = {"negative": self.negative, "max_similarity": round(self.max_similarity, 6)}
        if self.stored is not None:
            rec["stored"] = {"query": self.stored.query, "value": self.stored.value,
                             "source_turn": self.stored.source_turn}
        return rec


@dataclass
class MemoryStore:
    entries: list[MemoryEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def similarities(self, vec: np.ndarray) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.stack([e.embedding for e in self.entries]) @ vec


@dataclass
class Turn:
    speaker: str
    text: str
    emotion: str | None = None
    action: str | None = None
    predicted_intent: str | None = None
    memory: MemoryPerception | None = None

    def to_record(self, index: int) -> dict:
        rec = {"type": "turn", "index": index, "speaker": self.speaker, "text": self.text}
        if self.speaker == "user":
            rec.update(emotion=self.emotion, action=self.action,
                       memory=self.memory.to_record() if self.memory else None)
        else:
            rec["predicted_intent"] = self.predicted_intent
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Turn":
        mem = rec.get("memory")
        perception = None
        if mem:
            perception = MemoryPerception(None, mem["negative"], mem["max_similarity"])
        return cls(rec["speaker"], rec["text"], rec.get("emotion"), rec.get("action"),
                   rec.get("predicted_intent"), perception)


@dataclass
class Conversation:
    scenario_ref: str
    turns: list[Turn] = field(default_factory=list)
    ended_by: str | None = None  # user_action | turn_cap | error
    error: str | None = None
    seed: int = 0
    backends: dict = field(default_factory=dict)

    def check(self, max_turns: int | None = None):
        for i, t in enumerate(self.turns):
            if t.speaker != ("user" if i % 2 == 0 else "assistant"):
                raise ValueError(f"turn {i} breaks user/assistant alternation")
        if max_turns is not None and len(self.turns) > 2 * max_turns:
            raise ValueError("conversation exceeds its turn cap")

    @property
    def assistant_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.speaker == "assistant"]

    @property
    def predicted_intents(self) -> list[str]:
        """Distinct predicted intents in first-seen order."""
        out: list[str] = []
        for t in self.assistant_turns:
            if t.predicted_intent and t.predicted_intent not in out:
                out.append(t.predicted_intent)
        return out

    def transcript(self, turns: Sequence[Turn] | None = None) -> str:
        turns = self.turns if turns is None else turns
        return "\n".join(f"{t.speaker.capitalize()}: {t.text}" for t in turns) or "(no dialogue yet)"

    def header(self) -> dict:
        return {"type": "header", "scenario": self.scenario_ref, "seed": self.seed, "backends": self.backends,
                "ended_by": self.ended_by, "error": self.error, "n_turns": len(self.turns)}

    def dumps(self) -> str:
        lines = [dumps(self.header())] + [dumps(t.to_record(i)) for i, t in enumerate(self.turns)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_lines(cls, source) -> "Conversation":
        rows = [rec for _, rec in read_jsonl(source)]
        if not rows or rows[0].get("type") != "header":
            raise ValueError("conversation stream must start with a header record")
        h = rows[0]
        return cls(h["scenario"], [Turn.from_record(r) for r in rows[1:]], h.get("ended_by"), h.get("error"),
                   h.get("seed", 0), h.get("backends") or {})

    def save(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.dumps(), encoding="utf-8")
        return p


# --- user-side stages -------------------------------------------------------------

@dataclass
class UserContext:
    scenario: Scenario
    conversation: Conversation

    def bindings(self) -> dict:
        sc = self.scenario
        return {"profile": sc.profile.narrative, "event": sc.event, "intent": sc.intent,
                "dialogue_scene": sc.dialogue_scene,
                "conversation_context": self.conversation.transcript()}


def perceive_memory(reply: str, store: MemoryStore, embedder: Embedder, theta: float, chat: ChatBackend,
                    ctx: UserContext, turn_index: int) -> MemoryPerception:
    """Compare the reply with stored memories, then let the backend decide whether to store it."""
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    vec = embedder.embed_one(reply)
    sims = store.similarities(vec)
    max_sim = float(sims.max()) if sims.size else 0.0
    negative = max_sim > theta
    prompt = render_prompt("memory_perception", ctx.bindings(), content=reply)
    out = ask_structured(chat, ChatRequest.single(prompt, tag="memory", meta={
        "content": reply, "intent": ctx.scenario.intent, "turn_index": turn_index}))
    if not isinstance(out, dict) or "need_store" not in out:
        raise ParseError("memory perception: reply lacks need_store", raw=str(out))
    stored = None
    if as_bool(out["need_store"]):
        value = str(out.get("response", "")).strip()
        query = str(out.get("query", "")).strip()
        if not value or value == "-1":
            raise ParseError("memory perception: need_store without a response", raw=str(out))
        stored = MemoryEntry(query, value, embedder.embed_one(value), turn_index)
        store.entries.append(stored)
    return MemoryPerception(stored, negative, max_sim)


def infer_emotion(ctx: UserContext, perception: MemoryPerception | None, chat: ChatBackend,
                  taxonomy: Sequence[str] = EMOTIONS, turn_index: int = 1) -> str:
    prompt = render_prompt("emotion_inference", ctx.bindings(), perception=_perception_text(perception),
                           emotion_options=", ".join(taxonomy))
    out = ask_structured(chat, ChatRequest.single(prompt, tag="emotion", meta={
        "intent": ctx.scenario.intent, "turn_index": turn_index,
        "negative": bool(perception and perception.negative), "options": list(taxonomy)}))
    label = out.get("emotion") if isinstance(out, dict) else None
    if not isinstance(label, str):
        raise ParseError("emotion: reply lacks 'emotion'", raw=str(out))
    label = label.strip().lower()
    if label not in taxonomy:
        raise BehaviorError(f"emotion {label!r} is not in the taxonomy")
    return label


def select_action(ctx: UserContext, emotion: str, perception: MemoryPerception | None, chat: ChatBackend,
                  turn_index: int = 1) -> str:
    prompt = render_prompt("action_decision", ctx.bindings(), emotion=emotion,
                           perception=_perception_text(perception), action_options=", ".join(ACTIONS))
    out = ask_structured(chat, ChatRequest.single(prompt, tag="action", meta={
        "intent": ctx.scenario.intent, "turn_index": turn_index,
        "negative": bool(perception and perception.negative)}))
    raw = out.get("action") if isinstance(out, dict) else None
    if raw not in ACTIONS:
        raise BehaviorError(f"action {raw!r} is not one of {list(ACTIONS)}")
    return ACTIONS[raw]


def _perception_text(p: MemoryPerception | None) -> str:
    return p.describe() if p is not None else "None (first turn)."


def user_messages(ctx: UserContext, turn_prompt: str) -> tuple:
    sc = ctx.scenario
    system = render_prompt(
        "user_system", profile=sc.profile.narrative, dialogue_scene=sc.dialogue_scene, event=sc.event,
        intent=sc.intent, explicit_intent="\n".join(f"- {i.text}" for i in sc.checklist.of_kind("explicit")),
        implicit_intent="\n".join(f"- {i.text}" for i in sc.checklist.of_kind("implicit")))
    # from the simulated user's side its own lines are "assistant" messages
    msgs = [("system", system)]
    msgs += [("assistant" if t.speaker == "user" else "user", t.text) for t in ctx.conversation.turns]
    msgs.append(("user", turn_prompt))
    return tuple(msgs)


def generate_user_turn(ctx: UserContext, emotion: str, action: str, perception: MemoryPerception | None,
                       chat: ChatBackend, turn_index: int = 1, seed: int | None = None) -> str:
    turn_prompt = render_prompt(
        "user_turn", turn_index=turn_index, emotion=emotion, perception=_perception_text(perception),
        action="End Conversation" if action == "end" else "Continue Conversation",
        action_hint="Close the conversation politely in one short line." if action == "end" else "")
    meta = {"intent": ctx.scenario.intent, "turn_index": turn_index, "action": action,
            "negative": bool(perception and perception.negative),
            "explicit": [i.text for i in ctx.scenario.checklist.of_kind("explicit")]}
    text = chat.chat(ChatRequest(user_messages(ctx, turn_prompt), tag="user_turn", meta=meta, seed=seed)).strip()
    if not text:
        raise BehaviorError("empty user utterance")
    return text


# --- assistant side ---------------------------------------------------------------

@dataclass
class AssistantContext:
    """What the assistant-under-test sees besides the live dialogue."""

    profile: str = "Unknown."
    context: str = ""
    memory: bool = False


def assistant_turn(conv: Conversation, scenario: Scenario, chat: ChatBackend, actx: AssistantContext,
                   turn_index: int, seed: int | None = None) -> Turn:
    last_user = conv.turns[-1].text
    prompt = render_prompt("intent_prediction", conversation=conv.transcript())
    out = ask_structured(chat, ChatRequest.single(prompt, tag="predict_intent", meta={"last_user": last_user},
                                                  seed=seed))
    predicted = out.get("intent") if isinstance(out, dict) else None
    if not isinstance(predicted, str) or not predicted.strip():
        raise ParseError("predict intent: reply lacks 'intent'", raw=str(out))
    system = render_prompt("assistant_system", profile=actx.profile, dialogue_scene=scenario.dialogue_scene,
                           context=actx.context)
    msgs = (("system", system),) + tuple((t.speaker, t.text) for t in conv.turns)
    reply = chat.chat(ChatRequest(msgs, tag="assistant_reply", seed=seed, meta={
        "last_user": last_user, "turn_index": turn_index, "memory": actx.memory})).strip()
    if not reply:
        raise BehaviorError("empty assistant reply")
    return Turn("assistant", reply, predicted_intent=predicted.strip())


# --- dialogue loop ----------------------------------------------------------------

def run_dialogue(
    scenario: Scenario,
    user_chat: ChatBackend,
    assistant_chat: ChatBackend,
    embedder: Embedder,
    max_turns: int = 20,
    seed: int = 0,
    theta: float = DEFAULT_THETA,
    assistant_ctx: AssistantContext | None = None,
    taxonomy: Sequence[str] = EMOTIONS,
) -> Conversation:
    """Alternate simulated user and assistant turns until the user ends or the cap is hit.

    A failure inside the loop leaves the partial conversation with
    ``ended_by="error"`` and the error message recorded.
    """
    if max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    actx = assistant_ctx or AssistantContext()
    conv = Conversation(scenario.id, seed=seed,
                        backends={"user": user_chat.name, "assistant": assistant_chat.name})
    ctx = UserContext(scenario, conv)
    store = MemoryStore()
    try:
        for t in range(1, max_turns + 1):
            perception = None
            if t > 1:
                perception = perceive_memory(conv.turns[-1].text, store, embedder, theta, user_chat, ctx, t)
            emotion = infer_emotion(ctx, perception, user_chat, taxonomy, t)
            action = select_action(ctx, emotion, perception, user_chat, t)
            text = generate_user_turn(ctx, emotion, action, perception, user_chat, t,
                                      seed=derive_seed(seed, "user", t))
            conv.turns.append(Turn("user", text, emotion=emotion, action=action, memory=perception))
            conv.turns.append(assistant_turn(conv, scenario, assistant_chat, actx, t,
                                             seed=derive_seed(seed, "assistant", t)))
            if action == "end":
                conv.ended_by = "user_action"
                break
        else:
            conv.ended_by = "turn_cap"
    except Exception as e:
        log.warning("dialogue %s failed: %s", scenario.id, e)
        if conv.turns and conv.turns[-1].speaker == "user":
            conv.turns.pop()  # keep alternation: drop a user turn with no reply
        conv.ended_by = "error"
        conv.error = f"{type(e).__name__}: {e}"
    conv.check(max_turns)
    return conv
