"""Event engine: logistic trigger, refinement, and the life-trajectory loop."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Mapping, Sequence

from . import rng
from .cognition import BeliefState, construct_hypotheses, render_history, rerank, retrieve_desires, softmin_sample
from .desires import DesirePool
from .gateway import ChatBackend, ChatRequest, Embedder, GatewayError, ParseError, ask_structured
from .profiles import UserProfile
from .prompts import EXAMPLES, render_prompt
from .trajectory import Environment

log = logging.getLogger(__name__)

PLACEHOLDER_RE = re.compile(r"NAME_\d+|\bXXX\b|\[(?:NAME|PLACE|PERSON|LOCATION)\]", re.IGNORECASE)
_UNIT_SECONDS = {"hours": 3600.0, "days": 86400.0}


class EventEngineError(GatewayError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class TriggerConfig:
    scale: float = 1.0
    offset: float = 0.0
    dt_unit: str = "days"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("trigger scale must be > 0")
        if self.dt_unit not in _UNIT_SECONDS:
            raise ValueError(f"dt_unit must be one of {sorted(_UNIT_SECONDS)}")

    def elapsed(self, t_prev: datetime, t: datetime) -> float:
        return (t - t_prev) / timedelta(seconds=_UNIT_SECONDS[self.dt_unit])


@dataclass(frozen=True)
class LifeEvent:
    env: Environment
    event_text: str
    intention_text: str
    source_desire_id: str
    trigger_prob: float
    theme: str = ""
    step: int = 0

    def __post_init__(self):
        if not 0 < self.trigger_prob <= 1:
            raise ValueError(f"trigger_prob {self.trigger_prob} outside (0, 1]")
        if not self.event_text.strip() or not self.intention_text.strip():
            raise ValueError("life event texts must be non-empty")

    def to_record(self) -> dict:
        return {"step": self.step, "env": self.env.to_record(), "event": self.event_text,
                "intent": self.intention_text, "desire_id": self.source_desire_id, "theme": self.theme,
                "trigger_prob": round(self.trigger_prob, 12)}

    @classmethod
    def from_record(cls, rec: Mapping) -> "LifeEvent":
        return cls(env=Environment.from_record(rec["env"]), event_text=rec["event"], intention_text=rec["intent"],
                   source_desire_id=rec["desire_id"], trigger_prob=rec["trigger_prob"],
                   theme=rec.get("theme", ""), step=rec.get("step", 0))


def trigger_probability(delta_t: float, cfg: TriggerConfig = TriggerConfig()) -> float:
    """Logistic P_E = 1 / (1 + exp(-scale * (delta_t - offset)))."""
    if delta_t < 0:
        raise ValueError("elapsed time must be >= 0")
    z = cfg.scale * (delta_t - cfg.offset)
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def should_trigger(p: float, seed: int, counter: int = 0) -> bool:
    if not 0 <= p <= 1:
        raise ValueError("probability outside [0, 1]")
    return rng.uniform(seed, counter, "trigger") < p


def refine(event_text: str, intention_text: str, env: Environment, belief: BeliefState,
           chat: ChatBackend) -> tuple[str, str]:
    if not event_text.strip() or not intention_text.strip():
        raise ValueError("refine needs a non-empty event and intention")
    prompt = render_prompt(
        "event_refinement", examples=EXAMPLES["event_refinement"], user_profile=belief.long_term.narrative,
        goal=belief.long_term_goal or "None specified.", event_sequences=render_history(belief.history),
        location_desc=env.describe(), event_text=event_text, intent=intention_text)
    meta = {"event_text": event_text, "intent": intention_text, "location": env.location,
            "time": env.render_time()}
    out = ask_structured(chat, ChatRequest.single(prompt, tag="refine", meta=meta))
    if not isinstance(out, dict):
        raise ParseError("refine: expected a JSON object", raw=str(out))
    for key in ("event", "intent"):
        if not isinstance(out.get(key), str) or not out[key].strip():
            raise ParseError(f"refine: missing key {key!r}", raw=str(out))
    event, intent = out["event"].strip(), out["intent"].strip()
    leak = PLACEHOLDER_RE.search(event) or PLACEHOLDER_RE.search(intent)
    if leak:
        raise ParseError(f"refine: placeholder leak {leak.group(0)!r}", raw=str(out))
    return event, intent


def generate_life_trajectory(
    profile: UserProfile,
    env_sequence: Sequence[Environment],
    *,
    pool: DesirePool,
    chat: ChatBackend,
    embedder: Embedder,
    seed: int,
    cfg: TriggerConfig = TriggerConfig(),
    n_max: int | None = None,
    max_events: int | None = None,
    goal: str | None = None,
    hypothesis_workers: int = 1,
    trace: list | None = None,
) -> list[LifeEvent]:
    """Walk the environment points, trigger events, and emit refined event-intention pairs.

    ``n_max`` caps the number of points visited and ``max_events`` the number
    of events emitted. The elapsed-time clock starts at the first point and
    only restarts after an emitted event. When ``trace`` is a list, one dict
    per visited point is appended to it.
    """
    if not env_sequence:
        return []
    times = [e.time for e in env_sequence]
    if times != sorted(times):
        raise ValueError("environment sequence is not time-ordered")
    belief = BeliefState(long_term=profile, long_term_goal=goal)
    events: list[LifeEvent] = []
    t_prev = env_sequence[0].time
    points = env_sequence if n_max is None else env_sequence[:n_max]
    for step, env in enumerate(points, 1):
        if max_events is not None and len(events) >= max_events:
            break
        p = trigger_probability(cfg.elapsed(t_prev, env.time), cfg)
        row = {"step": step, "p": p, "t_prev": t_prev, "outcome": "no_trigger"}
        if trace is not None:
            trace.append(row)
        if not should_trigger(p, seed, step):
            continue
        try:
            belief.short_term = []
            hyps = construct_hypotheses(belief, env, chat, workers=hypothesis_workers)
            cands = retrieve_desires(hyps, pool, embedder)
            ranked = rerank(cands, belief, env, chat)
            if not ranked.has_possible_event:
                row["outcome"] = "no_possible_event"
                continue
            chosen = softmin_sample(ranked, seed, step)
            event_text, intent_text = refine(chosen.event_text, chosen.intent_text, env, belief, chat)
        except Exception as e:
            raise EventEngineError(step, e) from e
        ev = LifeEvent(env=env, event_text=event_text, intention_text=intent_text, source_desire_id=chosen.id,
                       trigger_prob=p, theme=chosen.theme, step=step)
        events.append(ev)
        belief.history.append(ev)
        t_prev = env.time
        row["outcome"] = "event"
    return events
