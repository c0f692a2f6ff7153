"""Turn simulated life trajectories into benchmark scenarios."""

from __future__ import annotations

from typing import Sequence

from ..events import LifeEvent
from ..gateway import ChatBackend
from ..profiles import UserProfile
from ..scenario import Scenario
from .checklist import classify_intents, decompose_intent


def build_user_scenarios(profile: UserProfile, events: Sequence[LifeEvent], chat: ChatBackend) -> list[Scenario]:
    """One scenario per life event; each scenario references the user's earlier ones as history."""
    out: list[Scenario] = []
    for i, ev in enumerate(events, 1):
        sid = f"{profile.id}-s{i:02d}"
        scene = ev.env.describe()
        subs = decompose_intent(profile, scene, ev.event_text, ev.intention_text, chat)
        checklist = classify_intents(subs, profile, scene, ev.event_text, chat, scenario_ref=sid)
        out.append(Scenario(id=sid, user_id=profile.id, index=i, profile=profile, env=ev.env, event=ev.event_text,
                            intent=ev.intention_text, checklist=checklist,
                            gold_preferences=dict(profile.preferences), theme=ev.theme,
                            history=tuple(s.id for s in out)))
    return out
