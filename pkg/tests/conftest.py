import json
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
import pytest

from lifesim.gateway import ScriptedChat, ScriptedEmbedder
from lifesim.profiles import UserProfile
from lifesim.trajectory import Environment, Weather

FIXTURES = Path(__file__).parent / "fixtures"


def fence(obj) -> str:
    return "Some reasoning first.\n```json\n" + json.dumps(obj) + "\n```"


def scripted(script: dict) -> ScriptedChat:
    """ScriptedChat from ``{tag: [reply, ...]}``; non-string replies are fenced as JSON."""
    recs = [{"tag": tag, "match": "ordered", "reply": r if isinstance(r, str) else fence(r)}
            for tag, seq in script.items() for r in seq]
    return ScriptedChat(recs)


def make_profile(pid="p1", prefs=None, **demo) -> UserProfile:
    return UserProfile(id=pid, demographics=demo or {"gender": "Female", "age": "Youth (18-35 years old)"},
                       traits=("curious", "organized"), preferences=prefs or {"need for autonomy": "high"})


def env_at(day: float, location="Park", zone=-240, weather=True) -> Environment:
    t = datetime(2012, 10, 1, 12, tzinfo=timezone.utc) + timedelta(days=day)
    return Environment(time=t, location=location, zone=zone,
                       weather=Weather("Sunny", 15.0, 18.0, 12.0) if weather else None)


@pytest.fixture
def embedder():
    return ScriptedEmbedder(dim=32, seed=0, mode="tokens")


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# one line per acceptance criterion, repeated in the terminal summary
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
