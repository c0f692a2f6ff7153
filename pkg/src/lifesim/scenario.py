"""Benchmark scenario records shared by the simulator and the eval harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .profiles import UserProfile
from .records import RecordError, dumps, read_jsonl
from .trajectory import Environment

KINDS = ("explicit", "implicit")


@dataclass(frozen=True)
class ChecklistItem:
    text: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"checklist kind must be explicit|implicit, got {self.kind!r}")
        if not self.text.strip():
            raise ValueError("checklist item text is empty")


def check_kind_balance(kinds: Sequence[str]):
    """At least two of each kind when there are 4+ items, else at least one of each."""
    n = len(kinds)
    need = 2 if n >= 4 else 1
    for k in KINDS:
        if kinds.count(k) < need:
            raise ValueError(f"{n} items need at least {need} {k} item(s), got {kinds.count(k)}")


@dataclass(frozen=True)
class IntentChecklist:
    items: tuple[ChecklistItem, ...]
    scenario_ref: str = ""

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if not 2 <= len(self.items) <= 6:
            raise ValueError(f"checklist needs 2..6 items, got {len(self.items)}")
        check_kind_balance([i.kind for i in self.items])

    def of_kind(self, kind: str) -> list[ChecklistItem]:
        return [i for i in self.items if i.kind == kind]

    def to_record(self) -> list[dict]:
        return [{"text": i.text, "kind": i.kind} for i in self.items]

    @classmethod
    def from_record(cls, rec: Sequence[Mapping], scenario_ref: str = "") -> "IntentChecklist":
        return cls(tuple(ChecklistItem(r["text"], r["kind"]) for r in rec), scenario_ref)


@dataclass(frozen=True)
class Scenario:
    id: str
    user_id: str
    index: int  # 1-based position in the user's life trajectory
    profile: UserProfile
    env: Environment
    event: str
    intent: str
    checklist: IntentChecklist
    gold_preferences: Mapping[str, str] = field(default_factory=dict)
    theme: str = ""
    history: tuple[str, ...] = ()  # ids of the same user's earlier scenarios

    @property
    def dialogue_scene(self) -> str:
        return self.env.describe()

    def to_record(self) -> dict:
        return {"id": self.id, "user_id": self.user_id, "index": self.index, "theme": self.theme,
                "profile": {k: v for k, v in self.profile.to_record().items() if k != "narrative"},
                "env": self.env.to_record(), "event": self.event, "intent": self.intent,
                "checklist": self.checklist.to_record(), "gold_preferences": dict(self.gold_preferences),
                "history": list(self.history)}

    @classmethod
    def from_record(cls, rec: Mapping) -> "Scenario":
        return cls(id=rec["id"], user_id=rec["user_id"], index=int(rec["index"]),
                   profile=UserProfile.from_record(rec["profile"]), env=Environment.from_record(rec["env"]),
                   event=rec["event"], intent=rec["intent"],
                   checklist=IntentChecklist.from_record(rec["checklist"], rec["id"]),
                   gold_preferences=dict(rec.get("gold_preferences") or {}), theme=rec.get("theme", ""),
                   history=tuple(rec.get("history") or ()))


def load_benchmark(path) -> list[Scenario]:
    out, seen = [], set()
    for line, rec in read_jsonl(path):
        try:
            sc = Scenario.from_record(rec)
        except (KeyError, ValueError, TypeError) as e:
            raise RecordError(f"bad scenario record: {e}", line, str(path)) from None
        if sc.id in seen:
            raise RecordError(f"duplicate scenario id {sc.id!r}", line, str(path))
        seen.add(sc.id)
        out.append(sc)
    return out


def benchmark_lines(scenarios: Sequence[Scenario]) -> str:
    return "".join(dumps(s.to_record()) + "\n" for s in scenarios)
