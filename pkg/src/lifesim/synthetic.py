"""Seeded synthetic data and a deterministic rule-based chat responder.

The responder answers every prompt tag used by the package as a pure function
of (seed, tag, request bindings). That keeps scripted runs byte-stable no
matter how calls are scheduled across threads. The data factories stand in
for the real social-media, mobility and query corpora, which are not shipped.
"""

from __future__ import annotations

import hashlib
import json
import re
from datetime import datetime, timedelta, timezone
from typing import Callable

import numpy as np

from .gateway import ChatRequest
from .profiles import BIG_FIVE_ADJECTIVES, DEFAULT_DEMOGRAPHICS, DEFAULT_PREFERENCE_DIMENSIONS, UserProfile

EMOTIONS = (
    "admiration", "amusement", "anger", "annoyance", "approval", "caring", "confusion",
    "curiosity", "desire", "disappointment", "disapproval", "disgust", "embarrassment",
    "excitement", "fear", "gratitude", "grief", "joy", "love", "nervousness", "optimism",
    "pride", "realization", "relief", "remorse", "sadness", "surprise", "neutral",
)


def _h(*parts) -> int:
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


def _pick(seq, *parts):
    return seq[_h(*parts) % len(seq)]


def _fence(obj) -> str:
    return "Reasoning: checked the inputs against the requirements.\n```json\n" + json.dumps(obj) + "\n```"


def _core(intent: str) -> str:
    """'The user wants to plan a run.' -> 'plan a run'"""
    s = re.sub(r"^(the user wants to|looking for|wants to)\s+", "", intent.strip(), flags=re.I)
    return s.rstrip(". ")


_STOP = {"the", "a", "an", "to", "of", "and", "for", "in", "on", "my", "i", "how", "do", "can",
         "what", "is", "with", "at", "user", "wants", "after", "about", "their", "it", "be", "or"}


def _keywords(text: str, n: int = 3) -> list[str]:
    words = [w for w in re.findall(r"[a-z]+", text.lower()) if w not in _STOP and len(w) > 2]
    out = []
    for w in words:
        if w not in out:
            out.append(w)
    return out[:n]


# --- responder ----------------------------------------------------------------

_PLACES = ("home", "gym", "park", "office", "cafe", "kitchen", "clinic", "library")
_TIMES = ("morning", "afternoon", "evening", "weekend", "lunch break", "late night")
_DIM_EVENTS = {
    "physiological": ("feels unusually tired", "notices a sore lower back", "skipped breakfast and feels hungry",
                      "slept badly last night", "feels restless after sitting for hours"),
    "psychological": ("feels anxious about an upcoming deadline", "is bored and wants something new",
                      "feels proud after finishing a task", "is worried about a family member",
                      "feels lonely after a quiet week"),
    "environmental": ("is caught in sudden rain", "finds the venue unexpectedly crowded",
                      "sees a flyer for a local class", "notices the air is very hot and humid",
                      "has an hour free before the next appointment"),
}
_REPLY_OPENERS = ("Good question.", "That makes sense.", "Thanks for sharing that.", "Here is one way to look at it.")
_REPLY_TIPS = ("start with a small, realistic step today", "keep a short log for a week and review it",
               "pick a time slot that fits your routine", "ask someone you trust for a second opinion",
               "set one concrete goal and check progress on Sunday", "try a lighter option first and adjust")


class SyntheticResponder:
    """Rule-based stand-in for every chat role (simulator, assistant, judge)."""

    def __init__(self, seed: int = 0, quality: float = 0.7):
        self.seed = seed
        self.quality = quality
        self._handlers: dict[str, Callable[[dict, ChatRequest], object]] = {
            "normalize": self._normalize,
            "ambiguity": lambda m, r: {"keep": "true" if _h(self.seed, "amb", m.get("intent")) % 10 else "false"},
            "trigger_events": self._trigger_events,
            "tag_entry": self._tag_entry,
            "pseudo_profile": self._pseudo_profile,
            "hypothesis": self._hypothesis,
            "rerank": self._rerank,
            "refine": self._refine,
            "memory": self._memory,
            "emotion": lambda m, r: {"emotion": _pick(m.get("options") or EMOTIONS, self.seed, "emo",
                                                      m.get("intent"), m.get("turn_index"), m.get("negative"))},
            "action": self._action,
            "predict_intent": self._predict_intent,
            "predict_preferences": self._predict_preferences,
            "profile_memory": self._profile_memory,
            "decompose": self._decompose,
            "classify": self._classify,
            "judge_items": self._judge_items,
            "judge_rating": lambda m, r: {"rating": self._score(m, "rating")},
            "judge_event_score": lambda m, r: {"score": self._score(m, "event")},
            "judge_persona": lambda m, r: {d: self._bit(m, d) for d in m.get("dimensions", [])},
            "judge_rigid": lambda m, r: {"rigid": "true" if _h(self.seed, "rigid", m.get("reply")) % 5 == 0 else "false"},
            "judge_intention": lambda m, r: {"reasonable": "true" if _h(self.seed, "iq", m.get("intent")) % 8 else "false"},
        }

    def __call__(self, request: ChatRequest) -> str:
        meta = request.meta or {}
        if request.tag == "user_turn":
            return self._user_turn(meta)
        if request.tag == "assistant_reply":
            return self._assistant_reply(meta)
        if request.tag == "ping":
            return "pong"
        handler = self._handlers.get(request.tag)
        if handler is None:
            from .gateway import FixtureMiss

            raise FixtureMiss(f"no fixture for tag={request.tag} hash={request.prompt_hash()}")
        return _fence(handler(meta, request))

    # desire pool
    def _normalize(self, m, r):
        text = str(m.get("content", "")).strip()
        words = re.findall(r"[A-Za-z']+", text)
        if len(words) < 4:
            return {"is_valid_intent": "false", "intent": "-1"}
        core = re.sub(r"^(how (do|can|should) i|what should i do to|i need to|i want to|help me)\s+", "",
                      text.rstrip("?.! "), flags=re.I)
        return {"is_valid_intent": "true", "intent": f"The user wants to {core[0].lower() + core[1:]}."}

    def _trigger_events(self, m, r):
        core = _core(str(m.get("intent", "")))
        kw = _keywords(core, 2) or ["this"]
        return [
            f"Recently struggled to {core} and felt stuck.",
            f"A friend mentioned {kw[0]} during a chat, which raised the question again.",
            f"Has a free {_pick(_TIMES, self.seed, 'tt', core)} and wants to sort out {' '.join(kw)} for good.",
        ]

    def _tag_entry(self, m, r):
        intent = str(m.get("intent", ""))
        return {"keywords": _keywords(intent), "location": _pick(_PLACES, self.seed, "loc", intent),
                "time": _pick(_TIMES, self.seed, "time", intent)}

    # trajectory
    def _pseudo_profile(self, m, r):
        pois = m.get("pois") or []
        top = ", ".join(pois[:3]) or "various places"
        age = _pick(DEFAULT_DEMOGRAPHICS["age"], self.seed, "pp-age", top)
        inc = _pick(("High Income", "Low Income"), self.seed, "pp-inc", top)
        traits = ", ".join(a[_h(self.seed, "pp-t", k, top) % 2] for k, a in list(BIG_FIVE_ADJECTIVES.items())[:3])
        return {"profile": f"{age}, Cities, {inc}, working. Personality traits include: {traits}. "
                           f"Preferences expressed in daily life and communication include: often visits {top}."}

    # cognition and events
    def _hypothesis(self, m, r):
        dim = m.get("dimension", "physiological")
        what = _pick(_DIM_EVENTS.get(dim, _DIM_EVENTS["physiological"]), self.seed, "hyp", dim,
                     m.get("location_desc"), m.get("n_history"))
        return {"event": f"While at {m.get('location', 'the current place')}, the user {what}."}

    def _rerank(self, m, r):
        n = int(m.get("n_candidates", 0))
        key = (self.seed, "rr", m.get("location_desc"), m.get("candidate_ids"))
        if n == 0 or _h(*key, "none") % 10 == 0:
            return {"ranked_events": [], "has_possible_event": "false"}
        order = list(np.random.default_rng(_h(*key)).permutation(n) + 1)
        keep = max(1, n - _h(*key, "drop") % 3)
        return {"ranked_events": [int(i) for i in order[:keep]], "has_possible_event": "true"}

    def _refine(self, m, r):
        event = re.sub(r"\b(NAME_\d+|XXX)\b", "someone", str(m.get("event_text", ""))).strip()
        intent = _core(str(m.get("intent", "")))
        place = m.get("location", "")
        when = m.get("time", "")
        return {"event": f"{event.rstrip('.')} ({place}, {when}).",
                "intent": f"Wants to {intent}, given the current situation."}

    # behavior
    def _memory(self, m, r):
        reply = str(m.get("content", ""))
        if len(reply.split()) < 8:
            return {"need_store": "false", "query": "-1", "response": "-1"}
        return {"need_store": "true", "query": f"Advice about {' '.join(_keywords(m.get('intent', ''), 2))}",
                "response": reply}

    def _action(self, m, r):
        t = int(m.get("turn_index", 1))
        end_at = 3 + _h(self.seed, "end", m.get("intent")) % 4
        if m.get("negative") and t >= 2:
            end_at = min(end_at, t)
        return {"action": "End Conversation" if t >= end_at else "Continue Conversation"}

    def _user_turn(self, m) -> str:
        t = int(m.get("turn_index", 1))
        core = _core(str(m.get("intent", "")))
        if m.get("action") == "end":
            return _pick(("Thanks, that helps. I'll try it.", "Okay, I think I have what I need.",
                          "Got it, thanks for the help."), self.seed, "bye", core, t)
        if m.get("negative"):
            return "You already told me that. Is there something different I could try?"
        if t == 1:
            return f"Hi, I was hoping you could help me. I want to {core}."
        items = m.get("explicit") or []
        if items and t - 2 < len(items):
            return f"Also, {items[t - 2][0].lower() + items[t - 2][1:]}"
        return _pick(("Could you make that a bit more specific for me?", "What would you do first?",
                      "Is there anything I should avoid?"), self.seed, "ut", core, t)

    # assistant
    def _predict_intent(self, m, r):
        last = str(m.get("last_user", ""))
        kw = _keywords(last, 3)
        if not kw:
            return {"intent": "The user wants general help."}
        return {"intent": f"The user wants help with {' '.join(kw)}."}

    def _assistant_reply(self, m) -> str:
        last = str(m.get("last_user", ""))
        t = int(m.get("turn_index", 1))
        tip = _pick(_REPLY_TIPS, self.seed, "tip", last, t)
        kw = _keywords(last, 2)
        topic = " and ".join(kw) if kw else "this"
        text = f"{_pick(_REPLY_OPENERS, self.seed, 'op', last, t)} For {topic}, {tip}."
        if m.get("memory"):
            text += " Based on what you told me before, I kept it short."
        if _h(self.seed, "ask", last, t) % 3 == 0:
            text += " What matters most to you here?"
        return text

    def _predict_preferences(self, m, r):
        return {d: _pick(("low", "high"), self.seed, "pref", d, m.get("evidence")) for d in m.get("dimensions", [])}

    def _profile_memory(self, m, r):
        prior = str(m.get("prior_summary", "")).strip()
        kw = _keywords(str(m.get("last_user", "")), 3)
        add = f"Asked about {' '.join(kw)}." if kw else ""
        return {"summary": " ".join(x for x in (prior, add) if x)}

    # benchmark construction
    def _decompose(self, m, r):
        core = _core(str(m.get("intent", "")))
        n = 2 + _h(self.seed, "dec", core) % 3
        base = [f"Wants concrete steps to {core}.", "Hopes the advice fits their daily schedule.",
                "Wants reassurance that the plan is realistic.", "Wants to avoid making the problem worse.",
                "Hopes to keep the effort low at first."]
        return base[:n]

    def _classify(self, m, r):
        items = list(m.get("items", []))
        n = len(items)
        n_exp = n // 2 if n >= 4 else max(1, n - 1)
        return [{"description": d, "type": "explicit" if i < n_exp else "implicit"} for i, d in enumerate(items)]

    # judges
    def _bit(self, m, item) -> int:
        return int(_h(self.seed, "bit", m.get("model"), m.get("scenario"), item) % 1000 < 1000 * self.quality)

    def _judge_items(self, m, r):
        # an item is more likely judged met when its keywords show up in the dialogue
        convo = str(m.get("conversation", "")).lower()
        out = {}
        for item in m.get("items", []):
            kw = _keywords(item, 3)
            cover = sum(k in convo for k in kw) / len(kw) if kw else 0.0
            p = min(1.0, self.quality * (0.5 + 0.6 * cover))
            out[item] = int(_h(self.seed, "item", m.get("kind"), item, convo) % 1000 < 1000 * p)
        return out

    def _score(self, m, kind) -> int:
        return 1 + _h(self.seed, kind, m.get("metric"), m.get("model"), m.get("scenario")) % 5


_RESPONDERS = {"synthetic": SyntheticResponder}


def get_responder(name: str, seed: int = 0) -> Callable[[ChatRequest], str]:
    base, _, arg = name.partition("@")
    if base not in _RESPONDERS:
        raise ValueError(f"unknown responder {name!r}; known: {sorted(_RESPONDERS)}")
    if arg:
        return _RESPONDERS[base](seed=seed, quality=float(arg))
    return _RESPONDERS[base](seed=seed)


# --- synthetic corpora ----------------------------------------------------------

def synthetic_profiles(n: int, seed: int, schema: dict | None = None,
                       dimensions: list[str] | None = None) -> list[UserProfile]:
    schema = schema or DEFAULT_DEMOGRAPHICS
    dims = dimensions or DEFAULT_PREFERENCE_DIMENSIONS
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        demo = {k: str(v[rng.integers(len(v))]) for k, v in schema.items()}
        traits = tuple(pair[rng.integers(2)] for pair in BIG_FIVE_ADJECTIVES.values())
        chosen = rng.choice(len(dims), size=min(4, len(dims)), replace=False)
        prefs = {dims[j]: ("low", "high")[rng.integers(2)] for j in sorted(chosen)}
        out.append(UserProfile(id=f"u{i:04d}", demographics=demo, traits=traits, preferences=prefs))
    return out


POIS = ("Gym", "Coffee Shop", "Office", "Park", "Subway", "Supermarket", "Restaurant", "Bar",
        "Library", "Hospital", "Movie Theater", "Bookstore", "Home (private)", "University", "Museum")


def synthetic_checkins(n_users: int, seed: int, per_user: tuple[int, int] = (8, 14),
                       start: str = "2012-10-01", zones: tuple[int, ...] = (-240, 540)) -> list[dict]:
    """Check-in rows ``{user_id, poi, timestamp, zone}``; timestamps are UTC ISO strings."""
    rng = np.random.default_rng(seed)
    t0 = datetime.fromisoformat(start).replace(tzinfo=timezone.utc)
    rows = []
    for u in range(n_users):
        zone = int(zones[u % len(zones)])
        t = t0 + timedelta(hours=int(rng.integers(0, 48)))
        favourites = rng.choice(len(POIS), size=5, replace=False)
        for _ in range(int(rng.integers(per_user[0], per_user[1] + 1))):
            # mixture of short hops and multi-day gaps
            gap = rng.exponential(6.0) if rng.random() < 0.6 else rng.exponential(48.0)
            t = t + timedelta(minutes=int(30 + gap * 60))
            poi = POIS[favourites[rng.integers(5)]] if rng.random() < 0.8 else POIS[rng.integers(len(POIS))]
            rows.append({"user_id": f"t{u:04d}", "poi": poi,
                         "timestamp": t.strftime("%Y-%m-%dT%H:%M:%SZ"), "zone": zone})
    order = rng.permutation(len(rows))  # ingestion must not rely on input order
    return [rows[i] for i in order]


_SKY = ("Sunny", "Cloudy", "Light rain", "Overcast", "Clear", "Windy")


def synthetic_weather(locations, dates, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    out = []
    for loc in sorted(set(locations)):
        for d in sorted(set(dates)):
            low = int(rng.integers(-2, 18))
            high = low + int(rng.integers(2, 11))
            out.append({"location": loc, "date": d, "summary": str(_SKY[rng.integers(len(_SKY))]),
                        "avg_c": round((low + high) / 2, 1), "high_c": high, "low_c": low})
    return out


_QUERY_STEMS = {
    "exercise_fitness": ("how do I start running again after a knee injury", "what should I do to build core strength at home",
                         "how can I stay motivated to go to the gym", "help me plan a low-impact workout for a busy week"),
    "diet_nutrition": ("how can I eat more protein without meat", "what should I do to stop snacking late at night",
                       "help me plan cheap healthy lunches for work", "how do I cut down on sugar in my coffee"),
    "mental_health": ("how can I calm down before a big presentation", "how do I deal with feeling lonely after moving",
                      "help me handle stress from constant deadlines", "what should I do to sleep better when anxious"),
    "parenting_childcare": ("how do I get my toddler to eat vegetables", "how can I limit screen time for my kids",
                            "help me plan a calm bedtime routine for a five year old", "how do I talk to my teen about school stress"),
    "elderly_care": ("how can I help my father stay active after retirement", "how do I make the bathroom safer for my grandmother",
                     "help me organize medication reminders for my mother", "what should I do to keep an older parent socially engaged"),
    "learning_education": ("how can I learn Spanish in fifteen minutes a day", "how do I prepare for a statistics exam in two weeks",
                           "help me build a habit of reading technical books", "what should I do to improve my essay structure"),
    "travel_tourism": ("how do I plan a weekend trip on a tight budget", "how can I avoid jet lag on a long flight",
                       "help me pack light for a rainy city trip", "what should I do on a rainy day in a new city"),
    "leisure_entertainment": ("how can I find a board game for a group of six", "help me pick a movie for a quiet evening",
                              "how do I get started with watercolor painting", "what should I do on a free Saturday afternoon nearby"),
}
_JUNK = ("hi", "thanks!!", "asdf", "ok cool", "lol")


def synthetic_queries(theme: str, n: int, seed: int, dup_rate: float = 0.15, junk_rate: float = 0.1) -> list[str]:
    """Raw user queries for one theme, with some junk and repeated questions mixed in."""
    rng = np.random.default_rng(seed)
    stems = _QUERY_STEMS[theme]
    qualifiers = ("", " this month", " as a beginner", " with very little time", " on a budget", " without equipment")
    out: list[str] = []
    for _ in range(n):
        r = rng.random()
        if out and r < dup_rate:
            out.append(out[rng.integers(len(out))])
        elif r < dup_rate + junk_rate:
            out.append(str(_JUNK[rng.integers(len(_JUNK))]))
        else:
            out.append(stems[rng.integers(len(stems))] + qualifiers[rng.integers(len(qualifiers))] + "?")
    return out
