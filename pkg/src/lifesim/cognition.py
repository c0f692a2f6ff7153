"""Belief-desire-intention step: hypotheses, desire retrieval, rerank, softmin choice."""

from __future__ import annotations

import bisect
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import rng
from .desires import DesireEntry, DesirePool
from .gateway import ChatBackend, ChatRequest, Embedder, GatewayError, ParseError, as_bool, ask_structured
from .profiles import UserProfile
from .prompts import render_prompt

if TYPE_CHECKING:
    from .events import LifeEvent
    from .trajectory import Environment

DIMENSIONS = ("physiological", "psychological", "environmental")
DIMENSION_REQUIREMENTS = {
    "physiological": (
        "Generate a physiology-driven event: something happening to the user's body or basic needs "
        "(fatigue, hunger, pain, sleep, illness, physical effort) that is plausible right now."
    ),
    "psychological": (
        "Generate a psychology-driven event: a change in the user's mood, thoughts, motivation or "
        "relationships that is plausible given their personality and recent experiences."
    ),
    "environmental": (
        "Generate an environment-driven event: something caused by the current place, time, weather "
        "or people nearby that the user has to react to."
    ),
}
CANDIDATES_PER_HYPOTHESIS = 3
MAX_CANDIDATES = len(DIMENSIONS) * CANDIDATES_PER_HYPOTHESIS


class CognitionError(GatewayError):
    pass


@dataclass(frozen=True)
class EventHypothesis:
    dimension: str
    text: str

    def __post_init__(self):
        if self.dimension not in DIMENSIONS:
            raise ValueError(f"unknown hypothesis dimension {self.dimension!r}")


@dataclass
class BeliefState:
    long_term: UserProfile
    history: list = field(default_factory=list)  # LifeEvent, time-ordered
    short_term: list[EventHypothesis] = field(default_factory=list)
    long_term_goal: str | None = None

    def __post_init__(self):
        self.check()

    def check(self):
        if len(self.short_term) not in (0, len(DIMENSIONS)):
            raise ValueError(f"short-term belief must hold 0 or 3 hypotheses, has {len(self.short_term)}")
        times = [e.env.time for e in self.history]
        if times != sorted(times):
            raise ValueError("belief history is not time-ordered")


def render_history(history: Sequence["LifeEvent"]) -> str:
    if not history:
        return "None yet."
    return "\n".join(f"{i}. [{e.env.render_time()}, {e.env.location}] {e.event_text}"
                     for i, e in enumerate(history, 1))


def _context(belief: BeliefState, env: "Environment") -> dict:
    return {
        "user_profile": belief.long_term.narrative,
        "goal": belief.long_term_goal or "None specified.",
        "event_sequences": render_history(belief.history),
        "location_desc": env.describe(),
    }


def construct_hypotheses(belief: BeliefState, env: "Environment", chat: ChatBackend,
                         workers: int = 1) -> list[EventHypothesis]:
    """One hypothesis per dimension, each from its own backend call."""
    if env.weather is None:
        raise ValueError("environment has no weather; enrich the trajectory first")
    ctx = _context(belief, env)

    def ask(dim: str) -> EventHypothesis:
        prompt = render_prompt("event_hypothesis", ctx, description=DIMENSION_REQUIREMENTS[dim])
        meta = {"dimension": dim, "location": env.location, "location_desc": ctx["location_desc"],
                "n_history": len(belief.history)}
        try:
            out = ask_structured(chat, ChatRequest.single(prompt, tag="hypothesis", meta=meta))
        except ParseError as e:
            raise CognitionError(f"{dim}: parse: {e}") from e
        if not isinstance(out, dict) or not isinstance(out.get("event"), str) or not out["event"].strip():
            raise CognitionError(f"{dim}: parse: expected an object with a non-empty 'event'")
        return EventHypothesis(dim, out["event"].strip())

    if workers > 1:
        with ThreadPoolExecutor(min(workers, len(DIMENSIONS))) as ex:
            hyps = list(ex.map(ask, DIMENSIONS))
    else:
        hyps = [ask(d) for d in DIMENSIONS]
    belief.short_term = hyps
    return hyps


def retrieve_desires(hypotheses: Sequence[EventHypothesis], pool: DesirePool, embedder: Embedder,
                     k: int = CANDIDATES_PER_HYPOTHESIS) -> list[DesireEntry]:
    """Top-k per hypothesis, concatenated in hypothesis order, first occurrence of an id kept."""
    if not len(pool):
        raise ValueError("desire pool is empty")
    vecs = embedder.embed([h.text for h in hypotheses])
    out, seen = [], set()
    for v in vecs:
        for entry, _ in pool.search(v, k):
            if entry.id not in seen:
                seen.add(entry.id)
                out.append(entry)
    return out


@dataclass(frozen=True)
class RankedCandidates:
    candidates: tuple[DesireEntry, ...]
    ranks: tuple[int, ...]
    has_possible_event: bool

    def __post_init__(self):
        n = len(self.candidates)
        if n > MAX_CANDIDATES:
            raise ValueError(f"at most {MAX_CANDIDATES} candidates, got {n}")
        if sorted(self.ranks) != list(range(1, n + 1)):
            raise ValueError("ranks must be a permutation of 1..n")


def candidate_text(entries: Sequence[DesireEntry]) -> str:
    return "\n".join(f"{i}. Event: {e.event_text} Intention: {e.intent_text}" for i, e in enumerate(entries, 1))


def rerank(candidates: Sequence[DesireEntry], belief: BeliefState, env: "Environment",
           chat: ChatBackend) -> RankedCandidates:
    n = len(candidates)
    if not 1 <= n <= MAX_CANDIDATES:
        raise ValueError(f"rerank needs 1..{MAX_CANDIDATES} candidates, got {n}")
    ctx = _context(belief, env)
    prompt = render_prompt("event_rerank", ctx, n_candidates=n, events_text=candidate_text(candidates))
    meta = {"n_candidates": n, "candidate_ids": json.dumps([c.id for c in candidates]),
            "location_desc": ctx["location_desc"]}
    out = ask_structured(chat, ChatRequest.single(prompt, tag="rerank", meta=meta))
    if not isinstance(out, dict) or "ranked_events" not in out or "has_possible_event" not in out:
        raise CognitionError("rerank: reply needs 'ranked_events' and 'has_possible_event'")
    try:
        possible = as_bool(out["has_possible_event"])
    except ValueError as e:
        raise CognitionError(f"rerank: {e}") from None
    if not possible:
        return RankedCandidates((), (), False)
    order = out["ranked_events"]
    if not isinstance(order, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in order):
        raise CognitionError("rerank: ranked_events must be a list of integers")
    bad = [i for i in order if not 1 <= i <= n]
    if bad:
        raise CognitionError(f"rerank: index {bad[0]} outside 1..{n}")
    if len(set(order)) != len(order):
        raise CognitionError("rerank: repeated index in ranked_events")
    if not order:
        raise CognitionError("rerank: empty ranking while has_possible_event is true")
    return RankedCandidates(tuple(candidates[i - 1] for i in order), tuple(range(1, len(order) + 1)), True)


def _softmin_weights(ranks: Sequence[float]) -> list[float]:
    # plain floats: supports hold at most nine candidates, where numpy call overhead dominates
    if not len(ranks):
        raise ValueError("softmin over an empty support")
    lo = min(ranks)
    w = [math.exp(-(float(r) - lo)) for r in ranks]
    z = math.fsum(w)
    return [x / z for x in w]


def softmin_probabilities(ranks: Sequence[float]) -> np.ndarray:
    """P_i = exp(-r_i) / sum_k exp(-r_k), evaluated shifted by min(r) for stability."""
    return np.array(_softmin_weights(list(ranks)), dtype=np.float64)


def inverse_cdf(probs: Sequence[float], u: float) -> int:
    """Index i with cdf[i-1] <= u < cdf[i], walking the support in the given order."""
    cdf = list(itertools.accumulate(probs))
    return min(bisect.bisect_right(cdf, u), len(cdf) - 1)


def softmin_sample(ranked: RankedCandidates, seed: int, step: int = 0) -> DesireEntry:
    if not ranked.has_possible_event or not ranked.candidates:
        raise ValueError("softmin sample: empty support")
    order = sorted(range(len(ranked.ranks)), key=ranked.ranks.__getitem__)
    probs = _softmin_weights([ranked.ranks[i] for i in order])
    return ranked.candidates[order[inverse_cdf(probs, rng.uniform(seed, step, "softmin"))]]
