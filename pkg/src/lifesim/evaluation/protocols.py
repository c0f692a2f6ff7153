"""Single-scenario and long-horizon evaluation protocols."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from ..behavior import DEFAULT_THETA, AssistantContext, Conversation, run_dialogue
from ..gateway import ChatBackend, ChatRequest, Embedder, ParseError, ask_structured
from ..prompts import render_prompt
from ..records import write_json
from ..rng import derive_seed
from ..scenario import Scenario
from .judges import (SCALAR_TEMPLATES, rigid_labels, score_intent_completion, score_intent_recognition,
                     score_persona, score_scalar)
from .metrics import ensemble_mean, preference_recovery, proactive_inquiry_ratio, rigid_ratio

log = logging.getLogger(__name__)

SINGLE_MAX_TURNS = 20
LONG_MAX_TURNS = 3
SINGLE_METRICS = ("A", "A_e", "A_i", "R", "R_e", "R_i", "naturalness", "coherence", "environment_alignment",
                  "A_pref", "persona_alignment", "proactive_inquiry", "rigid_reasoning")
LONG_METRICS = ("R", "R_e", "R_i", "A_pref")


def _r(x: float | None) -> float | None:
    return None if x is None else round(float(x), 6)


def _pct(x: float | None) -> float | None:
    return None if x is None else 100.0 * x


@dataclass
class EvalReport:
    protocol: str
    model: str
    seed: int
    judges: list[str]
    scenarios: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    memory: bool | None = None
    grid: dict = field(default_factory=dict)
    memory_records: list[dict] = field(default_factory=list)

    @property
    def excluded(self) -> list[str]:
        return [s["scenario"] for s in self.scenarios if s["excluded"]]

    def to_dict(self) -> dict:
        d = {"protocol": self.protocol, "model": self.model, "seed": self.seed, "judges": self.judges,
             "n_scenarios": len(self.scenarios), "excluded": self.excluded, "aggregates": self.aggregates,
             "scenarios": self.scenarios}
        if self.protocol == "long":
            d.update(memory=self.memory, grid=self.grid, memory_records=self.memory_records)
        return d

    def save(self, path) -> Path:
        return write_json(path, self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["protocol"], d["model"], d["seed"], d["judges"], d["scenarios"], d["aggregates"],
                   d.get("memory"), d.get("grid", {}), d.get("memory_records", []))


def aggregate(rows: Sequence[dict], metrics: Sequence[str]) -> dict:
    out = {}
    kept = [r for r in rows if not r["excluded"]]
    for m in metrics:
        vals = [r["metrics"][m] for r in kept if r["metrics"].get(m) is not None]
        out[m] = _r(sum(vals) / len(vals)) if vals else None
    out["n"] = len(kept)
    return out


# --- assistant-side helper calls ------------------------------------------------------

def predict_preferences(assistant: ChatBackend, conversation_text: str, dimensions: Sequence[str]) -> dict:
    prompt = render_prompt("preference_prediction", dimensions="\n".join(f"- {d}" for d in dimensions),
                           conversation=conversation_text)
    out = ask_structured(assistant, ChatRequest.single(prompt, tag="predict_preferences", meta={
        "dimensions": list(dimensions), "evidence": conversation_text}))
    if not isinstance(out, dict):
        raise ParseError("preference prediction: expected a JSON object", raw=str(out))
    return {str(k): str(v).strip().lower() for k, v in out.items() if str(v).strip().lower() in ("low", "high")}


def profile_memory_update(conversation: Conversation, prior_summary: str, assistant: ChatBackend) -> str:
    """Refine the running preference summary after a scenario."""
    first_user = next((t.text for t in conversation.turns if t.speaker == "user"), "")
    prompt = render_prompt("profile_memory_update", prior_summary=prior_summary or "(empty)",
                           conversation=conversation.transcript())
    out = ask_structured(assistant, ChatRequest.single(prompt, tag="profile_memory", meta={
        "prior_summary": prior_summary, "last_user": first_user}))
    if not isinstance(out, dict) or not isinstance(out.get("summary"), str):
        raise ParseError("memory update: reply lacks a 'summary' string", raw=str(out))
    return out["summary"].strip()


def _pmap(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


def _base_row(sc: Scenario, conv: Conversation) -> dict:
    return {"scenario": sc.id, "user_id": sc.user_id, "index": sc.index, "theme": sc.theme,
            "kinds": {"explicit": len(sc.checklist.of_kind("explicit")),
                      "implicit": len(sc.checklist.of_kind("implicit"))},
            "n_turns": len(conv.turns), "ended_by": conv.ended_by, "excluded": False, "error": None,
            "metrics": {}, "per_judge": {}, "verdicts": []}


def _exclude(row: dict, err: str) -> dict:
    row.update(excluded=True, error=err, metrics={}, per_judge={}, verdicts=[])
    return row


# --- single scenario ------------------------------------------------------------------

def evaluate_conversation(sc: Scenario, conv: Conversation, assistant: ChatBackend, judges: Sequence[ChatBackend],
                          model: str) -> dict:
    row = _base_row(sc, conv)
    if conv.error:
        return _exclude(row, conv.error)
    try:
        gold = dict(sc.gold_preferences)
        a_pref = None
        if gold:
            pred = predict_preferences(assistant, conv.transcript(), list(gold))
            a_pref = _pct(preference_recovery(pred, gold))
        per_judge = {}
        for j in judges:
            jm = {}
            v, acc = score_intent_recognition(sc.checklist, conv.predicted_intents, conv, j, sc, model)
            row["verdicts"].append(v.to_record())
            jm.update(A=_pct(acc["all"]), A_e=_pct(acc["explicit"]), A_i=_pct(acc["implicit"]))
            v, acc = score_intent_completion(sc.checklist, conv, j, sc, model)
            row["verdicts"].append(v.to_record())
            jm.update(R=_pct(acc["all"]), R_e=_pct(acc["explicit"]), R_i=_pct(acc["implicit"]))
            for metric in SCALAR_TEMPLATES:
                v, val = score_scalar(conv, metric, j, sc, model)
                row["verdicts"].append(v.to_record())
                jm[metric] = val
            if gold:
                v, val = score_persona(conv, gold, j, sc, model)
                row["verdicts"].append(v.to_record())
                jm["persona_alignment"] = val
            ratio, excluded = rigid_ratio(rigid_labels(conv, j, sc, model))
            jm["rigid_reasoning"] = _pct(ratio)
            jm["rigid_excluded"] = excluded
            per_judge[j.name] = {k: _r(x) for k, x in jm.items()}
    except Exception as e:
        log.warning("scenario %s excluded: %s", sc.id, e)
        return _exclude(row, f"{type(e).__name__}: {e}")
    metrics = {}
    for m in SINGLE_METRICS:
        if m == "A_pref":
            metrics[m] = _r(a_pref)
        elif m == "proactive_inquiry":
            metrics[m] = _r(_pct(proactive_inquiry_ratio([t.text for t in conv.assistant_turns])))
        else:
            metrics[m] = _r(ensemble_mean([per_judge[j.name].get(m) for j in judges]))
    row["metrics"] = metrics
    row["per_judge"] = per_judge
    return row


def simulate_single(benchmark: Sequence[Scenario], assistant: ChatBackend, *, user_chat: ChatBackend,
                    embedder: Embedder, seed: int, max_turns: int = SINGLE_MAX_TURNS,
                    workers: int = 1, theta: float = DEFAULT_THETA) -> list[Conversation]:
    """Play every scenario from scratch, with no interaction history."""
    if not benchmark:
        raise ValueError("empty benchmark")
    return _pmap(lambda sc: run_dialogue(sc, user_chat, assistant, embedder, max_turns=max_turns,
                                         seed=derive_seed(seed, sc.id), theta=theta), list(benchmark), workers)


def evaluate_single(benchmark: Sequence[Scenario], conversations: Sequence[Conversation], assistant: ChatBackend,
                    judges: Sequence[ChatBackend], *, seed: int, workers: int = 1) -> EvalReport:
    if not benchmark:
        raise ValueError("empty benchmark")
    if not judges:
        raise ValueError("judge ensemble needs at least one judge")
    rows = _pmap(lambda pair: evaluate_conversation(pair[0], pair[1], assistant, judges, assistant.name),
                 list(zip(benchmark, conversations)), workers)
    report = EvalReport("single", assistant.name, seed, [j.name for j in judges], rows)
    report.aggregates = aggregate(rows, SINGLE_METRICS)
    return report


def run_single_scenario_eval(benchmark: Sequence[Scenario], assistant: ChatBackend, judges: Sequence[ChatBackend],
                             *, user_chat: ChatBackend, embedder: Embedder, seed: int,
                             max_turns: int = SINGLE_MAX_TURNS, workers: int = 1) -> EvalReport:
    if not judges:
        raise ValueError("judge ensemble needs at least one judge")
    convs = simulate_single(benchmark, assistant, user_chat=user_chat, embedder=embedder, seed=seed,
                            max_turns=max_turns, workers=workers)
    return evaluate_single(benchmark, convs, assistant, judges, seed=seed, workers=workers)


# --- long horizon -------------------------------------------------------------------------

def history_context(prior: Sequence[tuple[Scenario, Conversation]]) -> str:
    if not prior:
        return ""
    blocks = [f"[Earlier conversation {i}] {sc.env.render_time()}, {sc.env.location}\n{conv.transcript()}"
              for i, (sc, conv) in enumerate(prior, 1)]
    return "### Interaction History\n" + "\n\n".join(blocks)


def memory_context(summaries: Sequence[dict]) -> str:
    if not summaries:
        return ""
    return "### Memory Summaries\n" + "\n".join(f"[After scenario {s['index']}] {s['summary'] or '(empty)'}"
                                                 for s in summaries)


def group_by_user(benchmark: Sequence[Scenario]) -> dict[str, list[Scenario]]:
    """Scenarios per user in trajectory order; history refs must list exactly the earlier ones."""
    users: dict[str, list[Scenario]] = {}
    for sc in benchmark:
        users.setdefault(sc.user_id, []).append(sc)
    for uid in users:
        users[uid].sort(key=lambda s: s.index)
        ids = [s.id for s in users[uid]]
        for i, s in enumerate(users[uid]):
            if list(s.history) != ids[:i]:
                raise ValueError(f"scenario {s.id}: history refs do not match the user's earlier scenarios")
    return users


def assistant_context(prior: Sequence[tuple[Scenario, Conversation]], summaries: Sequence[dict],
                      memory: bool) -> AssistantContext:
    if memory:
        return AssistantContext(context=memory_context(summaries), memory=True)
    return AssistantContext(context=history_context(prior))


def simulate_long(benchmark: Sequence[Scenario], assistant: ChatBackend, *, user_chat: ChatBackend,
                  embedder: Embedder, memory: bool, seed: int, max_turns: int = LONG_MAX_TURNS,
                  workers: int = 1, theta: float = DEFAULT_THETA) -> tuple[dict[str, Conversation], list[dict]]:
    """Play each user's scenarios in order; scenario L sees the L-1 earlier ones.

    With ``memory`` off the assistant receives the full earlier transcripts.
    With it on, it receives one preference summary per earlier scenario,
    written by the assistant itself after each scenario. Returns the
    conversations by scenario id and the summary records.
    """
    if not benchmark:
        raise ValueError("empty benchmark")
    users = group_by_user(benchmark)

    def one_user(uid: str):
        prior, summaries, convs = [], [], {}
        for sc in users[uid]:
            actx = assistant_context(prior, summaries, memory)
            conv = run_dialogue(sc, user_chat, assistant, embedder, max_turns=max_turns,
                                seed=derive_seed(seed, sc.id), theta=theta, assistant_ctx=actx)
            convs[sc.id] = conv
            prior.append((sc, conv))
            if memory:
                prev = summaries[-1]["summary"] if summaries else ""
                summaries.append({"user_id": uid, "index": sc.index,
                                  "summary": profile_memory_update(conv, prev, assistant)})
        return convs, summaries

    results = _pmap(one_user, sorted(users), workers)
    convs = {k: v for c, _ in results for k, v in c.items()}
    return convs, [s for _, ss in results for s in ss]


def evaluate_long(benchmark: Sequence[Scenario], conversations: dict[str, Conversation], memory_records: list[dict],
                  assistant: ChatBackend, judges: Sequence[ChatBackend], *, memory: bool, seed: int,
                  workers: int = 1) -> EvalReport:
    """Completion and preference recovery per scenario, bucketed by history length."""
    if not judges:
        raise ValueError("judge ensemble needs at least one judge")
    users = group_by_user(benchmark)
    model = assistant.name

    def one_user(uid: str) -> list[dict]:
        rows, prior = [], []
        summaries = [m for m in memory_records if m["user_id"] == uid]
        for sc in users[uid]:
            conv = conversations[sc.id]
            earlier = [m for m in summaries if m["index"] < sc.index]
            actx = assistant_context(prior, earlier, memory)
            prior.append((sc, conv))
            row = _base_row(sc, conv)
            row["history_length"] = sc.index
            row["n_memory_records"] = len(earlier) if memory else 0
            rows.append(row)
            if conv.error:
                _exclude(row, conv.error)
                continue
            try:
                per_judge = {}
                for j in judges:
                    v, acc = score_intent_completion(sc.checklist, conv, j, sc, model)
                    row["verdicts"].append(v.to_record())
                    per_judge[j.name] = {"R": _r(_pct(acc["all"])), "R_e": _r(_pct(acc["explicit"])),
                                         "R_i": _r(_pct(acc["implicit"]))}
                a_pref = None
                if sc.gold_preferences:
                    evidence = "\n\n".join(x for x in (actx.context, conv.transcript()) if x)
                    pred = predict_preferences(assistant, evidence, list(sc.gold_preferences))
                    a_pref = _pct(preference_recovery(pred, sc.gold_preferences))
            except Exception as e:
                log.warning("scenario %s excluded: %s", sc.id, e)
                _exclude(row, f"{type(e).__name__}: {e}")
                continue
            row["per_judge"] = per_judge
            row["metrics"] = {m: _r(ensemble_mean([per_judge[j.name][m] for j in judges])) for m in ("R", "R_e", "R_i")}
            row["metrics"]["A_pref"] = _r(a_pref)
        return rows

    rows = [r for rs in _pmap(one_user, sorted(users), workers) for r in rs]
    report = EvalReport("long", model, seed, [j.name for j in judges], rows, memory=memory)
    report.aggregates = aggregate(rows, LONG_METRICS)
    lengths = sorted({r["history_length"] for r in rows})
    report.grid = {str(L): aggregate([r for r in rows if r["history_length"] == L], LONG_METRICS) for L in lengths}
    report.memory_records = list(memory_records)
    return report


def run_long_horizon_eval(benchmark: Sequence[Scenario], assistant: ChatBackend, judges: Sequence[ChatBackend],
                          *, user_chat: ChatBackend, embedder: Embedder, memory: bool, seed: int,
                          max_turns: int = LONG_MAX_TURNS, workers: int = 1) -> EvalReport:
    if not judges:
        raise ValueError("judge ensemble needs at least one judge")
    convs, records = simulate_long(benchmark, assistant, user_chat=user_chat, embedder=embedder, memory=memory,
                                   seed=seed, max_turns=max_turns, workers=workers)
    return evaluate_long(benchmark, convs, records, assistant, judges, memory=memory, seed=seed, workers=workers)
