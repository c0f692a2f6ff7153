"""Acceptance criteria, each checked at its stated tolerance and time budget.

Every test prints exactly one ``PASS``/``FAIL`` line; the lines are repeated in
the pytest terminal summary. Oracles here are deliberately naive re-derivations
(Fraction arithmetic, coincidence matrices, exhaustive scans) so they share no
code with the package.
"""

import json
import math
import os
import sys
import time
from fractions import Fraction
from itertools import product
from pathlib import Path

import numpy as np
import pytest

import conftest
from lifesim.behavior import Conversation, MemoryEntry, MemoryStore, UserContext, perceive_memory
from lifesim.cognition import (DIMENSIONS, EventHypothesis, RankedCandidates, retrieve_desires,
                               softmin_probabilities, softmin_sample)
from lifesim.config import load_config
from lifesim.desires import DesireEntry, DesirePool
from lifesim.evaluation.metrics import item_accuracy, jsd, krippendorff_alpha, scalar_to_100
from lifesim.events import TriggerConfig, should_trigger, trigger_probability
from lifesim.gateway import CORRECTIVE_INSTRUCTION, BackendSpec, Embedder, make_chat, make_embedder
from lifesim.pipeline import Pipeline, tree_digest
from lifesim.profiles import ProfilePool, UserProfile, ipf_balance
from lifesim.scenario import load_benchmark

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = ROOT / "tests" / "golden"
sys.path.insert(0, str(ROOT / "scripts"))


def verdict(name: str, problems: list[str], secs: float, budget: float | None = None, detail: str = ""):
    if budget is not None and secs >= budget:
        problems = problems + [f"took {secs:.2f}s, budget {budget:g}s"]
    line = f"{'FAIL' if problems else 'PASS'} {name} ({secs:.2f}s{', ' + detail if detail else ''})"
    if problems:
        line += ": " + "; ".join(problems[:5])
    print(line)
    conftest.VERDICTS.append(line)
    assert not problems, line


# --- softmin ---------------------------------------------------------------------------------

def test_softmin():
    t0 = time.perf_counter()
    problems = []
    z = sum(math.exp(-r) for r in (1, 2, 3))
    want = [math.exp(-r) / z for r in (1, 2, 3)]
    got = softmin_probabilities([1, 2, 3])
    err = float(np.max(np.abs(got - want)))
    if err > 1e-12:
        problems.append(f"probabilities off by {err:.2e}")

    for shift in (-5.0, 5.0):
        d = float(np.max(np.abs(softmin_probabilities([1 + shift, 2 + shift, 3 + shift]) - got)))
        if d > 1e-12:
            problems.append(f"shift {shift:+g} changes probabilities by {d:.2e}")

    ids = ["a", "b", "c"]
    entries = tuple(DesireEntry(id=i, theme="exercise_fitness", intent_text=i, event_contexts=(i,), tags={},
                                embedding=np.eye(3)[k]) for k, i in enumerate(ids))
    ranked = RankedCandidates(entries, (1, 2, 3), True)
    n = 100_000
    counts = {i: 0 for i in ids}
    for step in range(n):
        counts[softmin_sample(ranked, seed=11, step=step).id] += 1
    freq_err = max(abs(counts[i] / n - w) for i, w in zip(ids, want))
    if freq_err > 0.005:
        problems.append(f"empirical frequency off by {freq_err:.4f}")
    verdict("softmin", problems, time.perf_counter() - t0, 1.0, f"max freq err {freq_err:.4f}")


# --- trigger ----------------------------------------------------------------------------------

def test_trigger():
    t0 = time.perf_counter()
    problems = []
    for scale, offset in ((1.0, 0.0), (2.0, 1.5), (0.3, 7.0)):
        p = trigger_probability(offset, TriggerConfig(scale=scale, offset=offset))
        if p != 0.5:
            problems.append(f"P(offset={offset}) = {p!r}")
    cfg = TriggerConfig(scale=1.0, offset=2.0)
    grid = [trigger_probability(x, cfg) for x in np.linspace(0.0, 10.0, 1000)]
    if not all(b > a for a, b in zip(grid, grid[1:])):
        problems.append("not strictly increasing on the grid")
    n, p = 100_000, 0.3
    hits = sum(should_trigger(p, 2024, c) for c in range(n))
    sigma = math.sqrt(n * p * (1 - p))
    z = (hits - n * p) / sigma
    if abs(z) > 5:
        problems.append(f"Bernoulli rate {hits / n:.4f} is {z:.1f} sigma away")
    verdict("trigger", problems, time.perf_counter() - t0, 1.0, f"z={z:+.2f}")


# --- life trajectory determinism ------------------------------------------------------------

def _events_tree(out: Path, workers: int) -> bytes:
    cfg = load_config(GOLDEN / "config.yaml")
    cfg.workers = workers
    Pipeline(cfg, out).run(through="events")
    return (out / "events" / "events.jsonl").read_bytes()


def test_life_trajectory_determinism(tmp_path):
    t0 = time.perf_counter()
    runs = [_events_tree(tmp_path / f"r{i}", w) for i, w in enumerate((1, 1, 8))]
    problems = []
    if runs[0] != runs[1]:
        problems.append("two single-thread runs differ")
    if runs[0] != runs[2]:
        problems.append("1 vs 8 workers differ")
    users = {json.loads(line)["user_id"] for line in runs[0].splitlines()}
    verdict("life trajectory determinism", problems, time.perf_counter() - t0, 30.0,
            f"{len(runs[0].splitlines())} events over {len(users)} users")


# --- JSD -----------------------------------------------------------------------------------------

def test_jsd():
    t0 = time.perf_counter()
    problems = []
    gen = np.random.default_rng(7)
    for _ in range(20):
        p = gen.random(12)
        if abs(jsd(p, p)) > 1e-12:
            problems.append("identity not 0")
    for k in (2, 5, 24):
        a = np.zeros(k)
        b = np.zeros(k)
        a[: k // 2] = gen.random(k // 2) + 0.1
        b[k // 2:] = gen.random(k - k // 2) + 0.1
        if abs(jsd(a, b) - math.log(2)) > 1e-9:
            problems.append(f"disjoint k={k} gives {jsd(a, b)!r}")
    worst = 0.0
    for _ in range(1000):
        k = int(gen.integers(2, 30))
        p = gen.random(k) * (gen.random(k) > 0.3)
        q = gen.random(k) * (gen.random(k) > 0.3)
        p[0] += 1e-3
        q[-1] += 1e-3
        a, b = jsd(p, q), jsd(q, p)
        worst = max(worst, abs(a - b))
        if not -1e-15 <= a <= math.log(2) + 1e-12:
            problems.append(f"out of bounds: {a!r}")
    if worst > 1e-12:
        problems.append(f"asymmetry {worst:.2e}")
    verdict("jsd", problems, time.perf_counter() - t0, 1.0)


# --- Krippendorff's alpha ----------------------------------------------------------------------

def coincidence_alpha(units):
    """Nominal alpha from the coincidence matrix, in exact rational arithmetic."""
    values = sorted({v for u in units for v in u if v is not None})
    o = {(c, k): Fraction(0) for c in values for k in values}
    for u in units:
        vals = [v for v in u if v is not None]
        m = len(vals)
        if m < 2:
            continue
        for i, j in product(range(m), repeat=2):
            if i != j:
                o[vals[i], vals[j]] += Fraction(1, m - 1)
    n_c = {c: sum(o[c, k] for k in values) for c in values}
    n = sum(n_c.values())
    d_o = sum(o[c, k] for c in values for k in values if c != k) / n
    d_e = sum(n_c[c] * n_c[k] for c in values for k in values if c != k) / (n * (n - 1))
    return 1 - d_o / d_e


def test_krippendorff():
    t0 = time.perf_counter()
    problems = []
    perfect = krippendorff_alpha([[1, 1, 1], [2, 2, 2], [3, 3, 3], [5, 5, 5]], "nominal")
    if perfect != 1.0:
        problems.append(f"perfect agreement gives {perfect!r}")
    fixture = [[1, 1], [2, 2], [3, 3], [1, 2]]
    oracle = coincidence_alpha(fixture)
    if oracle != Fraction(2, 3):
        problems.append(f"oracle gives {oracle}, hand value is 2/3")
    got = krippendorff_alpha(fixture, "nominal")
    if abs(got - float(oracle)) > 1e-9:
        problems.append(f"alpha {got!r} vs oracle {float(oracle)!r}")
    verdict("krippendorff alpha", problems, time.perf_counter() - t0, detail=f"4x2 fixture alpha={got:.12f}")


# --- IPF -------------------------------------------------------------------------------------------

def test_ipf():
    t0 = time.perf_counter()
    pool = ProfilePool([UserProfile(f"c{i}{j}", {"A": f"a{i}", "B": f"b{j}"}) for i, j in product(range(4), range(4))])
    problems, worst_iters, worst_res = [], 0, 0.0
    for trial in range(100):
        gen = np.random.default_rng(trial)
        base = gen.uniform(0.5, 5.0, size=16)
        truth = gen.uniform(0.5, 5.0, size=(4, 4))
        truth /= truth.sum()
        targets = {"A": {f"a{i}": float(v) for i, v in enumerate(truth.sum(axis=1))},
                   "B": {f"b{j}": float(v) for j, v in enumerate(truth.sum(axis=0))}}
        res = ipf_balance(pool, targets, max_iters=100, tol=1e-6, base_weights=base)
        w = res.weights.reshape(4, 4)
        resid = max(np.abs(w.sum(axis=1) - truth.sum(axis=1)).max(), np.abs(w.sum(axis=0) - truth.sum(axis=0)).max())
        worst_iters, worst_res = max(worst_iters, res.iterations), max(worst_res, resid)
        if not res.converged or res.iterations > 100 or resid > 1e-6:
            problems.append(f"trial {trial}: {res.iterations} iterations, residual {resid:.2e}")
    verdict("ipf", problems, time.perf_counter() - t0,
            detail=f"max {worst_iters} iterations, max residual {worst_res:.1e}")


# --- memory perception ----------------------------------------------------------------------------

def test_memory_perception(embedder):
    t0 = time.perf_counter()
    from test_behavior import make_scenario

    problems = []
    sc = make_scenario()
    ctx = UserContext(sc, Conversation(sc.id))
    reply = "Try ten minutes of calf stretches after every walk."
    store = MemoryStore([MemoryEntry("legs", reply, embedder.embed_one(reply), 1)])
    keep = conftest.scripted({"memory": [{"need_store": "false"}]})
    dup = perceive_memory(reply, store, embedder, 0.7, keep, ctx, 3)
    if not dup.negative:
        problems.append(f"duplicate not negative (sim {dup.max_similarity:.3f})")
    other = perceive_memory("Paris museums stay open late on Fridays.", store, embedder, 0.7, keep, ctx, 3)
    if other.negative:
        problems.append(f"unrelated text negative (sim {other.max_similarity:.3f})")

    grow = conftest.scripted({"memory": [{"need_store": "true", "query": "a", "response": "Stretch daily"},
                                         {"need_store": "false"},
                                         {"need_store": "true", "query": "b", "response": "Roll your calves"}]})
    store, sizes = MemoryStore(), []
    for turn in range(2, 10):
        perceive_memory(f"reply number {turn}", store, embedder, 0.7, grow, ctx, turn)
        sizes.append(len(store))
    if any(b < a for a, b in zip(sizes, sizes[1:])):
        problems.append(f"store shrank: {sizes}")
    verdict("memory perception", problems, time.perf_counter() - t0,
            detail=f"dup sim {dup.max_similarity:.3f}, unrelated sim {other.max_similarity:.3f}")


# --- retrieval -------------------------------------------------------------------------------------

class TableEmbedder(Embedder):
    def __init__(self, table):
        self.table = table
        self.dim = len(next(iter(table.values())))

    def embed(self, texts):
        return np.stack([np.asarray(self.table[t], dtype=float) for t in texts])


def _unit(v):
    return v / np.linalg.norm(v)


def test_retrieval():
    t0 = time.perf_counter()
    gen = np.random.default_rng(3)
    dim, n, k = 32, 1000, 3
    mat = np.array([_unit(v) for v in gen.normal(size=(n, dim))])
    entries = [DesireEntry(id=f"d{i:04d}", theme="exercise_fitness", intent_text=f"i{i}", event_contexts=("e",), tags={},
                           embedding=mat[i]) for i in range(n)]
    pool = DesirePool(entries)
    problems, mismatches = [], 0
    for q in gen.normal(size=(20, dim)):
        qn = _unit(q)
        # exhaustive scan in plain python, ties broken by id
        scored = sorted(((-sum(a * b for a, b in zip(e.embedding, qn)), e.id) for e in entries))
        want = [i for _, i in scored[:k]]
        mismatches += [e.id for e, _ in pool.search(q, k)] != want
    if mismatches:
        problems.append(f"{mismatches} mismatching queries")

    # three hypotheses whose neighbourhoods overlap
    hyps = [EventHypothesis(d, f"h{j}") for j, d in enumerate(DIMENSIONS)]
    table = {"h0": mat[0], "h1": _unit(mat[0] + 0.2 * mat[1]), "h2": mat[500]}
    got = retrieve_desires(hyps, pool, TableEmbedder(table))
    ids = [e.id for e in got]
    union = []
    for h in hyps:
        for e, _ in pool.search(np.asarray(table[h.text]), 3):
            if e.id not in union:
                union.append(e.id)
    if len(ids) > 9 or len(set(ids)) != len(ids) or ids != union:
        problems.append(f"candidate list {ids} vs expected {union}")
    verdict("retrieval", problems, time.perf_counter() - t0, detail=f"{mismatches} mismatches, {len(ids)} candidates")


# --- metric arithmetic -----------------------------------------------------------------------------

def test_metric_arithmetic():
    t0 = time.perf_counter()
    problems = []
    gen = np.random.default_rng(0)
    for trial in range(100):
        m = int(gen.integers(1, 12))
        binaries = [int(b) for b in gen.integers(0, 2, size=m)]
        kinds = [("explicit", "implicit")[int(b)] for b in gen.integers(0, 2, size=m)]
        acc = item_accuracy(binaries, kinds)
        overall = Fraction(sum(binaries), m)
        parts = [(kinds.count(k), acc[k]) for k in ("explicit", "implicit")]
        weighted = sum(n_k * a for n_k, a in parts if n_k) / m
        if abs(acc["all"] - float(overall)) > 1e-12 or abs(weighted - float(overall)) > 1e-12:
            problems.append(f"trial {trial}: partition identity broken")
    ends = {r: scalar_to_100(r) for r in (1, 3, 5)}
    if ends != {1: 0.0, 3: 50.0, 5: 100.0}:
        problems.append(f"scale map {ends}")
    verdict("metric arithmetic", problems, time.perf_counter() - t0)


# --- end-to-end golden run -------------------------------------------------------------------------

def test_golden_run(tmp_path):
    from run_golden import compare

    tree = GOLDEN / "tree"
    t0 = time.perf_counter()
    problems = []
    if not tree.exists():
        problems.append("golden tree missing; run scripts/run_golden.py --update")
    else:
        cfg = load_config(GOLDEN / "config.yaml")
        Pipeline(cfg, tmp_path / "out").run()
        problems = compare(tmp_path / "out", tree)
    n = len(tree_digest(tree)) if tree.exists() else 0
    verdict("golden run", problems, time.perf_counter() - t0, 120.0, detail=f"{n} files")


# --- live backend smoke ----------------------------------------------------------------------------

LIVE = os.environ.get("LIFESIM_LIVE_ENDPOINT")


class CorrectionCounter:
    """Wraps a chat backend and records how many corrective turns each request carried."""

    def __init__(self, inner):
        self.inner = inner
        self.spec = inner.spec
        self.log = inner.log
        self.corrections = []

    def chat(self, request):
        self.corrections.append(sum(r == "user" and t == CORRECTIVE_INSTRUCTION for r, t in request.messages))
        return self.inner.chat(request)


@pytest.mark.skipif(not (LIVE and os.environ.get("LIFESIM_API_KEY")),
                    reason="set LIFESIM_LIVE_ENDPOINT, LIFESIM_LIVE_MODEL and LIFESIM_API_KEY to run")
def test_live_smoke(tmp_path):
    from lifesim.evaluation.protocols import EvalReport, run_single_scenario_eval

    t0 = time.perf_counter()
    bench_path = GOLDEN / "tree" / "benchmark" / "benchmark.jsonl"
    scenario = load_benchmark(bench_path)[:1]
    spec = BackendSpec(kind="remote", model=os.environ.get("LIFESIM_LIVE_MODEL", "gpt-4o-mini"), endpoint=LIVE,
                       name="live", retry_budget=2)
    chat = CorrectionCounter(make_chat(spec))
    report = run_single_scenario_eval(scenario, chat, [chat], user_chat=chat,
                                      embedder=make_embedder(BackendSpec(kind="scripted", dim=64)),
                                      seed=0, max_turns=4)
    path = report.save(tmp_path / "live.json")
    back = EvalReport.from_dict(json.loads(Path(path).read_text()))
    problems = []
    if back.to_dict() != report.to_dict():
        problems.append("report does not round-trip")
    if max(chat.corrections, default=0) > spec.retry_budget:
        problems.append(f"{max(chat.corrections)} corrective turns exceed budget {spec.retry_budget}")
    verdict("live smoke", problems, time.perf_counter() - t0,
            detail=f"{len(chat.corrections)} calls, excluded {back.excluded}")
