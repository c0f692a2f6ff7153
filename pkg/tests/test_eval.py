import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import env_at, make_profile, scripted
from lifesim.behavior import Conversation, Turn
from lifesim.evaluation.benchmark import build_user_scenarios
from lifesim.evaluation.checklist import ChecklistError, classify_intents, decompose_intent
from lifesim.evaluation.judges import JudgeVerdict, rigid_labels, score_scalar
from lifesim.evaluation.metrics import (ensemble_mean, item_accuracy, jsd, krippendorff_alpha, persona_alignment,
                                        preference_recovery, proactive_inquiry_ratio, rigid_ratio, scalar_to_100)
from lifesim.evaluation.protocols import (evaluate_single, group_by_user, profile_memory_update,
                                          run_long_horizon_eval, run_single_scenario_eval, simulate_long)
from lifesim.events import LifeEvent
from lifesim.gateway import BackendSpec, ScriptedChat, ScriptedEmbedder
from lifesim.scenario import ChecklistItem, IntentChecklist, Scenario
from lifesim.synthetic import SyntheticResponder

PREFS = {"need for autonomy": "high", "tolerance for risk": "low"}


def make_scenario(i=0, user="u1", history=(), kinds=("explicit", "explicit", "implicit", "implicit")):
    items = tuple(ChecklistItem(f"item {k} about stretching", kind) for k, kind in enumerate(kinds, 1))
    return Scenario(id=f"{user}-s{i:02d}", user_id=user, index=i, profile=make_profile(prefs=dict(PREFS)),
                    env=env_at(i), event=f"Legs ache on day {i}.", intent="Find a gentle stretch routine",
                    checklist=IntentChecklist(items), gold_preferences=dict(PREFS), theme="exercise_fitness",
                    history=tuple(history))


def synth(seed, quality=0.7, name=None):
    return ScriptedChat((), responder=SyntheticResponder(seed=seed, quality=quality),
                        spec=BackendSpec(kind="scripted", name=name or f"synth{seed}"))


# --- brute-force oracles ----------------------------------------------------------------------------

def alpha_oracle(data, level):
    """Krippendorff's alpha by explicit enumeration of ordered pairable-value pairs."""
    units = [[v for v in row if v is not None and not (isinstance(v, float) and math.isnan(v))] for row in data]
    units = [u for u in units if len(u) >= 2]
    pooled = [v for u in units for v in u]
    n = len(pooled)
    cats = sorted(set(pooled))
    freq = {c: pooled.count(c) for c in cats}

    def delta(a, b):
        if level == "nominal":
            return 0.0 if a == b else 1.0
        if level == "interval":
            return (a - b) ** 2
        lo, hi = sorted((cats.index(a), cats.index(b)))
        s = sum(freq[cats[k]] for k in range(lo, hi + 1))
        return (s - (freq[a] + freq[b]) / 2) ** 2

    d_o = sum(delta(u[i], u[j]) / (len(u) - 1)
              for u in units for i in range(len(u)) for j in range(len(u)) if i != j) / n
    d_e = sum(delta(pooled[i], pooled[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    return 1 - d_o / d_e


def jsd_oracle(p, q):
    p = [x / sum(p) for x in p]
    q = [x / sum(q) for x in q]
    total = 0.0
    for a, b in zip(p, q):
        m = (a + b) / 2
        if a > 0:
            total += 0.5 * a * math.log(a / m)
        if b > 0:
            total += 0.5 * b * math.log(b / m)
    return total


# --- checklist construction ------------------------------------------------------------------------------

def _decompose(items):
    return decompose_intent(make_profile(), "park", "event", "intent", scripted({"decompose": [items]}))


def test_decompose_bounds():
    assert len(_decompose(["a", "b", "c", "d"])) == 4
    with pytest.raises(ChecklistError, match="maximum 6"):
        _decompose(list("abcdefg"))
    with pytest.raises(ChecklistError, match="minimum 2"):
        _decompose(["a"])


def _classify(kinds):
    subs = [f"s{i}" for i in range(len(kinds))]
    reply = [{"description": s, "type": k} for s, k in zip(subs, kinds)]
    return classify_intents(subs, make_profile(), "park", "event", scripted({"classify": [reply]}))


def test_classify_balance():
    assert len(_classify(["explicit", "implicit", "explicit", "implicit"]).items) == 4
    with pytest.raises(ChecklistError):
        _classify(["explicit"] * 4)
    c = _classify(["explicit", "explicit", "implicit"])
    assert [len(c.of_kind(k)) for k in ("explicit", "implicit")] == [2, 1]


def test_checklist_invariants():
    with pytest.raises(ValueError, match="2..6"):
        IntentChecklist((ChecklistItem("a", "explicit"),))
    with pytest.raises(ValueError, match="explicit|implicit"):
        ChecklistItem("a", "hidden")


def test_build_user_scenarios_history_refs():
    events = [LifeEvent(env_at(d), f"event {d}", f"intent {d}", "d0", 0.5, "travel_tourism", d + 1) for d in range(3)]
    scs = build_user_scenarios(make_profile("u9"), events, synth(3))
    assert [s.history for s in scs] == [(), ("u9-s01",), ("u9-s01", "u9-s02")]
    assert group_by_user(scs)["u9"] == scs


# --- metric arithmetic ----------------------------------------------------------------------------------

def test_item_accuracy_examples():
    kinds = ["explicit", "explicit", "implicit", "implicit"]
    assert item_accuracy([1, 1, 1, 0], kinds)["all"] == 0.75
    assert item_accuracy([1, 1, 1, 1], kinds)["all"] == 1.0
    acc = item_accuracy([1, 1, 1, 0], kinds)
    assert (acc["explicit"], acc["implicit"]) == (1.0, 0.5)
    assert item_accuracy([1, 0], ["explicit", "explicit"])["implicit"] is None


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.sampled_from(["explicit", "implicit"])), min_size=2, max_size=6))
def test_partition_identity(items):
    bins, kinds = zip(*items)
    acc = item_accuracy(bins, kinds)
    n_e, n_i = kinds.count("explicit"), kinds.count("implicit")
    weighted = sum(w * a for w, a in ((n_e, acc["explicit"]), (n_i, acc["implicit"])) if w)
    assert abs(acc["all"] - weighted / len(kinds)) < 1e-12


def test_scale_map():
    assert [scalar_to_100(r) for r in (1, 3, 5)] == [0.0, 50.0, 100.0]
    for bad in (0, 6, 2.5, True):
        with pytest.raises(ValueError):
            scalar_to_100(bad)


def test_preference_recovery():
    gold = {f"d{i}": "high" for i in range(10)}
    assert preference_recovery(dict(gold), gold) == 1.0
    g4 = {"a": "low", "b": "high", "c": "low", "d": "high"}
    assert preference_recovery({"a": "low", "b": "high", "c": "low", "d": "low"}, g4) == 0.75
    assert preference_recovery({}, g4) == 0.0


def test_persona_alignment():
    assert persona_alignment([1, 1, 0, 1]) == 75.0
    assert persona_alignment([1, 1]) == 100.0 and persona_alignment([0, 0]) == 0.0


def test_ensemble():
    assert ensemble_mean([80, 90, 100]) == 90.0
    assert ensemble_mean([42.0]) == 42.0
    with pytest.raises(ValueError):
        ensemble_mean([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=5), st.randoms())
def test_ensemble_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert ensemble_mean(shuffled) == pytest.approx(ensemble_mean(values), abs=1e-9)


def test_proactive_inquiry():
    assert proactive_inquiry_ratio(["Hi.", "What time?  ", "Ok", "Sure"]) == 0.25
    assert proactive_inquiry_ratio([]) is None
    assert proactive_inquiry_ratio(["a?", "b?"]) == 1.0


def test_rigid_ratio_and_exclusion():
    assert rigid_ratio([True] * 2 + [False] * 8) == (0.2, 0)
    assert rigid_ratio([False] * 5) == (0.0, 0)
    assert rigid_ratio([True, None, False]) == (0.5, 1)
    conv = Conversation("s", [Turn("user", "hi"), Turn("assistant", "a"), Turn("user", "b"), Turn("assistant", "c")])
    judge = scripted({"judge_rigid": [{"rigid": "true"}, "unparseable"]})
    labels = rigid_labels(conv, judge, make_scenario())
    assert labels == [True, None]


def test_verdict_invariants():
    with pytest.raises(ValueError):
        JudgeVerdict("j", "m", binaries=[2])
    with pytest.raises(ValueError):
        JudgeVerdict("j", "m", rating=0)


def test_score_scalar_map():
    conv = Conversation("s", [Turn("user", "hi"), Turn("assistant", "hello")])
    for rating, want in ((5, 100.0), (1, 0.0), (3, 50.0)):
        _, v = score_scalar(conv, "naturalness", scripted({"judge_rating": [{"rating": rating}]}), make_scenario())
        assert v == want


# --- JSD --------------------------------------------------------------------------------------------------

def test_jsd_examples():
    assert abs(jsd([0.2, 0.3, 0.5], [0.2, 0.3, 0.5])) < 1e-12
    assert abs(jsd([1, 0], [0, 1]) - math.log(2)) < 1e-9
    assert abs(jsd([0.5, 0.5], [0.9, 0.1]) - jsd_oracle([0.5, 0.5], [0.9, 0.1])) < 1e-12
    assert jsd([2, 2], [9, 1]) == pytest.approx(jsd([0.5, 0.5], [0.9, 0.1]), abs=1e-15)
    with pytest.raises(ValueError):
        jsd([1, 0], [1, 0, 0])


def test_jsd_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(2, 12))
        p, q = rng.dirichlet(np.ones(k) * 0.5), rng.dirichlet(np.ones(k) * 0.5)
        a, b = jsd(p, q), jsd(q, p)
        assert abs(a - b) < 1e-12 and -1e-15 <= a <= math.log(2) + 1e-12
        assert abs(a - jsd_oracle(list(p), list(q))) < 1e-12


# --- Krippendorff ------------------------------------------------------------------------------------

FIXTURE_4x2 = [[1, 1], [2, 2], [3, 3], [1, 2]]


def test_alpha_perfect_agreement():
    assert krippendorff_alpha([[1, 1, 1], [2, 2, 2], [3, 3, 3]]) == 1.0
    assert krippendorff_alpha([[1, 1], [4, 4]], level="ordinal") == 1.0


def test_alpha_4x2_fixture():
    got = krippendorff_alpha(FIXTURE_4x2)
    assert abs(got - alpha_oracle(FIXTURE_4x2, "nominal")) < 1e-9
    assert abs(got - 2 / 3) < 1e-12


def test_alpha_degenerate():
    assert math.isnan(krippendorff_alpha([[3, 3, 3]]))
    with pytest.raises(ValueError):
        krippendorff_alpha([[1, None], [2, None]])


@pytest.mark.parametrize("level", ["nominal", "ordinal", "interval"])
def test_alpha_matches_oracle_with_missing(level):
    rng = np.random.default_rng(["nominal", "ordinal", "interval"].index(level))
    for _ in range(30):
        data = rng.integers(1, 6, size=(8, 3)).astype(float)
        data[rng.random(data.shape) < 0.15] = np.nan
        rows = [[None if np.isnan(v) else float(v) for v in r] for r in data]
        try:
            want = alpha_oracle(rows, level)
        except ZeroDivisionError:
            continue
        assert abs(krippendorff_alpha(rows, level) - want) < 1e-9


@pytest.mark.parametrize("level", ["nominal", "ordinal", "interval"])
def test_alpha_flip_decreases(level):
    base = [[1, 1, 1], [2, 2, 2], [3, 3, 3], [4, 4, 4], [1, 2, 1], [5, 5, 5]]
    a0 = krippendorff_alpha(base, level)
    for u, r in itertools.product(range(len(base)), range(3)):
        row = base[u]
        if all(v == row[r] for v in row):  # flip one agreement into a disagreement
            flipped = [list(x) for x in base]
            flipped[u][r] = row[r] % 5 + 1
            assert krippendorff_alpha(flipped, level) < a0


# --- protocols ---------------------------------------------------------------------------------------

def scripted_judge(name, rating):
    items = {"Checklist item 1": 1, "Checklist item 2": 1, "Checklist item 3": 1, "Checklist item 4": 0}
    chat = scripted({"judge_items": [items], "judge_rating": [{"rating": rating}],
                     "judge_persona": [{d: 1 for d in PREFS}], "judge_rigid": [{"rigid": "false"}]})
    chat.spec = BackendSpec(kind="scripted", name=name)
    return chat


def scripted_assistant():
    chat = scripted({"predict_preferences": [{"need for autonomy": "high", "tolerance for risk": "high"}]})
    chat.spec = BackendSpec(kind="scripted", name="asst")
    return chat


def conv_for(sc, error=None):
    return Conversation(sc.id, [Turn("user", "My legs ache."), Turn("assistant", "Try stretching?",
                                                                   predicted_intent="stretch")],
                        ended_by="error" if error else "user_action", error=error)


def test_single_report_arithmetic():
    scs = [make_scenario(1), make_scenario(2)]
    convs = [conv_for(scs[0]), conv_for(scs[1], error="GatewayError: boom")]
    judges = [scripted_judge("j1", 5), scripted_judge("j2", 3), scripted_judge("j3", 1)]
    rep = evaluate_single(scs, convs, scripted_assistant(), judges, seed=0)
    assert rep.excluded == [scs[1].id]
    agg = rep.aggregates
    assert agg["n"] == 1
    assert (agg["A"], agg["A_e"], agg["A_i"]) == (75.0, 100.0, 50.0)
    assert (agg["R"], agg["R_e"], agg["R_i"]) == (75.0, 100.0, 50.0)
    assert agg["naturalness"] == agg["coherence"] == 50.0
    assert agg["A_pref"] == 50.0 and agg["persona_alignment"] == 100.0
    assert agg["proactive_inquiry"] == 100.0 and agg["rigid_reasoning"] == 0.0
    row = rep.scenarios[0]
    assert [row["per_judge"][j]["naturalness"] for j in ("j1", "j2", "j3")] == [100.0, 50.0, 0.0]


def test_empty_benchmark_and_no_judges():
    with pytest.raises(ValueError, match="empty"):
        evaluate_single([], [], scripted_assistant(), [scripted_judge("j", 3)], seed=0)
    with pytest.raises(ValueError, match="at least one judge"):
        evaluate_single([make_scenario()], [conv_for(make_scenario())], scripted_assistant(), [], seed=0)


def _single_run(workers):
    scs = [make_scenario(i, user=f"u{i}") for i in range(1, 5)]
    emb = ScriptedEmbedder(dim=32, seed=0, mode="tokens")
    return run_single_scenario_eval(scs, synth(2, 0.8, "asst"), [synth(11, name="ja"), synth(12, name="jb")],
                                    user_chat=synth(1), embedder=emb, seed=7, max_turns=6, workers=workers)


def test_single_protocol_deterministic_and_bounded():
    a, b = _single_run(1), _single_run(4)
    assert a.to_dict() == b.to_dict()
    for row in a.scenarios:
        for v in row["metrics"].values():
            assert v is None or 0 <= v <= 100
        assert row["n_turns"] <= 12


def long_benchmark(n=3, user="u1"):
    out = []
    for i in range(1, n + 1):
        out.append(make_scenario(i, user=user, history=[s.id for s in out]))
    return out


def test_profile_memory_update():
    conv = conv_for(make_scenario())
    assert profile_memory_update(conv, "", scripted({"profile_memory": [{"summary": "Likes stretching."}]})) \
        == "Likes stretching."
    assert profile_memory_update(Conversation("x"), "", scripted({"profile_memory": [{"summary": ""}]})) == ""


def test_memory_records_one_per_prior_scenario():
    emb = ScriptedEmbedder(dim=32, seed=0, mode="tokens")
    _, records = simulate_long(long_benchmark(3), synth(2, name="asst"), user_chat=synth(1), embedder=emb,
                               memory=True, seed=1)
    assert [r["index"] for r in records] == [1, 2, 3]
    rep = run_long_horizon_eval(long_benchmark(3), synth(2, name="asst"), [synth(11)], user_chat=synth(1),
                                embedder=emb, memory=True, seed=1)
    assert [r["n_memory_records"] for r in rep.scenarios] == [0, 1, 2]
    assert sorted(rep.grid) == ["1", "2", "3"]


def test_long_protocol_grid_and_determinism():
    emb = ScriptedEmbedder(dim=32, seed=0, mode="tokens")
    bench = long_benchmark(10, "ua") + long_benchmark(1, "ub")

    def run(memory):
        return run_long_horizon_eval(bench, synth(2, name="asst"), [synth(11), synth(12)], user_chat=synth(1),
                                     embedder=emb, memory=memory, seed=3, workers=2)

    a, b = run(False), run(False)
    assert a.to_dict() == b.to_dict()
    assert sorted(a.grid, key=int) == [str(i) for i in range(1, 11)]
    assert a.grid["1"]["n"] == 2 and a.grid["10"]["n"] == 1
    assert all(r["n_turns"] <= 6 for r in a.scenarios)
    assert run(True).memory is True


def test_group_by_user_rejects_bad_history():
    bench = long_benchmark(2)
    bad = [bench[0], make_scenario(2, history=())]
    with pytest.raises(ValueError, match="history refs"):
        group_by_user(bad)


def test_temporal_histogram_rows_match_fidelity():
    from lifesim.evaluation.metrics import temporal_fidelity, temporal_histogram_rows

    real_h, sim_h = [8, 9, 9, 13, 20], [9, 9, 12, 21]
    real_g, sim_g = [0.1, 0.6, 2.5], [0.3, 1.5]
    rows = temporal_histogram_rows(real_h, sim_h, real_g, sim_g)
    hours = [r for r in rows if r[0] == "hour_of_day"]
    assert len(hours) == 24 and sum(r[3] for r in hours) == pytest.approx(1.0)
    fid = temporal_fidelity(real_h, sim_h, real_g, sim_g)
    assert jsd([r[3] for r in hours], [r[4] for r in hours]) == pytest.approx(fid["hour_of_day"], abs=1e-8)
