import numpy as np
import pytest

from conftest import env_at, make_profile, scripted
from lifesim.behavior import (BehaviorError, Conversation, MemoryEntry, MemoryStore, Turn, UserContext,
                              generate_user_turn, infer_emotion, perceive_memory, run_dialogue, select_action)
from lifesim.gateway import ParseError, ScriptedChat
from lifesim.scenario import ChecklistItem, IntentChecklist, Scenario
from lifesim.synthetic import EMOTIONS, SyntheticResponder


def make_scenario(i=0, intent="Find a gentle stretch routine for sore legs"):
    items = (ChecklistItem("stretches that are easy on the knees", "explicit"),
             ChecklistItem("a routine under fifteen minutes", "implicit"))
    return Scenario(id=f"s{i:03d}", user_id="u1", index=i + 1, profile=make_profile(), env=env_at(i),
                    event=f"After day {i} of hiking the user's legs ache.", intent=intent,
                    checklist=IntentChecklist(items), theme="exercise_fitness")


def ctx():
    sc = make_scenario()
    return UserContext(sc, Conversation(sc.id))


class Capture:
    """Wraps a scripted backend and keeps every request it served."""

    def __init__(self, inner):
        self.inner = inner
        self.requests = []

    def __call__(self, request):
        self.requests.append(request)
        return self.inner(request)


# --- memory perception --------------------------------------------------------------------------

def test_duplicate_reply_is_negative(embedder):
    reply = "Try ten minutes of calf stretches after every walk."
    store = MemoryStore([MemoryEntry("legs", reply, embedder.embed_one(reply), 1)])
    chat = scripted({"memory": [{"need_store": "false", "query": "-1", "response": "-1"}]})
    p = perceive_memory(reply, store, embedder, 0.7, chat, ctx(), 3)
    assert p.negative and p.max_similarity == pytest.approx(1.0)
    assert len(store) == 1


def test_unrelated_reply_is_not_negative(embedder):
    old = "Try ten minutes of calf stretches after every walk."
    store = MemoryStore([MemoryEntry("legs", old, embedder.embed_one(old), 1)])
    chat = scripted({"memory": [{"need_store": "false"}]})
    p = perceive_memory("Paris has great museums open late on Fridays.", store, embedder, 0.7, chat, ctx(), 3)
    assert not p.negative and p.max_similarity < 0.7


def test_empty_store(embedder):
    p = perceive_memory("anything", MemoryStore(), embedder, 0.7, scripted({"memory": [{"need_store": "false"}]}),
                        ctx(), 2)
    assert not p.negative and p.max_similarity == 0.0


def test_store_appends_and_grows(embedder):
    store = MemoryStore()
    chat = scripted({"memory": [{"need_store": "true", "query": "stretch", "response": "Calf stretches"},
                                {"need_store": "false"},
                                {"need_store": "true", "query": "time", "response": "Ten minutes"}]})
    sizes = []
    for t in (2, 3, 4):
        perceive_memory(f"reply {t}", store, embedder, 0.7, chat, ctx(), t)
        sizes.append(len(store))
    assert sizes == [1, 1, 2]
    assert [e.source_turn for e in store.entries] == [2, 4]


def test_memory_needs_store_flag(embedder):
    with pytest.raises(ParseError):
        perceive_memory("x", MemoryStore(), embedder, 0.7, scripted({"memory": [{"query": "a"}]}), ctx(), 2)
    with pytest.raises(ValueError, match="theta"):
        perceive_memory("x", MemoryStore(), embedder, 1.0, scripted({}), ctx(), 2)


# --- emotion and action ----------------------------------------------------------------------------

def test_emotion_taxonomy():
    assert len(EMOTIONS) == 28 and "neutral" in EMOTIONS
    assert infer_emotion(ctx(), None, scripted({"emotion": [{"emotion": "neutral"}]})) == "neutral"
    with pytest.raises(BehaviorError, match="joyful"):
        infer_emotion(ctx(), None, scripted({"emotion": [{"emotion": "joyful"}]}))


def test_emotion_deterministic():
    chat = ScriptedChat((), responder=SyntheticResponder(seed=4))
    assert infer_emotion(ctx(), None, chat) == infer_emotion(ctx(), None, chat)


@pytest.mark.parametrize("raw,want", [("End Conversation", "end"), ("Continue Conversation", "continue")])
def test_actions(raw, want):
    assert select_action(ctx(), "neutral", None, scripted({"action": [{"action": raw}]})) == want


def test_bad_action():
    with pytest.raises(BehaviorError, match="Pause"):
        select_action(ctx(), "neutral", None, scripted({"action": [{"action": "Pause"}]}))


# --- utterance --------------------------------------------------------------------------------------

def test_user_turn_text_and_empty():
    assert generate_user_turn(ctx(), "neutral", "continue", None,
                              scripted({"user_turn": ["My legs hurt, any ideas?"]})) == "My legs hurt, any ideas?"
    with pytest.raises(BehaviorError, match="empty"):
        generate_user_turn(ctx(), "neutral", "continue", None, scripted({"user_turn": ["   "]}))


def test_negative_perception_reaches_prompt(embedder):
    reply = "Stretch your calves."
    store = MemoryStore([MemoryEntry("q", reply, embedder.embed_one(reply), 1)])
    p = perceive_memory(reply, store, embedder, 0.7, scripted({"memory": [{"need_store": "false"}]}), ctx(), 2)
    cap = Capture(lambda r: "Again the same tip?")
    generate_user_turn(ctx(), "annoyance", "continue", p, ScriptedChat((), responder=cap))
    rendered = cap.requests[0].prompt_text()
    assert "Negative memory perception" in rendered and "annoyance" in rendered


# --- dialogue loop -----------------------------------------------------------------------------------

def user_script(actions):
    return scripted({"memory": [{"need_store": "true", "query": "tip", "response": "Stretch daily"}],
                     "emotion": [{"emotion": "curiosity"}],
                     "action": [{"action": a} for a in actions],
                     "user_turn": ["My legs are sore after hiking.", "Anything else?", "Thanks, bye."]})


def assistant_script():
    return scripted({"predict_intent": [{"intent": "wants stretches"}],
                     "assistant_reply": ["Try gentle calf stretches.", "Foam rolling helps too."]})


def test_user_ends_after_first_turn(embedder):
    conv = run_dialogue(make_scenario(), user_script(["End Conversation"]), assistant_script(), embedder,
                        max_turns=5)
    assert len(conv.turns) == 2 and conv.ended_by == "user_action"
    assert conv.turns[1].predicted_intent == "wants stretches"


def test_turn_cap(embedder):
    conv = run_dialogue(make_scenario(), user_script(["Continue Conversation"]), assistant_script(), embedder,
                        max_turns=3)
    assert len(conv.turns) == 6 and conv.ended_by == "turn_cap"
    assert [t.speaker for t in conv.turns] == ["user", "assistant"] * 3


def test_stage_order_per_user_turn(embedder):
    chat = user_script(["Continue Conversation"])
    run_dialogue(make_scenario(), chat, assistant_script(), embedder, max_turns=3)
    tags = chat.log.tags()
    assert tags == ["emotion", "action", "user_turn"] + ["memory", "emotion", "action", "user_turn"] * 2


def test_backend_failure_leaves_partial_conversation(embedder):
    user = scripted({"memory": [{"need_store": "false"}], "emotion": [{"emotion": "curiosity"}],
                     "action": [{"action": "Continue Conversation"}, {"action": "Pause"}],
                     "user_turn": ["Hi"]})
    conv = run_dialogue(make_scenario(), user, assistant_script(), embedder, max_turns=5)
    assert conv.ended_by == "error" and "Pause" in conv.error
    assert len(conv.turns) == 2
    back = Conversation.from_lines(conv.dumps().splitlines())
    assert back.error == conv.error and len(back.turns) == 2


def _synthetic_dialogues(embedder):
    out = []
    for i in range(10):
        user = ScriptedChat((), responder=SyntheticResponder(seed=1))
        asst = ScriptedChat((), responder=SyntheticResponder(seed=2, quality=0.6))
        out.append(run_dialogue(make_scenario(i), user, asst, embedder, max_turns=6, seed=100 + i).dumps())
    return out


def test_ten_scenarios_byte_identical(embedder):
    a, b = _synthetic_dialogues(embedder), _synthetic_dialogues(embedder)
    assert a == b
    for text in a:
        conv = Conversation.from_lines(text.splitlines())
        conv.check(6)
        assert conv.ended_by in ("user_action", "turn_cap")
        assert all(t.emotion in EMOTIONS and t.action in ("continue", "end")
                   for t in conv.turns if t.speaker == "user")


def test_memory_monotone_inside_dialogue(embedder):
    user = scripted({"memory": [{"need_store": "true", "query": "a", "response": "Stretch daily"},
                                {"need_store": "false"},
                                {"need_store": "true", "query": "b", "response": "Roll your calves"}],
                     "emotion": [{"emotion": "curiosity"}], "action": [{"action": "Continue Conversation"}],
                     "user_turn": ["Tell me more."]})
    conv = run_dialogue(make_scenario(), user, assistant_script(), embedder, max_turns=5)
    stored = [t.memory.stored for t in conv.turns if t.speaker == "user" and t.memory and t.memory.stored]
    turns = [m.source_turn for m in stored]
    assert turns == [2, 4, 5]


def test_alternation_check():
    conv = Conversation("x", [Turn("user", "a"), Turn("user", "b")])
    with pytest.raises(ValueError, match="alternation"):
        conv.check()


def test_memory_entry_unit_norm():
    with pytest.raises(ValueError, match="unit-norm"):
        MemoryEntry("q", "v", np.array([3.0, 4.0]), 1)
