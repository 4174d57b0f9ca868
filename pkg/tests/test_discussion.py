import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from deliberag.agents import DecisionValue, Phase, default_roles
from deliberag.backend import MockBackend
from deliberag.corpus import Category, ChunkPolicy, chunk_corpus, load_manifest
from deliberag.discussion import (
    DiscussionConfig,
    dumps_transcript,
    load_transcript,
    new_transcript,
    phase_of_round,
    run_discussion,
    save_transcript,
    step_round,
    transcript_from_dict,
    transcript_hash,
    transcript_to_dict,
)
from deliberag.errors import ConfigError, DiscussionError, MissingCategory, OutOfRange, SchemaError

from conftest import WINSLOW_TASK, write_manifest


def script(rounds, rca_decisions=None, sea_decisions=None):
    rca_decisions = rca_decisions or ["AGREE"] * rounds
    sea_decisions = sea_decisions or ["AGREE"] * rounds
    return {
        "RCA": [f"RCA round {i + 1} finds licensing rules [doe-qa#0].\nDECISION: {d}" for i, d in enumerate(rca_decisions)],
        "SEA": [f"SEA round {i + 1} reviews the geology.\nDECISION: {d}" for i, d in enumerate(sea_decisions)],
        "RCA:rewrite": [f"regulatory follow-up {i}" for i in range(2, rounds + 1)],
        "SEA:rewrite": [f"seismic follow-up {i}" for i in range(2, rounds + 1)],
    }


def cfg(rounds=2, **kw):
    return DiscussionConfig(task=WINSLOW_TASK, rounds=rounds, **kw)


class TestPhaseOfRound:
    @pytest.mark.parametrize("ri, phase", [(1, Phase.INTELLIGENCE), (10, Phase.CHOICE), (5, Phase.DESIGN)])
    def test_examples(self, ri, phase):
        assert phase_of_round(ri, 10) is phase

    def test_ten_round_blocks(self):
        phases = [phase_of_round(r, 10) for r in range(1, 11)]
        assert phases == [Phase.INTELLIGENCE] * 4 + [Phase.DESIGN] * 3 + [Phase.CHOICE] * 3

    @pytest.mark.parametrize("ri, total", [(0, 10), (11, 10), (1, 0)])
    def test_out_of_range(self, ri, total):
        with pytest.raises(OutOfRange):
            phase_of_round(ri, total)


@given(total=st.integers(1, 200))
def test_phase_blocks_property(total):
    # oracle: block sizes from integer division, remainder handed to the earliest blocks
    sizes = [total // 3 + (1 if i < total % 3 else 0) for i in range(3)]
    expected = []
    for phase, size in zip(Phase, sizes):
        expected += [phase] * size
    got = [phase_of_round(r, total) for r in range(1, total + 1)]
    assert got == expected
    # contiguous and in order
    order = [list(Phase).index(p) for p in got]
    assert order == sorted(order)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(task=""), dict(rounds=0), dict(k=-1),
                                    dict(early_stop=True, early_stop_window=5, rounds=3)])
    def test_invalid(self, kw):
        args = {"task": WINSLOW_TASK, **kw}
        with pytest.raises(ConfigError):
            DiscussionConfig(**args)

    def test_defaults(self):
        c = DiscussionConfig(task="t")
        assert (c.rounds, c.k, c.early_stop, c.early_stop_window) == (10, 4, False, 3)


class TestStepRound:
    def test_round_one_order(self, fixture_corpus, fixture_index):
        t = new_transcript(cfg(), fixture_corpus)
        t1 = step_round(t, MockBackend(script=script(2)), fixture_index, fixture_corpus)
        (ri, turns), = t1.rounds
        assert ri == 1 and [x.role_id for x in turns] == ["RCA", "SEA"]
        assert all(x.phase is Phase.INTELLIGENCE for x in turns)
        assert turns[0].query == "What regulations govern temporary nuclear waste storage?"
        assert t.rounds == ()

    def test_scoping(self, fixture_corpus, fixture_index):
        t = step_round(new_transcript(cfg(k=25), fixture_corpus), MockBackend(script=script(2)),
                       fixture_index, fixture_corpus)
        rca, sea = t.rounds[0][1]
        assert {t.references[h.chunk_id].category for h in rca.hits} == {Category.REGULATORY}
        assert {t.references[h.chunk_id].category for h in sea.hits} == {Category.SAFETY}
        assert len(rca.hits) == 14 and len(sea.hits) == 11

    def test_sea_failure_is_atomic(self, fixture_corpus, fixture_index):
        t = new_transcript(cfg(), fixture_corpus)
        backend = MockBackend(script={"RCA": ["fine.\nDECISION: AGREE"]})
        with pytest.raises(DiscussionError) as err:
            step_round(t, backend, fixture_index, fixture_corpus)
        assert (err.value.round_index, err.value.role_id) == (1, "SEA")
        assert t.rounds == () and t.completed_rounds == 0

    def test_peer_responses(self, fixture_corpus, fixture_index):
        seen = []

        class Spy(MockBackend):
            def generate(self, request):
                seen.append(request)
                return super().generate(request)

        backend = Spy(script=script(2))
        t = new_transcript(cfg(), fixture_corpus)
        t = step_round(t, backend, fixture_index, fixture_corpus)
        t = step_round(t, backend, fixture_index, fixture_corpus)
        responds = [r for r in seen if r.purpose == "respond"]
        rca1, sea1, rca2, sea2 = responds
        assert "Peer's last response" not in rca1.user_prompt
        assert "RCA round 1" in sea1.user_prompt
        assert "SEA round 1" in rca2.user_prompt
        assert "RCA round 2" in sea2.user_prompt

    def test_completed(self, fixture_corpus, fixture_index):
        t = new_transcript(cfg(rounds=1), fixture_corpus)
        t = step_round(t, MockBackend(script=script(1)), fixture_index, fixture_corpus)
        with pytest.raises(OutOfRange):
            step_round(t, MockBackend(script=script(1)), fixture_index, fixture_corpus)


class TestRunDiscussion:
    def test_two_rounds_replay(self, fixture_corpus):
        s = script(2, ["DISAGREE", "AGREE"])
        t = run_discussion(cfg(), fixture_corpus, MockBackend(script=s))
        assert t.completed_rounds == 2 and len(t.turns()) == 4
        assert [x.response for x in t.turns()] == [s["RCA"][0], s["SEA"][0], s["RCA"][1], s["SEA"][1]]
        assert [x.query for x in t.turns()][2:] == ["regulatory follow-up 2", "seismic follow-up 2"]
        assert t.turns()[0].decision.value is DecisionValue.DISAGREE
        assert not t.stopped_early

    def test_early_stop(self, fixture_corpus):
        # rounds 1 and 2 are clean agreements, so the window of 2 closes after round 2
        t = run_discussion(cfg(rounds=10, early_stop=True, early_stop_window=2), fixture_corpus,
                           MockBackend(script=script(10)))
        assert t.completed_rounds == 2 and t.stopped_early

    def test_early_stop_waits_for_window(self, fixture_corpus):
        s = script(6, ["DISAGREE", "AGREE", "AGREE", "AGREE", "AGREE", "AGREE"])
        t = run_discussion(cfg(rounds=6, early_stop=True, early_stop_window=3), fixture_corpus, MockBackend(script=s))
        assert t.completed_rounds == 4 and t.stopped_early

    def test_parse_warning_blocks_early_stop(self, fixture_corpus):
        # round 2 falls back to Disagree-with-warning, so the first clean window is rounds 3-4
        s = script(5)
        s["SEA"][1] = "Looks fine to me."
        t = run_discussion(cfg(rounds=5, early_stop=True, early_stop_window=2), fixture_corpus, MockBackend(script=s))
        assert t.completed_rounds == 4 and t.stopped_early

    def test_no_early_stop_by_default(self, fixture_corpus):
        t = run_discussion(cfg(rounds=3), fixture_corpus, MockBackend(script=script(3)))
        assert t.completed_rounds == 3 and not t.stopped_early

    def test_deterministic(self, fixture_corpus):
        a = run_discussion(cfg(rounds=3), fixture_corpus, MockBackend(script=script(3)))
        b = run_discussion(cfg(rounds=3), fixture_corpus, MockBackend(script=script(3)))
        assert transcript_hash(a) == transcript_hash(b)
        da, db = transcript_to_dict(a), transcript_to_dict(b)
        da.pop("created_at"), db.pop("created_at")
        assert json.dumps(da) == json.dumps(db)

    def test_partial_on_error(self, fixture_corpus):
        s = script(3)
        s["SEA"] = s["SEA"][:2]
        with pytest.raises(DiscussionError) as err:
            run_discussion(cfg(rounds=3), fixture_corpus, MockBackend(script=s))
        assert (err.value.round_index, err.value.role_id) == (3, "SEA")
        assert err.value.partial.completed_rounds == 2

    def test_missing_category(self, tmp_path):
        corpus = chunk_corpus(load_manifest(write_manifest(tmp_path, {"a": ("regulatory", "rules apply")})),
                              ChunkPolicy())
        with pytest.raises(MissingCategory):
            run_discussion(cfg(), corpus, MockBackend(script=script(2)))

    def test_inactive_sea(self, fixture_corpus):
        from deliberag.agents import apply_role_overrides

        roles = apply_role_overrides(default_roles(), {"SEA": {"active": False}})
        t = run_discussion(cfg(), fixture_corpus, MockBackend(script=script(2)), roles=roles)
        assert [x.role_id for x in t.turns()] == ["RCA", "RCA"]


class TestSerialization:
    @pytest.fixture
    def transcript(self, fixture_corpus):
        return run_discussion(cfg(), fixture_corpus, MockBackend(script=script(2)))

    def test_round_trip(self, transcript, tmp_path):
        save_transcript(transcript, tmp_path / "t.json")
        loaded = load_transcript(tmp_path / "t.json")
        assert loaded == transcript
        assert dumps_transcript(loaded) == dumps_transcript(transcript)
        data = json.loads((tmp_path / "t.json").read_text())
        assert data["schema_version"] == 1 and data["completed_rounds"] == 2
        assert data["corpus_ref"]["content_hash"]

    def test_hash_ignores_timestamp(self, transcript):
        from dataclasses import replace

        assert transcript_hash(replace(transcript, created_at="1999-01-01")) == transcript_hash(transcript)

    @pytest.mark.parametrize("mutate", [
        lambda d: d.update(schema_version=2),
        lambda d: d.pop("rounds"),
        lambda d: d.update(completed_rounds=5),
        lambda d: d["rounds"][0]["turns"][0]["decision"].update(value="Maybe"),
        lambda d: d["rounds"][0]["turns"][0]["relevance_scores"].append(0.3),
        lambda d: d.update(references={}),
    ])
    def test_schema_errors(self, transcript, mutate):
        data = transcript_to_dict(transcript)
        mutate(data)
        with pytest.raises(SchemaError):
            transcript_from_dict(data)

    def test_unreadable(self, tmp_path):
        (tmp_path / "t.json").write_text("{broken")
        with pytest.raises(SchemaError):
            load_transcript(tmp_path / "t.json")
