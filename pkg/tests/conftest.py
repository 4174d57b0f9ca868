from __future__ import annotations

import pytest

from deliberag import fixture_dir
from deliberag.agents import Decision, DecisionValue, Phase
from deliberag.backend import MockBackend
from deliberag.corpus import Category, ChunkPolicy, chunk_corpus, load_manifest
from deliberag.discussion import ChunkRef, DiscussionConfig, Transcript, Turn
from deliberag.index import RetrievalHit, build_index

WINSLOW_TASK = (
    "Validate whether a proposed temporary nuclear waste storage site near Winslow, "
    "Arizona, meets basic national regulatory requirements."
)

ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fixtures():
    return fixture_dir()


@pytest.fixture
def fixture_corpus(fixtures):
    return chunk_corpus(load_manifest(fixtures / "manifest.json"), ChunkPolicy(600, 100))


@pytest.fixture
def fixture_index(fixture_corpus):
    return build_index(fixture_corpus, MockBackend())


def write_manifest(tmp_path, docs: dict[str, tuple[str, str]]):
    """docs: doc_id -> (category, text). Returns the manifest path."""
    import json

    records = []
    for doc_id, (category, text) in docs.items():
        (tmp_path / f"{doc_id}.txt").write_text(text, encoding="utf-8")
        records.append({"doc_id": doc_id, "title": doc_id.title(), "category": category,
                        "agency": "DOE", "path": f"{doc_id}.txt"})
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(records), encoding="utf-8")
    return path


AGREE = Decision(DecisionValue.AGREE)
DISAGREE = Decision(DecisionValue.DISAGREE)


def make_transcript(rounds_spec, references=None, task=WINSLOW_TASK) -> Transcript:
    """rounds_spec: list of rounds, each a list of dicts with role_id and optional
    decision / hits (list of (chunk_id, score)) / query / response."""
    rounds = []
    for ri, specs in enumerate(rounds_spec, 1):
        turns = []
        for spec in specs:
            hits = tuple(RetrievalHit(cid, s, r) for r, (cid, s) in enumerate(spec.get("hits", [])))
            turns.append(Turn(ri, spec.get("phase", Phase.INTELLIGENCE), spec["role_id"],
                              spec.get("query", "what applies here"), hits,
                              spec.get("response", "It applies.\nDECISION: AGREE"),
                              spec.get("decision", AGREE)))
        rounds.append((ri, tuple(turns)))
    refs = references or {}
    for _, turns in rounds:
        for t in turns:
            for h in t.hits:
                if h.chunk_id not in refs:
                    doc_id = h.chunk_id.rpartition("#")[0]
                    refs[h.chunk_id] = ChunkRef(doc_id, "Paragraph 1", Category.REGULATORY, f"text of {h.chunk_id}")
    return Transcript(
        config=DiscussionConfig(task=task, rounds=max(len(rounds), 1)),
        corpus_ref={"manifest": "m.json", "content_hash": "x", "chunk_ids": sorted(refs)},
        rounds=tuple(rounds),
        references=dict(sorted(refs.items())),
    )
