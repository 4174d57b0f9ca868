"""Round-based discussion engine producing a serializable transcript."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from .agents import (
    DEFAULT_SUMMARY_BUDGET,
    AgentRole,
    Decision,
    DecisionValue,
    Phase,
    TurnContext,
    default_roles,
    parse_decision,
    querying_roles,
    render_prompt,
    rewrite_query,
    summarize_history,
)
from .corpus import Category, Corpus
from .errors import ConfigError, DeliberagError, DiscussionError, OutOfRange, SchemaError
from .index import DEFAULT_K, RetrievalHit, VectorIndex, build_index

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DiscussionConfig:
    task: str
    rounds: int = 10
    k: int = DEFAULT_K
    early_stop: bool = False
    early_stop_window: int = 3
    seed_note: str = ""
    summary_budget: int = DEFAULT_SUMMARY_BUDGET

    def __post_init__(self):
        if not self.task or not self.task.strip():
            raise ConfigError("task must be a non-empty string")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1 (got {self.rounds})")
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        if self.early_stop_window < 1:
            raise ConfigError("early_stop_window must be >= 1")
        if self.early_stop and self.early_stop_window > self.rounds:
            raise ConfigError("early_stop_window must not exceed rounds")
        if self.summary_budget < 1:
            raise ConfigError("summary_budget must be >= 1")


@dataclass(frozen=True)
class ChunkRef:
    """Enough of a retrieved chunk to compute metrics without the corpus."""

    doc_id: str
    section_label: str
    category: Category
    text: str


@dataclass(frozen=True)
class Turn:
    round_index: int
    phase: Phase
    role_id: str
    query: str
    hits: tuple[RetrievalHit, ...]
    response: str
    decision: Decision

    @property
    def relevance_scores(self) -> list[float]:
        return [h.score for h in self.hits]


@dataclass(frozen=True)
class Transcript:
    config: DiscussionConfig
    corpus_ref: dict
    rounds: tuple[tuple[int, tuple[Turn, ...]], ...] = ()
    references: dict = field(default_factory=dict)
    stopped_early: bool = False
    created_at: str = ""

    @property
    def completed_rounds(self) -> int:
        return len(self.rounds)

    def turns(self) -> list[Turn]:
        return [t for _, ts in self.rounds for t in ts]


def phase_of_round(round_index: int, total_rounds: int) -> Phase:
    """Contiguous Intelligence/Design/Choice blocks; the remainder goes to earlier blocks."""
    if total_rounds < 1 or not 1 <= round_index <= total_rounds:
        raise OutOfRange(f"round {round_index} outside 1..{total_rounds}")
    base, extra = divmod(total_rounds, 3)
    upper = 0
    for i, phase in enumerate(Phase):
        upper += base + (1 if i < extra else 0)
        if round_index <= upper:
            return phase
    raise AssertionError("unreachable")


def new_transcript(config: DiscussionConfig, corpus: Corpus) -> Transcript:
    return Transcript(
        config=config,
        corpus_ref={
            "manifest": corpus.manifest_path,
            "content_hash": corpus.content_hash(),
            "chunk_ids": [c.chunk_id for c in corpus.chunks],
        },
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def _context(transcript: Transcript, role: AgentRole, round_index: int, this_round: list[Turn]) -> TurnContext:
    cfg = transcript.config
    prior = transcript.turns()
    if this_round:
        peer = this_round[-1].response
    elif transcript.rounds:
        peer = transcript.rounds[-1][1][-1].response
    else:
        peer = None
    previous_query = next((t.query for t in reversed(prior) if t.role_id == role.role_id), None)
    return TurnContext(
        task=cfg.task,
        round_index=round_index,
        phase=phase_of_round(round_index, cfg.rounds),
        prior_summary=summarize_history(prior, cfg.summary_budget),
        peer_last_response=peer,
        previous_query=previous_query,
    )


def _category_filter(role: AgentRole):
    return None if role.allowed_categories >= frozenset(Category) else role.allowed_categories


def step_round(
    transcript: Transcript,
    backend,
    index: VectorIndex,
    corpus: Corpus,
    roles: list[AgentRole] | None = None,
) -> Transcript:
    """Run one round and return a new transcript; the input is never modified."""
    cfg = transcript.config
    if transcript.completed_rounds >= cfg.rounds:
        raise OutOfRange("all configured rounds are already complete")
    round_index = transcript.completed_rounds + 1
    speakers = querying_roles(roles if roles is not None else default_roles())
    turns: list[Turn] = []
    references = dict(transcript.references)
    for role in speakers:
        try:
            ctx = _context(transcript, role, round_index, turns)
            query = rewrite_query(role, ctx, backend)
            hits = index.top_k(backend.embed_text(query), cfg.k, _category_filter(role))
            chunks = [corpus.chunk(h.chunk_id) for h in hits]
            request = render_prompt(role, ctx, list(zip(hits, chunks)))
            response = backend.generate(request).text
        except DeliberagError as exc:
            raise DiscussionError(round_index, role.role_id, exc) from exc
        for c in chunks:
            references[c.chunk_id] = ChunkRef(c.doc_id, c.section_label, c.category, c.text)
        turns.append(Turn(round_index, ctx.phase, role.role_id, query, tuple(hits), response, parse_decision(response)))
        log.debug("round %d %s: %d hits", round_index, role.role_id, len(hits))
    return replace(
        transcript,
        rounds=transcript.rounds + ((round_index, tuple(turns)),),
        references=dict(sorted(references.items())),
    )


def _should_stop(transcript: Transcript) -> bool:
    cfg = transcript.config
    if not cfg.early_stop or transcript.completed_rounds < cfg.early_stop_window:
        return False
    window = transcript.rounds[-cfg.early_stop_window:]
    return all(t.decision.is_clean_agree for _, turns in window for t in turns)


def run_discussion(
    config: DiscussionConfig,
    corpus: Corpus,
    backend,
    index: VectorIndex | None = None,
    roles: list[AgentRole] | None = None,
    on_round=None,
) -> Transcript:
    """Run the full discussion.

    On failure a :class:`DiscussionError` is raised whose ``partial`` attribute
    holds the transcript of the rounds that did complete.
    """
    roles = roles if roles is not None else default_roles()
    speakers = querying_roles(roles)
    if not speakers:
        raise ConfigError("no active querying roles")
    needed = set()
    for r in speakers:
        needed |= r.allowed_categories if _category_filter(r) is not None else set()
    corpus.require_categories(needed)
    if index is None:
        index = build_index(corpus, backend)

    transcript = new_transcript(config, corpus)
    while transcript.completed_rounds < config.rounds:
        try:
            transcript = step_round(transcript, backend, index, corpus, roles)
        except DiscussionError as exc:
            exc.partial = transcript
            raise
        if on_round is not None:
            on_round(transcript.rounds[-1])
        if _should_stop(transcript):
            transcript = replace(transcript, stopped_early=True)
            break
    return transcript


# serialization

def _decision_to_dict(d: Decision) -> dict:
    return {"value": d.value.value, "parse_warning": d.parse_warning}


def transcript_to_dict(t: Transcript) -> dict:
    cfg = t.config
    return {
        "schema_version": SCHEMA_VERSION,
        "created_at": t.created_at,
        "config": {
            "task": cfg.task,
            "rounds": cfg.rounds,
            "k": cfg.k,
            "early_stop": cfg.early_stop,
            "early_stop_window": cfg.early_stop_window,
            "seed_note": cfg.seed_note,
            "summary_budget": cfg.summary_budget,
        },
        "corpus_ref": t.corpus_ref,
        "completed_rounds": t.completed_rounds,
        "stopped_early": t.stopped_early,
        "rounds": [
            {
                "round_index": ri,
                "turns": [
                    {
                        "round_index": turn.round_index,
                        "phase": turn.phase.value,
                        "role_id": turn.role_id,
                        "query": turn.query,
                        "hits": [{"chunk_id": h.chunk_id, "score": h.score, "rank": h.rank} for h in turn.hits],
                        "relevance_scores": turn.relevance_scores,
                        "response": turn.response,
                        "decision": _decision_to_dict(turn.decision),
                    }
                    for turn in turns
                ],
            }
            for ri, turns in t.rounds
        ],
        "references": {
            cid: {"doc_id": r.doc_id, "section_label": r.section_label, "category": r.category.value, "text": r.text}
            for cid, r in t.references.items()
        },
    }


def transcript_from_dict(data: dict) -> Transcript:
    if not isinstance(data, dict) or data.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError("transcript: unsupported or missing schema_version")
    try:
        cfg = DiscussionConfig(**data["config"])
        rounds = []
        for r in data["rounds"]:
            turns = []
            for t in r["turns"]:
                hits = tuple(RetrievalHit(h["chunk_id"], float(h["score"]), int(h["rank"])) for h in t["hits"])
                if [h.score for h in hits] != [float(s) for s in t["relevance_scores"]]:
                    raise SchemaError("turn relevance_scores disagree with hit scores")
                dec = Decision(DecisionValue(t["decision"]["value"]), bool(t["decision"]["parse_warning"]))
                turns.append(Turn(int(t["round_index"]), Phase(t["phase"]), t["role_id"], t["query"], hits, t["response"], dec))
            rounds.append((int(r["round_index"]), tuple(turns)))
        refs = {
            cid: ChunkRef(r["doc_id"], r["section_label"], Category(r["category"]), r["text"])
            for cid, r in data["references"].items()
        }
        transcript = Transcript(
            config=cfg,
            corpus_ref=data["corpus_ref"],
            rounds=tuple(rounds),
            references=refs,
            stopped_early=bool(data["stopped_early"]),
            created_at=data.get("created_at", ""),
        )
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise SchemaError(f"transcript: malformed content: {exc}") from exc
    if transcript.completed_rounds != data.get("completed_rounds"):
        raise SchemaError("transcript: completed_rounds disagrees with rounds")
    for turn in transcript.turns():
        for h in turn.hits:
            if h.chunk_id not in refs:
                raise SchemaError(f"transcript: hit {h.chunk_id} has no reference entry")
    return transcript


def dumps_transcript(t: Transcript) -> str:
    return json.dumps(transcript_to_dict(t), indent=2, ensure_ascii=False) + "\n"


def save_transcript(t: Transcript, path) -> None:
    Path(path).write_text(dumps_transcript(t), encoding="utf-8")


def load_transcript(path) -> Transcript:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"cannot read transcript {path}: {exc}") from exc
    return transcript_from_dict(data)


def transcript_hash(t: Transcript) -> str:
    """Content hash of a transcript, ignoring its creation timestamp."""
    data = transcript_to_dict(t)
    data.pop("created_at")
    return hashlib.sha256(json.dumps(data, sort_keys=True, ensure_ascii=False).encode("utf-8")).hexdigest()
