"""Evaluation metrics computed from a transcript.

Relevance histograms, per-round agreement, the agent-to-section mapping
graph, the question/response similarity matrix with its per-round drift
series, and optional precision/recall/F1 against labeled chunk ids.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import Decision, DecisionValue
from .discussion import Transcript, transcript_hash
from .errors import EmptyDecisionList, EmptyInputList, EmptyRelevantSet, EmptyTranscript, SchemaError
from .index import cosine_similarity

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
N_BINS = 10
BIN_EDGES = tuple(i / N_BINS for i in range(N_BINS + 1))


@dataclass
class RelevanceHistogram:
    bin_edges: tuple[float, ...] = BIN_EDGES
    counts_per_role: dict[str, list[int]] = field(default_factory=dict)
    clamp_warnings: int = 0
    scores_per_role: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "bin_edges": list(self.bin_edges),
            "counts_per_role": self.counts_per_role,
            "clamp_warnings": self.clamp_warnings,
            "scores_per_role": self.scores_per_role,
            "median_per_role": {r: float(np.median(s)) for r, s in self.scores_per_role.items() if s},
        }


@dataclass
class AgreementSeries:
    per_round: list[tuple[int, int, int, float]]
    overall_rate: float
    parse_warnings: int = 0

    @property
    def rates(self) -> list[float]:
        return [r[3] for r in self.per_round]

    def to_dict(self) -> dict:
        return {
            "per_round": [
                {"round": r, "agree_count": a, "total_count": n, "rate": rate} for r, a, n, rate in self.per_round
            ],
            "overall_rate": self.overall_rate,
            "parse_warnings": self.parse_warnings,
        }


@dataclass
class MappingGraph:
    nodes: set[tuple[str, str]] = field(default_factory=set)
    edges: dict[tuple[str, str], int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "nodes": [{"kind": k, "id": i} for k, i in sorted(self.nodes)],
            "edges": [{"agent": a, "section": s, "weight": w} for (a, s), w in sorted(self.edges.items())],
        }


@dataclass
class DriftReport:
    matrix: np.ndarray
    per_round_drift: list[float]
    questions: list[str]
    responses: list[str]
    rounds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        m, n = self.matrix.shape
        return {
            "shape": [m, n],
            "matrix": self.matrix.ravel().tolist(),
            "rounds": self.rounds,
            "per_round": self.per_round_drift,
            "questions": self.questions,
            "responses": self.responses,
        }


@dataclass
class MetricsBundle:
    transcript_hash: str
    relevance: RelevanceHistogram
    response_grounding: RelevanceHistogram
    agreement: AgreementSeries
    mapping: MappingGraph
    drift: DriftReport
    prf: dict | None = None

    def to_dict(self) -> dict:
        metrics = {
            "relevance": {
                "retrieval": self.relevance.to_dict(),
                "response_grounding": self.response_grounding.to_dict(),
            },
            "agreement": self.agreement.to_dict(),
            "mapping": self.mapping.to_dict(),
            "drift": self.drift.to_dict(),
        }
        if self.prf is not None:
            metrics["prf"] = self.prf
        return {"schema_version": SCHEMA_VERSION, "transcript_hash": self.transcript_hash, "metrics": metrics}

    def series_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round", "agreement_rate", "drift"])
        for (rnd, _, _, rate), drift in zip(self.agreement.per_round, self.drift.per_round_drift):
            writer.writerow([rnd, repr(rate), repr(drift)])
        return buf.getvalue()


def _require_turns(transcript: Transcript) -> None:
    if not transcript.turns():
        raise EmptyTranscript("transcript has no completed turns")


def histogram(scores_per_role: dict[str, list[float]]) -> RelevanceHistogram:
    """Bin scores into [i/10, (i+1)/10), last bin closed; out-of-range scores are clamped and counted."""
    hist = RelevanceHistogram()
    for role, scores in scores_per_role.items():
        counts = [0] * N_BINS
        for s in scores:
            if s < 0.0 or s > 1.0:
                hist.clamp_warnings += 1
                s = min(1.0, max(0.0, s))
            counts[min(bisect.bisect_right(BIN_EDGES, s) - 1, N_BINS - 1)] += 1
        hist.counts_per_role[role] = counts
        hist.scores_per_role[role] = list(scores)
    return hist


def relevance_distribution(transcript: Transcript) -> RelevanceHistogram:
    """Histogram of retrieval (query to chunk) scores per role."""
    _require_turns(transcript)
    per_role: dict[str, list[float]] = {}
    for turn in transcript.turns():
        per_role.setdefault(turn.role_id, []).extend(turn.relevance_scores)
    return histogram(per_role)


def response_grounding_scores(transcript: Transcript, backend) -> dict[str, list[float]]:
    """Cosine similarity between each response and every chunk retrieved for it."""
    per_role: dict[str, list[float]] = {}
    for turn in transcript.turns():
        scores = per_role.setdefault(turn.role_id, [])
        if not turn.hits:
            continue
        resp = backend.embed_text(turn.response)
        chunk_vecs = backend.embed_batch([transcript.references[h.chunk_id].text for h in turn.hits])
        scores.extend(cosine_similarity(resp, v) for v in chunk_vecs)
    return per_role


def response_grounding_distribution(transcript: Transcript, backend) -> RelevanceHistogram:
    _require_turns(transcript)
    return histogram(response_grounding_scores(transcript, backend))


def agreement_rate(decisions) -> float:
    decisions = list(decisions)
    if not decisions:
        raise EmptyDecisionList("agreement rate needs at least one decision")
    agree = sum(1 for d in decisions if d.value is DecisionValue.AGREE)
    return agree / len(decisions)


def agreement_series(transcript: Transcript) -> AgreementSeries:
    _require_turns(transcript)
    per_round = []
    agree_total = n_total = 0
    warnings = 0
    for rnd, turns in transcript.rounds:
        decisions: list[Decision] = [t.decision for t in turns]
        agree = sum(1 for d in decisions if d.value is DecisionValue.AGREE)
        per_round.append((rnd, agree, len(decisions), agreement_rate(decisions)))
        agree_total += agree
        n_total += len(decisions)
        warnings += sum(d.parse_warning for d in decisions)
    return AgreementSeries(per_round, agree_total / n_total, warnings)


def conversation_document_map(transcript: Transcript) -> MappingGraph:
    graph = MappingGraph()
    for turn in transcript.turns():
        for hit in turn.hits:
            ref = transcript.references[hit.chunk_id]
            section = f"{ref.doc_id}/{ref.section_label}"
            graph.nodes.add(("AgentNode", turn.role_id))
            graph.nodes.add(("SectionNode", section))
            key = (turn.role_id, section)
            graph.edges[key] = graph.edges.get(key, 0) + 1
    return graph


def semantic_similarity_matrix(questions, responses, backend) -> np.ndarray:
    questions, responses = list(questions), list(responses)
    if not questions or not responses:
        raise EmptyInputList("question and response lists must be non-empty")
    q_vecs = backend.embed_batch(questions)
    r_vecs = backend.embed_batch(responses)
    return np.array([[cosine_similarity(q, r) for r in r_vecs] for q in q_vecs], dtype=np.float64)


def semantic_drift_series(transcript: Transcript, backend) -> DriftReport:
    """Drift of a round = 1 - mean similarity between each query and its own response."""
    _require_turns(transcript)
    turns = transcript.turns()
    questions = [t.query for t in turns]
    responses = [t.response for t in turns]
    matrix = semantic_similarity_matrix(questions, responses, backend)
    drift, rounds = [], []
    i = 0
    for rnd, round_turns in transcript.rounds:
        diag = [matrix[j, j] for j in range(i, i + len(round_turns))]
        i += len(round_turns)
        rounds.append(rnd)
        drift.append(1.0 - float(np.mean(diag)))
    return DriftReport(matrix, drift, questions, responses, rounds)


def retrieval_prf(retrieved_ids, relevant_ids) -> tuple[float, float, float]:
    retrieved, relevant = set(retrieved_ids), set(relevant_ids)
    if not relevant:
        raise EmptyRelevantSet("relevant set must be non-empty")
    tp = len(retrieved & relevant)
    precision = tp / len(retrieved) if retrieved else 0.0
    recall = tp / len(relevant)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _prf_dict(p: float, r: float, f: float) -> dict:
    return {"precision": p, "recall": r, "f1": f}


def load_labels(path) -> dict:
    """Labels file: ``{"relevant": [ids...], "per_role": {role_id: [ids...]}}``; both keys optional."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read labels {path}: {exc}") from exc
    if not isinstance(data, dict) or not ({"relevant", "per_role"} & set(data)):
        raise SchemaError(f"labels {path}: expected keys 'relevant' and/or 'per_role'")
    return data


def labeled_prf(transcript: Transcript, labels: dict) -> dict:
    """P/R/F1 of retrieved chunk ids against labels, restricted to ids the corpus knows."""
    known = set(transcript.corpus_ref.get("chunk_ids") or transcript.references)

    def clean(ids, where):
        ids = set(ids)
        unknown = ids - known
        if unknown:
            log.warning("labels (%s) reference %d unknown chunk ids, ignored: %s",
                        where, len(unknown), ", ".join(sorted(unknown)[:5]))
        return ids & known

    out: dict = {}
    turns = transcript.turns()
    if labels.get("relevant"):
        relevant = clean(labels["relevant"], "relevant")
        if relevant:
            retrieved = {h.chunk_id for t in turns for h in t.hits}
            out["overall"] = _prf_dict(*retrieval_prf(retrieved, relevant))
            out["per_round"] = [
                {"round": rnd, **_prf_dict(*retrieval_prf({h.chunk_id for t in ts for h in t.hits}, relevant))}
                for rnd, ts in transcript.rounds
            ]
    per_role = {}
    for role, ids in sorted((labels.get("per_role") or {}).items()):
        relevant = clean(ids, role)
        if not relevant:
            continue
        retrieved = {h.chunk_id for t in turns if t.role_id == role for h in t.hits}
        per_role[role] = _prf_dict(*retrieval_prf(retrieved, relevant))
    if per_role:
        out["per_role"] = per_role
    return out


def compute_metrics(transcript: Transcript, backend, labels: dict | None = None) -> MetricsBundle:
    _require_turns(transcript)
    return MetricsBundle(
        transcript_hash=transcript_hash(transcript),
        relevance=relevance_distribution(transcript),
        response_grounding=response_grounding_distribution(transcript, backend),
        agreement=agreement_series(transcript),
        mapping=conversation_document_map(transcript),
        drift=semantic_drift_series(transcript, backend),
        prf=labeled_prf(transcript, labels) if labels is not None else None,
    )


def dumps_metrics(bundle: MetricsBundle) -> str:
    return json.dumps(bundle.to_dict(), indent=2, ensure_ascii=False) + "\n"


def save_metrics(bundle: MetricsBundle, json_path, csv_path=None) -> None:
    Path(json_path).write_text(dumps_metrics(bundle), encoding="utf-8")
    if csv_path is not None:
        Path(csv_path).write_text(bundle.series_csv(), encoding="utf-8")


def load_metrics_dict(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read metrics {path}: {exc}") from exc
    if not isinstance(data, dict) or data.get("schema_version") != SCHEMA_VERSION or "metrics" not in data:
        raise SchemaError(f"metrics {path}: unsupported or missing schema_version")
    return data
