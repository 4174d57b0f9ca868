"""Compliance report compiled by the Documentation & Reporting Agent."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import AgentRole, Decision, DecisionValue, default_roles, role_by_id
from .backend import GenerationRequest
from .discussion import Transcript, transcript_hash
from .errors import EmptyTranscript, SchemaError, TranscriptMetricsMismatch

SCHEMA_VERSION = 1
DEFAULT_RELEVANCE_THRESHOLD = 0.5
DEFAULT_PROMPT_BUDGET = 6000


class Verdict(str, enum.Enum):
    PRELIMINARY_APPROVAL = "PreliminaryApproval"
    GAPS_IDENTIFIED = "GapsIdentified"


@dataclass(frozen=True)
class SectionSpec:
    key: str
    title: str
    question: str


SECTIONS = (
    SectionSpec("regulatory_status", "Regulatory Status",
                "Does the site meet national and state requirements?"),
    SectionSpec("environmental_safety", "Environmental & Safety Assessment",
                "Are there geological risks or transport safety concerns?"),
    SectionSpec("mitigation_emergency", "Mitigation & Emergency Plans",
                "How does the site address long-term safety?"),
)


@dataclass
class ReportSection:
    title: str
    narrative: str
    cited_chunk_ids: list[str]


@dataclass
class ComplianceReport:
    task: str
    regulatory_status: ReportSection
    environmental_safety: ReportSection
    mitigation_emergency: ReportSection
    verdict: Verdict
    verdict_rationale: str
    final_round_decisions: list[tuple[str, Decision]]
    metric_summary: dict
    transcript_hash: str = ""
    decision_log: list[dict] = field(default_factory=list)

    @property
    def sections(self) -> list[ReportSection]:
        return [self.regulatory_status, self.environmental_safety, self.mitigation_emergency]


def verdict_rule(final_round_decisions, mean_final_round_relevance: float,
                 relevance_threshold: float = DEFAULT_RELEVANCE_THRESHOLD) -> Verdict:
    decisions = [d for _, d in final_round_decisions] if _is_pairs(final_round_decisions) else list(final_round_decisions)
    if not decisions:
        raise ValueError("verdict needs at least one decision")
    if all(d.is_clean_agree for d in decisions) and mean_final_round_relevance >= relevance_threshold:
        return Verdict.PRELIMINARY_APPROVAL
    return Verdict.GAPS_IDENTIFIED


def _is_pairs(items) -> bool:
    items = list(items)
    return bool(items) and isinstance(items[0], tuple)


def _rationale(decisions, relevance: float, threshold: float) -> str:
    reasons = []
    not_agree = [rid for rid, d in decisions if d.value is not DecisionValue.AGREE]
    warned = [rid for rid, d in decisions if d.parse_warning]
    if not_agree:
        reasons.append(f"final-round disagreement from {', '.join(not_agree)}")
    if warned:
        reasons.append(f"unparsable decision from {', '.join(warned)}")
    if relevance < threshold:
        reasons.append(f"relevance shortfall: mean final-round relevance {relevance:.3f} is below {threshold:.2f}")
    if not reasons:
        return (f"All final-round decisions are AGREE and mean final-round relevance "
                f"{relevance:.3f} meets the {threshold:.2f} threshold.")
    return "Gaps remain: " + "; ".join(reasons) + "."


def _turn_digest(turn) -> str:
    cites = ", ".join(h.chunk_id for h in turn.hits) or "none"
    return f"Round {turn.round_index} ({turn.phase.value}), {turn.role_id} asked: {turn.query}\nSources: {cites}\n{turn.response.strip()}"


def _bounded(digests: list[str], budget: int) -> str:
    """Join digests, dropping the oldest until the text fits the budget."""
    kept: list[str] = []
    used = 0
    for d in reversed(digests):
        cost = len(d) + 2
        if kept and used + cost > budget:
            break
        kept.append(d[-budget:] if not kept and len(d) > budget else d)
        used += cost
    return "\n\n".join(reversed(kept))


def _section_turns(transcript: Transcript, key: str):
    turns = transcript.turns()
    if key == "regulatory_status":
        return [t for t in turns if t.role_id == "RCA"]
    if key == "environmental_safety":
        return [t for t in turns if t.role_id == "SEA"]
    # latest phase reached (Choice for any run of 3+ rounds)
    last_phase = turns[-1].phase
    return [t for t in turns if t.phase is last_phase]


def _metric_summary(transcript: Transcript, metrics: dict) -> dict:
    m = metrics["metrics"]
    final_turns = transcript.rounds[-1][1]
    final_scores = [s for t in final_turns for s in t.relevance_scores]
    return {
        "overall_agreement_rate": m["agreement"]["overall_rate"],
        "final_round_drift": m["drift"]["per_round"][-1],
        "mean_final_round_relevance": float(np.mean(final_scores)) if final_scores else 0.0,
        "completed_rounds": transcript.completed_rounds,
        "parse_warnings": m["agreement"].get("parse_warnings", 0),
    }


def compile_report(transcript: Transcript, metrics, backend, roles: list[AgentRole] | None = None,
                   relevance_threshold: float = DEFAULT_RELEVANCE_THRESHOLD,
                   prompt_budget: int = DEFAULT_PROMPT_BUDGET) -> ComplianceReport:
    if not transcript.rounds:
        raise EmptyTranscript("cannot report on a transcript with no completed rounds")
    metrics = metrics if isinstance(metrics, dict) else metrics.to_dict()
    t_hash = transcript_hash(transcript)
    if metrics.get("transcript_hash") != t_hash:
        raise TranscriptMetricsMismatch("metrics were computed from a different transcript")
    dra = role_by_id(roles if roles is not None else default_roles(), "DRA")

    sections = {}
    for spec in SECTIONS:
        turns = _section_turns(transcript, spec.key)
        evidence = _bounded([_turn_digest(t) for t in turns], prompt_budget) or "(no turns)"
        prompt = (
            f"Task: {transcript.config.task}\n\n"
            f"Report section: {spec.title}\nQuestion: {spec.question}\n\n"
            f"Findings from the discussion:\n{evidence}\n\n"
            "Write a concise narrative for this section. Cite chunk ids in square brackets; "
            "cite only chunk ids listed in the findings."
        )
        narrative = backend.generate(
            GenerationRequest(dra.system_prompt, prompt, role_id="DRA", purpose="report")
        ).text.strip()
        cited = sorted({h.chunk_id for t in turns for h in t.hits})
        sections[spec.key] = ReportSection(spec.title, narrative, cited)

    final = [(t.role_id, t.decision) for t in transcript.rounds[-1][1]]
    summary = _metric_summary(transcript, metrics)
    relevance = summary["mean_final_round_relevance"]
    return ComplianceReport(
        task=transcript.config.task,
        verdict=verdict_rule(final, relevance, relevance_threshold),
        verdict_rationale=_rationale(final, relevance, relevance_threshold),
        final_round_decisions=final,
        metric_summary={**summary, "relevance_threshold": relevance_threshold},
        transcript_hash=t_hash,
        decision_log=[
            {"round": t.round_index, "phase": t.phase.value, "role_id": t.role_id,
             "decision": t.decision.value.value, "parse_warning": t.decision.parse_warning}
            for t in transcript.turns()
        ],
        **sections,
    )


def check_consistency(report: ComplianceReport) -> bool:
    """True when the stored verdict matches a recomputation from the report's own inputs."""
    expected = verdict_rule(
        report.final_round_decisions,
        report.metric_summary["mean_final_round_relevance"],
        report.metric_summary.get("relevance_threshold", DEFAULT_RELEVANCE_THRESHOLD),
    )
    return expected is report.verdict


_BANNERS = {
    Verdict.PRELIMINARY_APPROVAL: "VERDICT: PRELIMINARY APPROVAL",
    Verdict.GAPS_IDENTIFIED: "VERDICT: GAPS IDENTIFIED",
}


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def render_markdown(report: ComplianceReport) -> str:
    lines = [
        "# Compliance Report",
        "",
        f"**Task:** {report.task}",
        "",
        f"**{_BANNERS[report.verdict]}**",
        "",
        report.verdict_rationale,
        "",
    ]
    for section in report.sections:
        lines += [f"## {section.title}", "", section.narrative, "", "Sources:"]
        lines += [f"- {cid}" for cid in section.cited_chunk_ids] or ["- (none)"]
        lines.append("")
    lines += ["### Metric Summary", "", "| Metric | Value |", "| --- | --- |"]
    lines += [f"| {k} | {_fmt(v)} |" for k, v in report.metric_summary.items()]
    lines += ["", "### Decision Log", "", "| Round | Phase | Agent | Decision | Parse warning |",
              "| --- | --- | --- | --- | --- |"]
    lines += [
        f"| {e['round']} | {e['phase']} | {e['role_id']} | {e['decision']} | {'yes' if e['parse_warning'] else 'no'} |"
        for e in report.decision_log
    ]
    return "\n".join(lines) + "\n"


def report_to_dict(report: ComplianceReport) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "task": report.task,
        "transcript_hash": report.transcript_hash,
        **{
            spec.key: {"title": s.title, "narrative": s.narrative, "cited_chunk_ids": s.cited_chunk_ids}
            for spec, s in zip(SECTIONS, report.sections)
        },
        "verdict": report.verdict.value,
        "verdict_rationale": report.verdict_rationale,
        "final_round_decisions": [
            {"role_id": rid, "value": d.value.value, "parse_warning": d.parse_warning}
            for rid, d in report.final_round_decisions
        ],
        "metric_summary": report.metric_summary,
        "decision_log": report.decision_log,
    }


def report_from_dict(data: dict) -> ComplianceReport:
    if not isinstance(data, dict) or data.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError("report: unsupported or missing schema_version")
    try:
        sections = {
            spec.key: ReportSection(data[spec.key]["title"], data[spec.key]["narrative"],
                                    list(data[spec.key]["cited_chunk_ids"]))
            for spec in SECTIONS
        }
        return ComplianceReport(
            task=data["task"],
            verdict=Verdict(data["verdict"]),
            verdict_rationale=data["verdict_rationale"],
            final_round_decisions=[
                (d["role_id"], Decision(DecisionValue(d["value"]), bool(d["parse_warning"])))
                for d in data["final_round_decisions"]
            ],
            metric_summary=data["metric_summary"],
            transcript_hash=data.get("transcript_hash", ""),
            decision_log=data.get("decision_log", []),
            **sections,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"report: malformed content: {exc}") from exc


def save_report(report: ComplianceReport, md_path, json_path) -> None:
    Path(md_path).write_text(render_markdown(report), encoding="utf-8")
    Path(json_path).write_text(json.dumps(report_to_dict(report), indent=2, ensure_ascii=False) + "\n",
                               encoding="utf-8")
