"""Agent role registry, query rewriting, prompt rendering and decision parsing."""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, replace

from .backend import GenerationRequest
from .corpus import Category, DocumentChunk
from .errors import ConfigError, EmptyCompletion, ScopeViolation
from .index import RetrievalHit

log = logging.getLogger(__name__)

MAX_QUERY_CHARS = 512
DEFAULT_SUMMARY_BUDGET = 2000
NO_DOCUMENTS_MARKER = "NO DOCUMENTS RETRIEVED"
DECISION_INSTRUCTION = (
    "End with exactly one line: DECISION: AGREE or DECISION: DISAGREE. "
    "AGREE means that, based on the retrieved documents, the requirement under discussion is satisfied."
)

_DECISION_LINE = re.compile(r"decision\s*:\s*(agree|disagree)", re.IGNORECASE)
_SENTENCE_END = re.compile(r"(?<=[.!?])\s")


class Phase(str, enum.Enum):
    INTELLIGENCE = "Intelligence"
    DESIGN = "Design"
    CHOICE = "Choice"


class DecisionValue(str, enum.Enum):
    AGREE = "Agree"
    DISAGREE = "Disagree"


@dataclass(frozen=True)
class Decision:
    value: DecisionValue
    parse_warning: bool = False

    @property
    def is_clean_agree(self) -> bool:
        return self.value is DecisionValue.AGREE and not self.parse_warning


@dataclass(frozen=True)
class AgentRole:
    role_id: str
    name: str
    function: str
    system_prompt: str
    allowed_categories: frozenset[Category]
    active_in_discussion: bool
    queries_index: bool = True


@dataclass(frozen=True)
class TurnContext:
    task: str
    round_index: int
    phase: Phase
    prior_summary: str = ""
    peer_last_response: str | None = None
    previous_query: str | None = None


ROLE_IDS = ("RCA", "SEA", "KBR", "MSA", "PRC", "TLA", "IRA", "DRA")

_ROSTER = [
    ("RCA", "Regulatory Compliance Agent", "Combines national oversight and international regulations."),
    ("SEA", "Safety & Environmental Agent", "Covers both safety and environmental impact assessments."),
    ("KBR", "Knowledge Base & Research Agent", "Merges R&D and knowledge maintenance."),
    ("MSA", "Monitoring and Surveillance Agent", "Handles real-time monitoring and anomaly detection."),
    ("PRC", "Public Relations & Communication Agent", "Integrates stakeholder communication and public relations."),
    ("TLA", "Transportation & Logistics Agent", "Manages logistics for nuclear waste transportation."),
    ("IRA", "Incident Response Agent", "Handles emergency and incident response."),
    ("DRA", "Documentation & Reporting Agent", "Manages reporting and documentation processes."),
]


def system_prompt_for(name: str, function: str) -> str:
    return (
        f"You are the {name}. Function: {function} "
        "Ground every claim in the provided document excerpts; cite chunk ids in square brackets."
    )


def default_roles() -> list[AgentRole]:
    both = frozenset(Category)
    scopes = {"RCA": frozenset({Category.REGULATORY}), "SEA": frozenset({Category.SAFETY})}
    active = {"RCA", "SEA", "DRA"}
    return [
        AgentRole(
            role_id=rid,
            name=name,
            function=function,
            system_prompt=system_prompt_for(name, function),
            allowed_categories=scopes.get(rid, both),
            active_in_discussion=rid in active,
            queries_index=rid != "DRA",
        )
        for rid, name, function in _ROSTER
    ]


def apply_role_overrides(roles: list[AgentRole], overrides: dict | None) -> list[AgentRole]:
    """Apply ``{role_id: {"system_prompt": ..., "active": ...}}`` overrides.

    The roster itself is fixed: unknown role ids or fields are rejected.
    """
    if not overrides:
        return roles
    by_id = {r.role_id: r for r in roles}
    for rid, fields in overrides.items():
        if rid not in by_id:
            raise ConfigError(f"unknown role id {rid!r}; roster is {', '.join(ROLE_IDS)}")
        unknown = set(fields) - {"system_prompt", "active"}
        if unknown:
            raise ConfigError(f"role {rid}: cannot override {', '.join(sorted(unknown))}")
        changes = {}
        if "system_prompt" in fields:
            changes["system_prompt"] = str(fields["system_prompt"])
        if "active" in fields:
            changes["active_in_discussion"] = bool(fields["active"])
        by_id[rid] = replace(by_id[rid], **changes)
    return [by_id[r.role_id] for r in roles]


def querying_roles(roles: list[AgentRole]) -> list[AgentRole]:
    return [r for r in roles if r.active_in_discussion and r.queries_index]


def role_by_id(roles: list[AgentRole], role_id: str) -> AgentRole:
    for r in roles:
        if r.role_id == role_id:
            return r
    raise KeyError(role_id)


# round-1 templates

def task_subject(task: str) -> str:
    """Noun phrase naming what the task is about.

    >>> task_subject("Validate whether a proposed temporary nuclear waste storage site near Winslow, Arizona, meets basic national regulatory requirements.")
    'temporary nuclear waste storage'
    """
    m = re.search(r"\b(?:a|an|the)\s+(?:proposed\s+)?(.+?)\s+(?:site|facility|project)\b", task, re.IGNORECASE)
    if m:
        return m.group(1).strip()
    subject = task.strip().rstrip(".?!")
    return subject[:1].lower() + subject[1:]


def task_site(task: str) -> str:
    m = re.search(r"\bnear\s+([A-Z][\w'-]*)", task)
    return f"the {m.group(1)} site" if m else "the proposed site"


def opening_query(role: AgentRole, task: str) -> str:
    if role.role_id == "RCA":
        q = f"What regulations govern {task_subject(task)}?"
    elif role.role_id == "SEA":
        q = f"What are the geological and environmental risks for {task_site(task)}?"
    else:
        q = f"What does the {role.name} need to know about {task_subject(task)}?"
    return q[:MAX_QUERY_CHARS]


def rewrite_query(role: AgentRole, ctx: TurnContext, backend) -> str:
    if ctx.round_index == 1:
        return opening_query(role, ctx.task)
    lines = [
        f"Task: {ctx.task}",
        f"Phase: {ctx.phase.value}",
        f"Round: {ctx.round_index}",
        f"Discussion so far:\n{ctx.prior_summary or '(none)'}",
    ]
    if ctx.peer_last_response:
        lines.append(f"Peer's last response:\n{ctx.peer_last_response}")
    if ctx.previous_query:
        lines.append(f"Your previous query: {ctx.previous_query}")
    lines.append(
        "Rewrite your next retrieval query so it is precise, maximizes recall of relevant "
        "documents and addresses the open points above. Reply with the query only."
    )
    request = GenerationRequest(role.system_prompt, "\n\n".join(lines), role_id=role.role_id, purpose="rewrite")
    try:
        text = backend.generate(request).text.strip()
    except EmptyCompletion:
        text = ""
    if not text:
        fallback = ctx.previous_query or opening_query(role, ctx.task)
        log.warning("round %d %s: empty query rewrite, reusing previous query", ctx.round_index, role.role_id)
        return fallback
    return text[:MAX_QUERY_CHARS]


def render_prompt(role: AgentRole, ctx: TurnContext, hits: list[tuple[RetrievalHit, DocumentChunk]]):
    for hit, chunk in hits:
        if chunk.category not in role.allowed_categories:
            raise ScopeViolation(f"{role.role_id} received {chunk.category.value} chunk {hit.chunk_id}")
    parts = [
        f"Task: {ctx.task}",
        f"Phase: {ctx.phase.value}",
        f"Round: {ctx.round_index}",
        f"Discussion so far:\n{ctx.prior_summary or '(none)'}",
    ]
    if ctx.peer_last_response:
        parts.append(f"Peer's last response:\n{ctx.peer_last_response}")
    if hits:
        excerpts = "\n\n".join(f"[{hit.chunk_id}|{chunk.section_label}] {chunk.text}" for hit, chunk in hits)
    else:
        excerpts = NO_DOCUMENTS_MARKER
    parts.append(f"Retrieved documents:\n{excerpts}")
    parts.append(DECISION_INSTRUCTION)
    return GenerationRequest(role.system_prompt, "\n\n".join(parts), role_id=role.role_id, purpose="respond")


def parse_decision(response_text: str) -> Decision:
    for line in reversed(response_text.splitlines()):
        m = _DECISION_LINE.fullmatch(line.strip())
        if m:
            value = DecisionValue.AGREE if m.group(1).lower() == "agree" else DecisionValue.DISAGREE
            return Decision(value, parse_warning=False)
    return Decision(DecisionValue.DISAGREE, parse_warning=True)


def first_sentence(text: str) -> str:
    flat = " ".join(text.split())
    return _SENTENCE_END.split(flat, maxsplit=1)[0] if flat else ""


def summary_line(turn) -> str:
    label = "AGREE" if turn.decision.value is DecisionValue.AGREE else "DISAGREE"
    return f"{turn.round_index}.{turn.role_id}: {first_sentence(turn.response)} [{label}]"


def summarize_history(turns, budget_chars: int = DEFAULT_SUMMARY_BUDGET) -> str:
    """One line per turn, oldest lines dropped until the digest fits the budget."""
    if budget_chars <= 0:
        raise ValueError("budget_chars must be positive")
    lines = [summary_line(t) for t in turns]
    total = sum(len(l) for l in lines) + max(len(lines) - 1, 0)
    start = 0
    while start < len(lines) and total > budget_chars:
        total -= len(lines[start]) + (1 if start < len(lines) - 1 else 0)
        start += 1
    return "\n".join(lines[start:])
