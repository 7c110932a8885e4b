# agent/prompts.py
"""
Bundled system prompts and per-role message assembly.

Each role's system prompt is a read-only text asset under prompt_templates/ and is
sent verbatim as message 0. The role's inputs follow as user messages, one per
context section, in the order listed in ROLE_SECTIONS. The reply-format note for
roles whose prompt has no machine-readable schema is appended to the last user
message.
"""
import json
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from agent.llm_gateway import ChatMessage
from agent.schemas import Critique, RankingOutput, RequirementsDoc
from design.dsg import DesignState, design_state_document, summarize_design_state
from utils.errors import MissingContext

TEMPLATE_DIR = Path(__file__).resolve().parent / "prompt_templates"


class AgentRole(str, Enum):
    EXTRACTOR = "extractor"
    SUPERVISOR = "supervisor"
    GENERATOR = "generator"
    CODER = "coder"
    REFLECTOR = "reflector"
    RANKER = "ranker"
    META_REVIEWER = "meta_reviewer"
    ORCHESTRATOR = "orchestrator"
    WORKER = "worker"
    GENERATOR_2AS = "generator_2as"
    REFLECTOR_2AS = "reflector_2as"


@lru_cache(maxsize=None)
def system_prompt(role: AgentRole) -> str:
    """The role's bundled system prompt, byte for byte."""
    return (TEMPLATE_DIR / f"{AgentRole(role).value}.txt").read_text(encoding="utf-8")


class PromptContext(BaseModel):
    """Everything an agent may be shown; each role reads the subset it declares."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    cdc: Optional[str] = None
    requirements: Optional[RequirementsDoc] = None
    dialogue: List[ChatMessage] = Field(default_factory=list)
    current_design: Optional[DesignState] = None
    supervisor_instructions: Optional[str] = None
    previous_instructions: Optional[str] = None
    meta_review_notes: Optional[str] = None
    reflection_feedback: Optional[str] = None
    proposals: List[DesignState] = Field(default_factory=list)
    critiques: List[Critique] = Field(default_factory=list)
    ranking: Optional[RankingOutput] = None
    iteration_index: Optional[int] = None
    transition_count: Optional[int] = None
    research_findings: List[str] = Field(default_factory=list)
    research_request: Optional[str] = None
    requesting_role: Optional[str] = None
    task_topic: Optional[str] = None
    task_description: Optional[str] = None
    tool_results: Optional[str] = None
    node_name: Optional[str] = None
    model_name: Optional[str] = None
    equation: Optional[str] = None
    assumptions: List[str] = Field(default_factory=list)
    starting_code: Optional[str] = None


Section = Tuple[str, Callable[[PromptContext], Optional[str]]]


def _proposal_summaries(ctx: PromptContext) -> Optional[str]:
    if not ctx.proposals:
        return None
    return "\n\n".join(
        f"Proposal index {i}:\n{summarize_design_state(state)}" for i, state in enumerate(ctx.proposals)
    )


def _proposal_reviews(ctx: PromptContext) -> Optional[str]:
    if not ctx.proposals:
        return None
    blocks = []
    for i, state in enumerate(ctx.proposals):
        critique = next((c.text for c in ctx.critiques if c.proposal_index == i), "(no critique)")
        entry = ctx.ranking.score_for(i) if ctx.ranking else None
        score = f"{entry.score:g}/10 - {entry.justification}" if entry else "(not ranked)"
        blocks.append(
            f"Proposal index {i}:\n"
            f"DSG:\n{json.dumps(design_state_document(state), indent=2, ensure_ascii=False)}\n"
            f"Reflection feedback: {critique}\n"
            f"Ranking: {score}"
        )
    return "\n\n".join(blocks)


def _critiques(ctx: PromptContext) -> Optional[str]:
    if not ctx.critiques:
        return None
    return "\n".join(f"Proposal index {c.proposal_index}: {c.text}" for c in ctx.critiques)


def _iteration(ctx: PromptContext) -> Optional[str]:
    if ctx.iteration_index is None:
        return None
    return f"Iteration {ctx.iteration_index}, step {ctx.transition_count or 0}"


def _current_design(ctx: PromptContext) -> Optional[str]:
    if ctx.current_design is None:
        return None
    return json.dumps(design_state_document(ctx.current_design), indent=2, ensure_ascii=False)


def _findings(ctx: PromptContext) -> Optional[str]:
    return "\n\n".join(ctx.research_findings) or None


def _coder_model(ctx: PromptContext) -> Optional[str]:
    if ctx.node_name is None or ctx.model_name is None:
        return None
    return f"Node: {ctx.node_name}\nModel: {ctx.model_name}"


def _coder_equations(ctx: PromptContext) -> Optional[str]:
    lines = [f"Governing equation: {ctx.equation or '(none given)'}"]
    if ctx.assumptions:
        lines.append("Assumptions:")
        lines.extend(f"- {a}" for a in ctx.assumptions)
    return "\n".join(lines)


def _task(ctx: PromptContext) -> Optional[str]:
    if not ctx.task_topic:
        return None
    return f"Task: {ctx.task_topic}\n{ctx.task_description or ''}".rstrip()


def _request(ctx: PromptContext) -> Optional[str]:
    if not ctx.research_request:
        return None
    who = f"From the {ctx.requesting_role} agent:\n" if ctx.requesting_role else ""
    return f"{who}{ctx.research_request}"


def _field(name: str) -> Callable[[PromptContext], Optional[str]]:
    return lambda ctx: getattr(ctx, name) or None


# (section title, renderer) in message order; a None render skips the section
ROLE_SECTIONS: Dict[AgentRole, List[Section]] = {
    AgentRole.SUPERVISOR: [
        ("Latest Design-State Graph summary", lambda c: summarize_design_state(c.current_design) if c.current_design else None),
        ("Cahier des Charges (CDC)", _field("cdc")),
        ("Meta-Review notes", _field("meta_review_notes")),
        ("Your previous instructions", _field("previous_instructions")),
    ],
    AgentRole.GENERATOR: [
        ("Cahier des Charges (CDC)", _field("cdc")),
        ("Supervisor instructions", _field("supervisor_instructions")),
        ("Current selected Design-State Graph", _current_design),
        ("Meta-Review notes", _field("meta_review_notes")),
        ("Iteration tracking", _iteration),
        ("Research findings", _findings),
    ],
    AgentRole.CODER: [
        ("Node and model", _coder_model),
        ("Equations and assumptions", _coder_equations),
        ("Starting code", _field("starting_code")),
    ],
    AgentRole.REFLECTOR: [
        ("Current supervisor instructions", _field("supervisor_instructions")),
        ("Cahier des Charges (CDC)", _field("cdc")),
        ("Design-State Graph proposals", _proposal_summaries),
        ("Research findings", _findings),
    ],
    AgentRole.RANKER: [
        ("Current supervisor instructions", _field("supervisor_instructions")),
        ("Cahier des Charges (CDC)", _field("cdc")),
        ("Design-State Graph proposals", _proposal_summaries),
        ("Reflection feedback", _critiques),
        ("Research findings", _findings),
    ],
    AgentRole.META_REVIEWER: [
        ("Design-State Graph proposals", _proposal_reviews),
        ("Supervisor instructions", _field("supervisor_instructions")),
        ("Cahier des Charges (CDC)", _field("cdc")),
        ("Iteration tracking", _iteration),
    ],
    AgentRole.ORCHESTRATOR: [
        ("Request", _request),
    ],
    AgentRole.WORKER: [
        ("Task", _task),
        ("Tool results", _field("tool_results")),
    ],
    AgentRole.GENERATOR_2AS: [
        ("Cahier des Charges (CDC)", _field("cdc")),
        ("Current selected Design-State Graph", _current_design),
        ("Reflection agent feedback", _field("reflection_feedback")),
        ("Iteration tracking", _iteration),
        ("Research findings", _findings),
    ],
    AgentRole.REFLECTOR_2AS: [
        ("Current supervisor instructions", _field("supervisor_instructions")),
        ("Cahier des Charges (CDC)", _field("cdc")),
        ("Design-State Graph proposals", _proposal_summaries),
        ("Research findings", _findings),
    ],
}

REQUIRED_INPUTS: Dict[AgentRole, Tuple[str, ...]] = {
    AgentRole.EXTRACTOR: ("dialogue",),
    AgentRole.SUPERVISOR: ("cdc",),
    AgentRole.GENERATOR: ("cdc", "supervisor_instructions"),
    AgentRole.CODER: ("node_name", "model_name"),
    AgentRole.REFLECTOR: ("supervisor_instructions", "cdc", "proposals"),
    AgentRole.RANKER: ("supervisor_instructions", "cdc", "proposals", "critiques"),
    AgentRole.META_REVIEWER: ("proposals", "critiques", "ranking", "supervisor_instructions", "cdc"),
    AgentRole.ORCHESTRATOR: ("research_request",),
    AgentRole.WORKER: ("task_topic",),
    AgentRole.GENERATOR_2AS: ("cdc",),
    AgentRole.REFLECTOR_2AS: ("cdc", "proposals"),
}

_DSG_FORMAT = (
    "Print each DesignState as a JSON object with a \"nodes\" map (DesignNode objects keyed by their "
    "UUID node_id, each with name, description, embodiment, physics_models and linked_reqs) and an "
    "\"edges\" list of [source_node_id, target_node_id] pairs. If you need external research before "
    "proposing, reply instead with {\"research_request\": \"<your question>\"}."
)

_RESEARCH_NOTE = (
    "Set \"research_request\" to a question for the Orchestrator if you need external research, "
    "otherwise leave it empty."
)

REPLY_FORMATS: Dict[AgentRole, str] = {
    AgentRole.SUPERVISOR: (
        "Reply with a JSON object {\"instructions\": \"<your directions>\", \"stop\": <true|false>}."
    ),
    AgentRole.GENERATOR: _DSG_FORMAT,
    AgentRole.GENERATOR_2AS: _DSG_FORMAT,
    AgentRole.REFLECTOR: (
        "Reply with a JSON object {\"critiques\": [{\"proposal_index\": <int>, \"text\": \"...\", "
        "\"research_requested\": <true|false>}], \"research_request\": \"\"}, one critique per proposal. "
        + _RESEARCH_NOTE
    ),
    AgentRole.RANKER: (
        "Reply with a JSON object {\"scores\": [{\"proposal_index\": <int>, \"score\": <0-10>, "
        "\"justification\": \"...\"}], \"research_request\": \"\"}, one score per proposal. " + _RESEARCH_NOTE
    ),
    AgentRole.META_REVIEWER: (
        "Reply with a JSON object {\"selected_proposal_index\": <int>, \"detailed_summary_for_graph\": \"...\", "
        "\"decisions\": [{\"proposal_index\": <int>, \"final_status\": \"selected|rejected|needs_iteration\", "
        "\"reason\": \"...\"}]}."
    ),
    AgentRole.ORCHESTRATOR: (
        "Reply with a JSON object {\"tasks\": [{\"topic\": \"...\", \"description\": \"...\"}], \"response\": \"\"}."
    ),
    AgentRole.WORKER: (
        "Reply with a JSON object {\"findings\": \"...\", \"design_insight\": \"...\", \"insufficient\": <true|false>}."
    ),
    AgentRole.REFLECTOR_2AS: (
        "Reply with a JSON object {\"critiques\": [{\"proposal_index\": <int>, \"text\": \"...\"}], "
        "\"selected_index\": <int>, \"statuses\": [{\"proposal_index\": <int>, \"status\": \"selected|rejected\", "
        "\"reason\": \"...\"}], \"terminate\": <true|false>, \"reason\": \"...\", \"research_request\": \"\"}."
    ),
}


def _is_missing(ctx: PromptContext, name: str) -> bool:
    value = getattr(ctx, name)
    if value is None:
        return True
    if isinstance(value, (str, list)) and not value:
        return True
    return False


def assemble_prompt(role: AgentRole, context: PromptContext) -> List[ChatMessage]:
    """
    Build the ordered message list for one agent call.

    Args:
        role: the agent role
        context: the workflow context bundle

    Returns:
        [system prompt, user sections...]; the extractor's dialogue turns follow its system prompt as-is

    Raises:
        MissingContext: an input the role declares is absent
    """
    role = AgentRole(role)
    missing = [name for name in REQUIRED_INPUTS[role] if _is_missing(context, name)]
    if missing:
        raise MissingContext(f"{role.value} prompt is missing required input(s): {', '.join(missing)}")

    messages = [ChatMessage.system(system_prompt(role))]
    if role is AgentRole.EXTRACTOR:
        messages.extend(context.dialogue)
        return messages

    for title, render in ROLE_SECTIONS[role]:
        body = render(context)
        if body is not None:
            messages.append(ChatMessage.user(f"## {title}\n{body}"))

    reply_format = REPLY_FORMATS.get(role)
    if reply_format:
        last = messages[-1]
        messages[-1] = ChatMessage.user(f"{last.content}\n\n{reply_format}")
    return messages
