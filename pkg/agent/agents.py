# agent/agents.py
"""
The agent roles: one function per role that assembles the prompt, asks the
backend through an LLMSession and validates the reply.

Role functions are pure given (context, replies); diagnostics about model
non-compliance (dropped proposals, clamped scores, truncated plans) are logged and
appended to an optional caller-owned list.
"""
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, List, Mapping, Optional, Tuple, Type, Union

from pydantic import BaseModel

from agent.config import RESEARCH_OFFLINE
from agent.llm_gateway import ChatMessage, LLMSession, pydantic_parser
from agent.prompts import AgentRole, PromptContext, assemble_prompt
from agent.schemas import (
    MetaReviewOutput,
    ProposalSet,
    RankingOutput,
    ReflectionOutput,
    RequirementsDoc,
    ResearchPlan,
    ResearchTask,
    ScoreEntry,
    SupervisorVerdict,
    TwoAgentVerdict,
    WorkerReport,
    contains_finalized,
)
from agent.tools import TOOLS
from design.dsg import DesignState, design_state_from_data, mutate_subtree
from utils.arxiv_client import ArxivEntry
from utils.errors import (
    DialogueAborted,
    InvalidSelection,
    OutputValidationError,
    SchemaExhausted,
    SchemaViolation,
    SelectionOutOfRange,
    ToolUnavailable,
)
from utils.json_extract import find_json_candidates, first_json_object

logger = logging.getLogger(__name__)

MAX_PROPOSALS = 3
MAX_RESEARCH_TASKS = 3
SCORE_MIN, SCORE_MAX = 0.0, 10.0


def _note(diagnostics: Optional[List[str]], message: str) -> None:
    logger.warning(message)
    if diagnostics is not None:
        diagnostics.append(message)


class ResearchRequest(BaseModel):
    """An agent's question for the Orchestrator."""
    requesting_role: str
    question: str


# --- Extractor ---

DialogueDriver = Callable[[Optional[str]], Optional[str]]


def extract_requirements(driver: DialogueDriver, session: LLMSession, max_rounds: Optional[int] = None) -> RequirementsDoc:
    """
    Requirements dialogue: alternate user turns and Extractor replies until FINALIZED.

    Args:
        driver: returns the next user turn given the last Extractor reply (None on the
            first call); returning None ends the dialogue
        session: LLM session for the run
        max_rounds: optional cap on Extractor replies

    Returns:
        The finalized RequirementsDoc

    Raises:
        DialogueAborted: the driver ended input, or max_rounds was reached, before finalization
        SchemaExhausted: the Extractor produced no valid document
    """
    dialogue: List[ChatMessage] = []
    last_reply: Optional[str] = None
    rounds = 0
    parser = pydantic_parser(RequirementsDoc)
    while max_rounds is None or rounds < max_rounds:
        user_turn = driver(last_reply)
        if user_turn is None:
            raise DialogueAborted(f"dialogue ended after {rounds} round(s) without FINALIZED")
        dialogue.append(ChatMessage.user(user_turn))

        reply = session.ask(AgentRole.EXTRACTOR.value, assemble_prompt(AgentRole.EXTRACTOR, PromptContext(dialogue=dialogue)), parser)
        rounds += 1
        text = reply.result.text
        dialogue.append(ChatMessage.assistant(text))
        doc: RequirementsDoc = reply.value

        if contains_finalized(text) and not doc.open_questions:
            logger.info(f"Requirements finalized after {rounds} round(s)")
            return doc.model_copy(update={"finalized": True})
        if contains_finalized(text):
            logger.info(f"FINALIZED emitted with {len(doc.open_questions)} open question(s); continuing")
        last_reply = text
    raise DialogueAborted(f"no FINALIZED requirements after {rounds} round(s)")


# --- Supervisor ---

def supervise(context: PromptContext, session: LLMSession) -> SupervisorVerdict:
    reply = session.ask(
        AgentRole.SUPERVISOR.value,
        assemble_prompt(AgentRole.SUPERVISOR, context),
        pydantic_parser(SupervisorVerdict),
        output_schema="SupervisorVerdict",
    )
    return reply.value


# --- Generator ---

def _flatten_candidates(text: str) -> List[Any]:
    flat: List[Any] = []
    for candidate in find_json_candidates(text):
        if isinstance(candidate, list):
            flat.extend(candidate)
        elif isinstance(candidate, dict) and isinstance(candidate.get("proposals"), list):
            flat.extend(candidate["proposals"])
        else:
            flat.append(candidate)
    return flat


def _proposal_parser(role: AgentRole, allow_research: bool) -> Callable[[str], Union[Tuple[List[DesignState], List[str], List[str]], ResearchRequest]]:
    def parse(text: str):
        states: List[DesignState] = []
        labels: List[str] = []
        dropped: List[str] = []
        research: Optional[str] = None
        for candidate in _flatten_candidates(text):
            if not isinstance(candidate, dict):
                continue
            if "nodes" in candidate:
                try:
                    states.append(design_state_from_data(candidate))
                    labels.append(str(candidate.get("label") or candidate.get("trade_off") or f"Design {chr(65 + len(labels))}"))
                except SchemaViolation as e:
                    dropped.append(str(e).splitlines()[0])
            elif isinstance(candidate.get("research_request"), str) and candidate["research_request"].strip():
                research = candidate["research_request"].strip()
        if states:
            return states, labels, dropped
        if research is not None and allow_research:
            return ResearchRequest(requesting_role=role.value, question=research)
        if research is not None:
            raise OutputValidationError("research has already been provided for this iteration; produce the DesignState proposals")
        raise OutputValidationError(f"no parseable DesignState proposal found ({len(dropped)} malformed candidate(s))")
    return parse


def generate_proposals(
    context: PromptContext,
    session: LLMSession,
    role: AgentRole = AgentRole.GENERATOR,
    allow_research: bool = False,
    diagnostics: Optional[List[str]] = None,
) -> Union[ProposalSet, ResearchRequest]:
    """
    Ask the Generator for DSG proposals and parse every embedded DesignState.

    Malformed candidates are dropped with a diagnostic; more than three valid
    candidates keep the first three.

    Raises:
        SchemaExhausted: no attempt yielded a parseable proposal
    """
    reply = session.ask(role.value, assemble_prompt(role, context), _proposal_parser(role, allow_research), output_schema="ProposalSet")
    if isinstance(reply.value, ResearchRequest):
        logger.info(f"{role.value} requested research: {reply.value.question}")
        return reply.value

    states, labels, dropped = reply.value
    notes = [f"{role.value}: dropped malformed proposal: {reason}" for reason in dropped]
    for message in notes:
        _note(diagnostics, message)
    if len(states) > MAX_PROPOSALS:
        message = f"{role.value}: {len(states)} proposals returned, keeping the first {MAX_PROPOSALS}"
        _note(diagnostics, message)
        notes.append(message)
        states, labels = states[:MAX_PROPOSALS], labels[:MAX_PROPOSALS]
    elif len(states) != MAX_PROPOSALS:
        message = f"{role.value}: expected {MAX_PROPOSALS} proposals, got {len(states)}"
        _note(diagnostics, message)
        notes.append(message)
    return ProposalSet(proposals=states, labels=labels, diagnostics=notes)


# --- Coder ---

_PY_FENCE = re.compile(r"```[ \t]*(?:python|py)[ \t]*\n(.*?)```", re.DOTALL | re.IGNORECASE)
_FILE_NAME = re.compile(r"([\w./-]+\.py)\b")


def extract_code(text: str) -> str:
    """
    The script inside the reply's python fences.

    Several fenced blocks are flattened into one script, each preceded by a
    `# --- file: <name> ---` separator.
    """
    blocks = []
    for i, match in enumerate(_PY_FENCE.finditer(text)):
        body = match.group(1).rstrip()
        if not body.strip():
            continue
        preceding = text[:match.start()].rstrip().splitlines()
        named = _FILE_NAME.search(preceding[-1]) if preceding else None
        blocks.append((named.group(1) if named else f"block_{i}.py", body))
    if not blocks:
        raise OutputValidationError("no non-empty ```python code block found in the reply")
    if len(blocks) == 1:
        return blocks[0][1] + "\n"
    return "\n\n".join(f"# --- file: {name} ---\n{body}" for name, body in blocks) + "\n"


def refine_code(state: DesignState, session: LLMSession, diagnostics: Optional[List[str]] = None) -> DesignState:
    """
    Rewrite every physics-model script, node by node in sorted node_id order.

    Only PhysicsModel.code changes. A model whose rewrite exhausts its retries keeps
    its original code and a diagnostic is recorded.
    """
    for node_id in sorted(state.nodes):
        for index in range(len(state.nodes[node_id].physics_models)):
            node = state.nodes[node_id]
            model = node.physics_models[index]
            context = PromptContext(
                node_name=node.name,
                model_name=f"{node.name} physics model {index}",
                equation=model.equation,
                assumptions=list(model.assumptions),
                starting_code=model.code or None,
            )
            try:
                reply = session.ask(AgentRole.CODER.value, assemble_prompt(AgentRole.CODER, context), extract_code)
            except SchemaExhausted as e:
                _note(diagnostics, f"coder: kept original code for node {node_id} model {index}: {e}")
                continue
            models = list(node.physics_models)
            models[index] = model.model_copy(update={"code": reply.value})
            state = mutate_subtree(state, node_id, {"physics_models": models})
    return state


# --- Reflector ---

def _check_indices(kind: str, indices: List[int], count: int) -> None:
    if sorted(indices) != list(range(count)):
        raise OutputValidationError(
            f"expected exactly one {kind} for each proposal index 0..{count - 1}, got indices {indices}"
        )


def reflect(context: PromptContext, session: LLMSession) -> ReflectionOutput:
    """One critique per proposal; research_requested flags are parsed, not acted on."""
    count = len(context.proposals)

    def check(output: ReflectionOutput) -> None:
        _check_indices("critique", [c.proposal_index for c in output.critiques], count)

    reply = session.ask(
        AgentRole.REFLECTOR.value,
        assemble_prompt(AgentRole.REFLECTOR, context),
        pydantic_parser(ReflectionOutput, check),
        output_schema="ReflectionOutput",
    )
    output: ReflectionOutput = reply.value
    return output.model_copy(update={"critiques": sorted(output.critiques, key=lambda c: c.proposal_index)})


# --- Ranker ---

def rank(context: PromptContext, session: LLMSession, diagnostics: Optional[List[str]] = None) -> RankingOutput:
    """Score every proposal; scores outside [0, 10] are clamped with a diagnostic."""
    count = len(context.proposals)

    def check(output: RankingOutput) -> None:
        _check_indices("score", [s.proposal_index for s in output.scores], count)

    reply = session.ask(
        AgentRole.RANKER.value,
        assemble_prompt(AgentRole.RANKER, context),
        pydantic_parser(RankingOutput, check),
        output_schema="RankingOutput",
    )
    output: RankingOutput = reply.value
    scores: List[ScoreEntry] = []
    for entry in sorted(output.scores, key=lambda s: s.proposal_index):
        clamped = min(max(entry.score, SCORE_MIN), SCORE_MAX)
        if clamped != entry.score:
            _note(diagnostics, f"ranker: score {entry.score:g} for proposal {entry.proposal_index} clamped to {clamped:g}")
            entry = entry.model_copy(update={"score": clamped})
        scores.append(entry)
    return output.model_copy(update={"scores": scores})


# --- Meta-Reviewer ---

def _selection_check(count: int, data: Any, selected_key: str, entries_key: str) -> None:
    if not isinstance(data, dict):
        return
    entries = data.get(entries_key)
    indices = [e.get("proposal_index") for e in entries if isinstance(e, dict)] if isinstance(entries, list) else []
    out_of_range = [i for i in [data.get(selected_key), *indices] if isinstance(i, int) and i >= count]
    if out_of_range:
        raise SelectionOutOfRange(f"proposal index {out_of_range[0]} is out of range for {count} proposal(s)")


def _range_checked(model_cls: Type[BaseModel], count: int, selected_key: str, entries_key: str,
                   check: Optional[Callable[[Any], None]] = None) -> Callable[[str], Any]:
    """Parser that range-checks indices on the raw reply before the model's consistency rules."""
    validate = pydantic_parser(model_cls, check)

    def parse(text: str) -> Any:
        _selection_check(count, first_json_object(text), selected_key, entries_key)
        return validate(text)
    return parse


def meta_review(context: PromptContext, session: LLMSession) -> MetaReviewOutput:
    """
    Select exactly one proposal.

    Raises:
        InvalidSelection: the selected index stayed out of range through every retry
        SchemaExhausted: any other persistent schema violation
    """
    count = len(context.proposals)
    try:
        reply = session.ask(
            AgentRole.META_REVIEWER.value,
            assemble_prompt(AgentRole.META_REVIEWER, context),
            _range_checked(MetaReviewOutput, count, "selected_proposal_index", "decisions"),
            output_schema="MetaReviewOutput",
        )
    except SchemaExhausted as e:
        if isinstance(e.last_error, SelectionOutOfRange):
            raise InvalidSelection(str(e.last_error)) from e
        raise
    return reply.value


# --- 2AS Reflector ---

def reflect_and_decide(context: PromptContext, session: LLMSession) -> TwoAgentVerdict:
    """The 2AS Reflector: critiques, one selection and the terminate decision in one verdict."""
    count = len(context.proposals)

    def check(verdict: TwoAgentVerdict) -> None:
        _check_indices("critique", [c.proposal_index for c in verdict.critiques], count)

    try:
        reply = session.ask(
            AgentRole.REFLECTOR_2AS.value,
            assemble_prompt(AgentRole.REFLECTOR_2AS, context),
            _range_checked(TwoAgentVerdict, count, "selected_index", "statuses", check),
            output_schema="TwoAgentVerdict",
        )
    except SchemaExhausted as e:
        if isinstance(e.last_error, SelectionOutOfRange):
            raise InvalidSelection(str(e.last_error)) from e
        raise
    return reply.value


# --- Orchestrator ---

def orchestrate_research(
    request: str,
    session: LLMSession,
    requesting_role: Optional[str] = None,
    diagnostics: Optional[List[str]] = None,
) -> ResearchPlan:
    """Break a research request into at most three Worker tasks."""
    context = PromptContext(research_request=request, requesting_role=requesting_role)
    reply = session.ask(
        AgentRole.ORCHESTRATOR.value,
        assemble_prompt(AgentRole.ORCHESTRATOR, context),
        pydantic_parser(ResearchPlan),
        output_schema="ResearchPlan",
    )
    plan: ResearchPlan = reply.value
    if len(plan.tasks) > MAX_RESEARCH_TASKS:
        _note(diagnostics, f"orchestrator: {len(plan.tasks)} tasks planned, keeping the first {MAX_RESEARCH_TASKS}")
        plan = plan.model_copy(update={"tasks": plan.tasks[:MAX_RESEARCH_TASKS]})
    return plan


# --- Worker ---

_SEARCH_HINT = re.compile(r"\b(search|arxiv|literature|paper|papers|publication|standard|standards|survey|review)\b", re.IGNORECASE)
_CALC_HINT = re.compile(r"\b(calculat\w*|comput\w*|estimat\w*|deriv\w*|size|sizing|snippet)\b", re.IGNORECASE)


def is_calculation_task(task: ResearchTask) -> bool:
    """Light calculations are answered by the backend without tools."""
    text = f"{task.topic} {task.description}"
    return bool(_CALC_HINT.search(text)) and not _SEARCH_HINT.search(text)


def _run_tools(task: ResearchTask, tools: Mapping[str, Any], offline: bool) -> Tuple[List[ArxivEntry], List[str]]:
    entries: List[ArxivEntry] = []
    limitations: List[str] = []
    if offline:
        return entries, ["Research tools are disabled (offline mode)."]
    query = task.topic
    for name, research_tool in tools.items():
        try:
            result = research_tool.invoke({"query": query})
        except ToolUnavailable as e:
            logger.warning(f"Tool {name} unavailable for task {task.topic!r}: {e}")
            limitations.append(f"{name}: {e}")
            continue
        if isinstance(result, str):
            limitations.append(f"{name}: {result}")
        else:
            entries.extend(ArxivEntry.model_validate(item) for item in result)
    return entries, limitations


def execute_worker_task(
    task: ResearchTask,
    session: LLMSession,
    tools: Optional[Mapping[str, Any]] = None,
    offline: bool = RESEARCH_OFFLINE,
) -> WorkerReport:
    """
    Carry out one research task.

    Search tasks call the enabled tools and embed the returned title / abstract /
    link entries in the findings. When no tool returns anything the report states
    the limitation instead of raising.
    """
    tools = TOOLS if tools is None else tools
    calculation = is_calculation_task(task)
    entries: List[ArxivEntry] = []
    limitations: List[str] = []
    if not calculation:
        entries, limitations = _run_tools(task, tools, offline)
        if not entries:
            logger.info(f"No research results for task {task.topic!r}")
            return WorkerReport(
                findings=f"Insufficient information for '{task.topic}': " + " ".join(limitations or ["no results found."]),
                design_insight="The DSG cannot be refined from external sources for this task; "
                               "rely on first-principles estimates and re-run the search when tools are available.",
                insufficient=True,
            )

    tool_results = "\n\n".join(f"[{i + 1}] {e.as_citation()}" for i, e in enumerate(entries)) or None
    context = PromptContext(task_topic=task.topic, task_description=task.description, tool_results=tool_results)
    reply = session.ask(
        AgentRole.WORKER.value,
        assemble_prompt(AgentRole.WORKER, context),
        pydantic_parser(WorkerReport),
        output_schema="WorkerReport",
    )
    report: WorkerReport = reply.value
    if entries:
        sources = "\n".join(f"[{i + 1}] {e.title} - {e.link}\n    {e.abstract}" for i, e in enumerate(entries))
        report = report.model_copy(update={"findings": f"{report.findings}\n\nSources:\n{sources}"})
    return report


def run_research_plan(
    plan: ResearchPlan,
    session: LLMSession,
    tools: Optional[Mapping[str, Any]] = None,
    offline: bool = RESEARCH_OFFLINE,
    parallelism: int = 1,
) -> List[WorkerReport]:
    """Execute every task of a plan, up to three at a time; reports keep task order."""
    if not plan.tasks:
        return []
    workers = max(1, min(parallelism, MAX_RESEARCH_TASKS, len(plan.tasks)))
    if workers == 1:
        return [execute_worker_task(task, session, tools, offline) for task in plan.tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda task: execute_worker_task(task, session, tools, offline), plan.tasks))
