# agent/workflow.py
"""
The MAS and 2AS state machines.

A transition executes the current stage's agent call(s) and enters the successor
stage; the snapshot it writes is labelled with the stage entered. The first
transition is always the requirements stage (bypassed when the CDC is already
FINALIZED), so a run whose supervisor stops on its second visit has the trace
[supervisor, generation, coder, reflection, ranking, meta_review, supervisor, done].

Runs are driven by a LangGraph StateGraph with one node per stage; every fault is
caught and recorded, never raised out of run_to_completion.
"""
import logging
import time
import uuid
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, TypedDict, Union

from langgraph.checkpoint.memory import MemorySaver
from langgraph.errors import GraphRecursionError
from langgraph.graph import END, START, StateGraph
from pydantic import BaseModel, ConfigDict, Field

from agent.agents import (
    DialogueDriver,
    ResearchRequest,
    extract_requirements,
    generate_proposals,
    meta_review,
    orchestrate_research,
    rank,
    reflect,
    reflect_and_decide,
    refine_code,
    run_research_plan,
    supervise,
)
from agent.checkpoint_store import CheckpointStore
from agent.config import MAX_COMPLETION_TOKENS, RECURSION_LIMIT, RESEARCH_OFFLINE
from agent.llm_gateway import AgentExchange, BackendConfig, LLMSession
from agent.prompts import AgentRole, PromptContext
from agent.schemas import (
    Critique,
    MetaReviewOutput,
    ProposalSet,
    RankingOutput,
    RequirementsDoc,
    ResearchPlan,
    SupervisorVerdict,
    TwoAgentVerdict,
    contains_finalized,
)
from design.dsg import DesignState, design_state_document
from utils.errors import (
    ContextOverflow,
    DialogueAborted,
    DsgForgeError,
    InvalidSelection,
    SchemaExhausted,
    ScriptMiss,
    StorageError,
    TransportError,
)

logger = logging.getLogger(__name__)


class WorkflowKind(str, Enum):
    MAS = "mas"
    TWO_AS = "two_as"


class Stage(str, Enum):
    REQUIREMENTS = "requirements"
    SUPERVISOR = "supervisor"
    GENERATION = "generation"
    CODER = "coder"
    REFLECTION = "reflection"
    RANKING = "ranking"
    META_REVIEW = "meta_review"
    ORCHESTRATOR = "orchestrator"
    WORKER = "worker"
    DONE = "done"
    FAILED = "failed"


TERMINAL_STAGES = (Stage.DONE, Stage.FAILED)


class FailureReason(str, Enum):
    NONE = "none"
    RECURSION_LIMIT = "recursion_limit"
    CONTEXT_OVERFLOW = "context_overflow"
    SCHEMA_EXHAUSTED = "schema_exhausted"
    TRANSPORT = "transport"


# legal successors, excluding research detours and the terminal stages
MAS_SUCCESSORS: Dict[Stage, Stage] = {
    Stage.REQUIREMENTS: Stage.SUPERVISOR,
    Stage.SUPERVISOR: Stage.GENERATION,
    Stage.GENERATION: Stage.CODER,
    Stage.CODER: Stage.REFLECTION,
    Stage.REFLECTION: Stage.RANKING,
    Stage.RANKING: Stage.META_REVIEW,
    Stage.META_REVIEW: Stage.SUPERVISOR,
}

TWO_AS_SUCCESSORS: Dict[Stage, Stage] = {
    Stage.REQUIREMENTS: Stage.GENERATION,
    Stage.GENERATION: Stage.REFLECTION,
    Stage.REFLECTION: Stage.GENERATION,
}

# stages whose agent may ask the Orchestrator for research, per workflow kind
RESEARCH_ROLES: Dict[WorkflowKind, Dict[Stage, AgentRole]] = {
    WorkflowKind.MAS: {
        Stage.GENERATION: AgentRole.GENERATOR,
        Stage.REFLECTION: AgentRole.REFLECTOR,
        Stage.RANKING: AgentRole.RANKER,
    },
    WorkflowKind.TWO_AS: {
        Stage.GENERATION: AgentRole.GENERATOR_2AS,
        Stage.REFLECTION: AgentRole.REFLECTOR_2AS,
    },
}

EXTRACTOR_MAX_ROUNDS = 5
EXTRACTOR_FOLLOW_UP = (
    "Resolve every remaining open question with reasonable engineering assumptions, "
    "list them under assumptions, set \"open_questions\": [] and write FINALIZED."
)


class RunConfig(BaseModel):
    """Everything that identifies one run."""
    model_config = ConfigDict(protected_namespaces=())

    run_id: str = Field(default_factory=lambda: uuid.uuid4().hex)
    kind: WorkflowKind
    model_id: str
    temperature: float = Field(default=0.0, ge=0.0, le=2.0)
    seed: int = Field(default=0, ge=0)
    cdc_path: Optional[Path] = None
    cdc_text: Optional[str] = None
    max_completion_tokens: int = Field(default=MAX_COMPLETION_TOKENS, gt=0, le=MAX_COMPLETION_TOKENS)
    recursion_limit: int = Field(default=RECURSION_LIMIT, gt=0)
    research_offline: bool = RESEARCH_OFFLINE
    worker_parallelism: int = Field(default=1, ge=1, le=3)

    def load_cdc(self) -> str:
        if self.cdc_text is not None:
            return self.cdc_text
        if self.cdc_path is None:
            raise ValueError("run config needs cdc_path or cdc_text")
        return Path(self.cdc_path).read_text(encoding="utf-8")


class Snapshot(BaseModel):
    timestamp: float
    stage: str
    transition_count: int
    design_state: Optional[DesignState] = None


class RunState(BaseModel):
    run_id: str
    kind: WorkflowKind
    current_stage: Stage = Stage.REQUIREMENTS
    transition_count: int = 0
    iteration_index: int = 0
    recursion_limit: int = RECURSION_LIMIT
    failure_reason: FailureReason = FailureReason.NONE
    completed: bool = False

    # context bundle
    cdc: str
    requirements: Optional[RequirementsDoc] = None
    current_design: Optional[DesignState] = None
    proposals: Optional[ProposalSet] = None
    critiques: List[Critique] = Field(default_factory=list)
    ranking: Optional[RankingOutput] = None
    meta_review: Optional[MetaReviewOutput] = None
    supervisor_instructions: Optional[str] = None
    previous_instructions: Optional[str] = None
    meta_review_notes: Optional[str] = None
    reflection_feedback: Optional[str] = None
    last_verdict: Optional[Union[SupervisorVerdict, TwoAgentVerdict]] = None

    # research detours
    research_findings: List[str] = Field(default_factory=list)
    pending_research: Optional[ResearchRequest] = None
    research_plan: Optional[ResearchPlan] = None
    resume_stage: Optional[Stage] = None
    detoured_roles: List[str] = Field(default_factory=list)
    research_detours: int = 0
    worker_tasks: int = 0

    snapshots: List[Snapshot] = Field(default_factory=list)
    diagnostics: List[str] = Field(default_factory=list)

    @property
    def stage_trace(self) -> List[str]:
        return [s.stage for s in self.snapshots]


class RunRecord(BaseModel):
    config: Dict[str, Any]
    completed: bool
    failure_reason: FailureReason
    snapshots: List[Snapshot]
    final_state: Optional[DesignState] = None
    agent_io_log: List[AgentExchange] = Field(default_factory=list)
    research_detours: int = 0
    worker_tasks: int = 0
    transition_count: int = 0
    diagnostics: List[str] = Field(default_factory=list)

    @property
    def stage_trace(self) -> List[str]:
        return [s.stage for s in self.snapshots]

    def summary_document(self) -> Dict[str, Any]:
        """run_record.json content: everything but the I/O log, DSGs referenced by snapshot file."""
        return {
            "config": self.config,
            "completed": self.completed,
            "failure_reason": self.failure_reason.value,
            "transition_count": self.transition_count,
            "stage_trace": self.stage_trace,
            "snapshots": [
                {
                    "timestamp": s.timestamp,
                    "stage": s.stage,
                    "transition_count": s.transition_count,
                    "has_design_state": s.design_state is not None,
                }
                for s in self.snapshots
            ],
            "final_state": design_state_document(self.final_state) if self.final_state else None,
            "research_detours": self.research_detours,
            "worker_tasks": self.worker_tasks,
            "diagnostics": self.diagnostics,
        }


class StepRuntime:
    """Per-run collaborators that are not part of the state: session, store, tools."""

    def __init__(
        self,
        session: LLMSession,
        store: Optional[CheckpointStore] = None,
        tools: Optional[Mapping[str, Any]] = None,
        offline: bool = RESEARCH_OFFLINE,
        worker_parallelism: int = 1,
        dialogue_driver: Optional[DialogueDriver] = None,
    ):
        self.session = session
        self.store = store
        self.tools = tools
        self.offline = offline
        self.worker_parallelism = worker_parallelism
        self.dialogue_driver = dialogue_driver


def initial_state(config: RunConfig, cdc: str) -> RunState:
    return RunState(
        run_id=config.run_id,
        kind=config.kind,
        cdc=cdc,
        recursion_limit=config.recursion_limit,
    )


def successor(kind: WorkflowKind, stage: Stage) -> Stage:
    table = MAS_SUCCESSORS if kind is WorkflowKind.MAS else TWO_AS_SUCCESSORS
    return table[stage]


def detect_termination(run: RunState, latest_output: Any) -> bool:
    """MAS: the supervisor's stop flag; 2AS: the reflector's terminate flag; anything else: False."""
    if run.kind is WorkflowKind.MAS:
        return isinstance(latest_output, SupervisorVerdict) and latest_output.stop
    return isinstance(latest_output, TwoAgentVerdict) and latest_output.terminate


def _snapshot_design(run: RunState) -> Optional[DesignState]:
    if run.current_design is not None:
        return run.current_design
    if run.proposals is not None:
        return run.proposals.proposals[0]
    return None


def write_checkpoint(run: RunState, store: Optional[CheckpointStore]) -> Snapshot:
    """
    Append a snapshot of the run's current stage and DSG, persisting it when a store is given.

    Raises:
        StorageError: the store could not be written
    """
    now = round(time.time(), 3)
    if run.snapshots:
        now = max(now, run.snapshots[-1].timestamp)
    snapshot = Snapshot(
        timestamp=now,
        stage=run.current_stage.value,
        transition_count=run.transition_count,
        design_state=_snapshot_design(run),
    )
    run.snapshots.append(snapshot)
    if store is not None:
        meta = {"timestamp": snapshot.timestamp, "stage": snapshot.stage, "transition_count": snapshot.transition_count}
        store.write_snapshot(len(run.snapshots), meta, snapshot.design_state)
    return snapshot


def _context(run: RunState) -> PromptContext:
    return PromptContext(
        cdc=run.cdc,
        requirements=run.requirements,
        current_design=run.current_design,
        supervisor_instructions=run.supervisor_instructions,
        previous_instructions=run.previous_instructions,
        meta_review_notes=run.meta_review_notes,
        reflection_feedback=run.reflection_feedback,
        proposals=list(run.proposals.proposals) if run.proposals else [],
        critiques=run.critiques,
        ranking=run.ranking,
        iteration_index=run.iteration_index,
        transition_count=run.transition_count,
        research_findings=run.research_findings,
    )


def _batch_driver(cdc: str) -> DialogueDriver:
    def drive(last_reply: Optional[str]) -> Optional[str]:
        return cdc if last_reply is None else EXTRACTOR_FOLLOW_UP
    return drive


def _research_allowed(run: RunState, role: AgentRole) -> bool:
    return role.value not in run.detoured_roles


def _start_detour(run: RunState, stage: Stage, role: AgentRole, question: str) -> Stage:
    logger.info(f"[{run.run_id}] {role.value} requested research; detouring to orchestrator")
    run.pending_research = ResearchRequest(requesting_role=role.value, question=question)
    run.resume_stage = stage
    run.detoured_roles.append(role.value)
    run.research_detours += 1
    return Stage.ORCHESTRATOR


def _next_iteration(run: RunState) -> None:
    run.iteration_index += 1
    run.detoured_roles = []
    run.research_findings = []


def _critique_request(critiques: List[Critique], explicit: str) -> str:
    if explicit.strip():
        return explicit.strip()
    flagged = [f"Proposal {c.proposal_index}: {c.text}" for c in critiques if c.research_requested]
    return "Research is needed to resolve these critiques:\n" + "\n".join(flagged)


def _two_agent_feedback(verdict: TwoAgentVerdict) -> str:
    lines = [f"Selected proposal {verdict.selected_index}. {verdict.reason}".strip()]
    lines.extend(f"Proposal {s.proposal_index}: {s.status.value} - {s.reason}".rstrip(" -") for s in verdict.statuses)
    lines.extend(f"Critique of proposal {c.proposal_index}: {c.text}" for c in verdict.critiques)
    return "\n".join(lines)


def _execute_stage(run: RunState, runtime: StepRuntime) -> Stage:
    """Run the current stage's agent call(s), update the context bundle and return the stage to enter."""
    stage = run.current_stage
    session = runtime.session
    research_role = RESEARCH_ROLES[run.kind].get(stage)

    if stage is Stage.REQUIREMENTS:
        if contains_finalized(run.cdc):
            logger.info(f"[{run.run_id}] CDC already FINALIZED; bypassing the extractor")
            run.requirements = RequirementsDoc.from_cdc(run.cdc)
        else:
            driver = runtime.dialogue_driver or _batch_driver(run.cdc)
            run.requirements = extract_requirements(driver, session, max_rounds=EXTRACTOR_MAX_ROUNDS)
        return successor(run.kind, stage)

    if stage is Stage.SUPERVISOR:
        verdict = supervise(_context(run), session)
        run.previous_instructions = run.supervisor_instructions
        run.supervisor_instructions = verdict.instructions or run.supervisor_instructions
        run.last_verdict = verdict
        if detect_termination(run, verdict):
            if run.current_design is not None:
                return Stage.DONE
            logger.info(f"[{run.run_id}] supervisor stop ignored: no design has been selected yet")
        return successor(run.kind, stage)

    if stage is Stage.GENERATION:
        role = AgentRole.GENERATOR if run.kind is WorkflowKind.MAS else AgentRole.GENERATOR_2AS
        result = generate_proposals(_context(run), session, role, _research_allowed(run, role), run.diagnostics)
        if isinstance(result, ResearchRequest):
            return _start_detour(run, stage, role, result.question)
        run.proposals = result
        run.critiques = []
        run.ranking = None
        return successor(run.kind, stage)

    if stage is Stage.CODER:
        refined = [refine_code(state, session, run.diagnostics) for state in run.proposals.proposals]
        run.proposals = run.proposals.model_copy(update={"proposals": refined})
        return successor(run.kind, stage)

    if stage is Stage.REFLECTION and run.kind is WorkflowKind.MAS:
        output = reflect(_context(run), session)
        if output.research_requested and _research_allowed(run, research_role):
            return _start_detour(run, stage, research_role, _critique_request(output.critiques, output.research_request))
        run.critiques = output.critiques
        return successor(run.kind, stage)

    if stage is Stage.REFLECTION:
        verdict = reflect_and_decide(_context(run), session)
        if not verdict.terminate and verdict.research_requested and _research_allowed(run, research_role):
            return _start_detour(run, stage, research_role, _critique_request(verdict.critiques, verdict.research_request))
        run.last_verdict = verdict
        run.critiques = verdict.critiques
        run.current_design = run.proposals.proposals[verdict.selected_index]
        run.reflection_feedback = _two_agent_feedback(verdict)
        if detect_termination(run, verdict):
            return Stage.DONE
        _next_iteration(run)
        return successor(run.kind, stage)

    if stage is Stage.RANKING:
        output = rank(_context(run), session, run.diagnostics)
        if output.research_requested and _research_allowed(run, research_role):
            return _start_detour(run, stage, research_role, output.research_request)
        run.ranking = output
        return successor(run.kind, stage)

    if stage is Stage.META_REVIEW:
        review = meta_review(_context(run), session)
        run.meta_review = review
        run.current_design = run.proposals.proposals[review.selected_proposal_index]
        run.meta_review_notes = review.detailed_summary_for_graph
        _next_iteration(run)
        return successor(run.kind, stage)

    if stage is Stage.ORCHESTRATOR:
        request = run.pending_research
        plan = orchestrate_research(request.question, session, request.requesting_role, run.diagnostics)
        run.pending_research = None
        if plan.tasks:
            run.research_plan = plan
            return Stage.WORKER
        run.research_findings.append(f"Orchestrator: {plan.response}".rstrip())
        return run.resume_stage

    if stage is Stage.WORKER:
        plan = run.research_plan
        reports = run_research_plan(plan, session, runtime.tools, runtime.offline, runtime.worker_parallelism)
        run.worker_tasks += len(plan.tasks)
        run.research_findings.extend(r.as_message(t.topic) for t, r in zip(plan.tasks, reports))
        run.research_plan = None
        return run.resume_stage

    raise ValueError(f"no handler for stage {stage.value}")


def _failure_reason(error: Exception) -> FailureReason:
    if isinstance(error, ContextOverflow):
        return FailureReason.CONTEXT_OVERFLOW
    if isinstance(error, (SchemaExhausted, InvalidSelection, DialogueAborted)):
        return FailureReason.SCHEMA_EXHAUSTED
    return FailureReason.TRANSPORT


def step(run: RunState, runtime: StepRuntime) -> RunState:
    """
    Execute one stage and enter its successor: one transition, one snapshot.

    Never raises for faults inside a stage; they move the run to `failed` with the
    matching failure_reason (anything outside the error taxonomy counts as transport).
    """
    if run.current_stage in TERMINAL_STAGES:
        raise ValueError(f"run {run.run_id} is already {run.current_stage.value}")
    run = run.model_copy(deep=True)
    executed = run.current_stage

    try:
        next_stage = _execute_stage(run, runtime)
    except (ContextOverflow, SchemaExhausted, InvalidSelection, DialogueAborted, TransportError, ScriptMiss) as e:
        logger.error(f"[{run.run_id}] {executed.value} failed: {str(e)}")
        next_stage = Stage.FAILED
        run.failure_reason = _failure_reason(e)
    except DsgForgeError as e:
        logger.error(f"[{run.run_id}] {executed.value} failed unexpectedly: {str(e)}")
        next_stage = Stage.FAILED
        run.failure_reason = FailureReason.TRANSPORT
    except Exception as e:
        logger.exception(f"[{run.run_id}] {executed.value} crashed: {str(e)}")
        next_stage = Stage.FAILED
        run.failure_reason = FailureReason.TRANSPORT
        run.diagnostics.append(f"{executed.value}: {type(e).__name__}: {e}")

    run.transition_count += 1
    if next_stage is not Stage.DONE and next_stage is not Stage.FAILED and run.transition_count >= run.recursion_limit:
        logger.warning(f"[{run.run_id}] recursion limit {run.recursion_limit} reached without termination")
        next_stage = Stage.FAILED
        run.failure_reason = FailureReason.RECURSION_LIMIT
    run.current_stage = next_stage
    run.completed = next_stage is Stage.DONE
    logger.info(f"[{run.run_id}] transition {run.transition_count}: {executed.value} -> {next_stage.value}")

    try:
        write_checkpoint(run, runtime.store)
    except StorageError as e:
        logger.error(f"[{run.run_id}] checkpoint failed: {str(e)}")
        run.current_stage = Stage.FAILED
        run.completed = False
        run.failure_reason = FailureReason.TRANSPORT
    return run


class GraphState(TypedDict):
    run: RunState


def build_graph(runtime: StepRuntime, kind: WorkflowKind):
    """One LangGraph node per executable stage; routing follows run.current_stage."""
    stages = [s for s in Stage if s not in TERMINAL_STAGES]
    if kind is WorkflowKind.TWO_AS:
        stages = [s for s in stages if s not in (Stage.SUPERVISOR, Stage.CODER, Stage.RANKING, Stage.META_REVIEW)]

    def route(state: GraphState) -> str:
        stage = state["run"].current_stage
        return END if stage in TERMINAL_STAGES else stage.value

    def node(state: GraphState) -> GraphState:
        return {"run": step(state["run"], runtime)}

    path_map = {s.value: s.value for s in stages}
    path_map[END] = END
    graph = StateGraph(GraphState)
    for stage in stages:
        graph.add_node(stage.value, node)
        graph.add_conditional_edges(stage.value, route, path_map)
    graph.add_conditional_edges(START, route, path_map)
    return graph.compile(checkpointer=MemorySaver())


def _finish(run: RunState, config: RunConfig, session: LLMSession) -> RunRecord:
    return RunRecord(
        config=config.model_dump(mode="json"),
        completed=run.completed,
        failure_reason=FailureReason.NONE if run.completed else run.failure_reason,
        snapshots=run.snapshots,
        final_state=run.current_design,
        agent_io_log=list(session.io_log),
        research_detours=run.research_detours,
        worker_tasks=run.worker_tasks,
        transition_count=run.transition_count,
        diagnostics=run.diagnostics,
    )


def run_to_completion(
    config: RunConfig,
    backend: BackendConfig,
    store: Optional[CheckpointStore] = None,
    tools: Optional[Mapping[str, Any]] = None,
    dialogue_driver: Optional[DialogueDriver] = None,
) -> RunRecord:
    """
    Drive one run until done or failed and return its record.

    Args:
        config: run identity and protocol settings
        backend: chat backend configuration (a fresh backend instance is opened per run)
        store: optional checkpoint store; the record and I/O log are written there at the end
        tools: research tools for the Worker (defaults to agent.tools.TOOLS)
        dialogue_driver: user turns for the extractor when the CDC is not FINALIZED

    Returns:
        The RunRecord; faults are recorded in it, never raised
    """
    session = LLMSession.open(backend, config.model_id, config.temperature, config.seed, config.max_completion_tokens)
    runtime = StepRuntime(session, store, tools, config.research_offline, config.worker_parallelism, dialogue_driver)
    run = initial_state(config, config.load_cdc())
    logger.info(f"[{run.run_id}] starting {config.kind.value} run: model={config.model_id} T={config.temperature} seed={config.seed}")

    graph = build_graph(runtime, config.kind)
    graph_config = {
        "configurable": {"thread_id": run.run_id},
        "recursion_limit": config.recursion_limit + 5,
    }
    try:
        for values in graph.stream({"run": run}, graph_config, stream_mode="values"):
            run = values["run"]
    except GraphRecursionError as e:
        logger.error(f"[{run.run_id}] graph recursion backstop hit: {str(e)}")
        run = run.model_copy(update={"current_stage": Stage.FAILED, "completed": False,
                                     "failure_reason": FailureReason.RECURSION_LIMIT})

    record = _finish(run, config, session)
    logger.info(
        f"[{run.run_id}] finished: completed={record.completed} failure={record.failure_reason.value} "
        f"transitions={record.transition_count}"
    )
    if store is not None:
        try:
            store.write_record(record.summary_document())
            store.write_io_log(record.agent_io_log)
        except StorageError as e:
            logger.error(f"[{run.run_id}] could not persist run record: {str(e)}")
            if record.completed:
                record = record.model_copy(update={"completed": False, "failure_reason": FailureReason.TRANSPORT})
    return record
