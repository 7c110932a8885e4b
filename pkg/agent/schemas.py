# agent/schemas.py
"""Structured outputs for every agent role, validated client-side with pydantic."""
import re
from enum import Enum
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from design.dsg import DesignState

FINALIZED_TOKEN = "FINALIZED"


class _Output(BaseModel):
    model_config = ConfigDict(extra="ignore")


class RequirementItem(_Output):
    id: Union[int, str]
    description: str
    category: str = ""


class RequirementsDoc(_Output):
    """The Cahier des Charges as structured by the Extractor."""
    project_name: str = ""
    description: str = ""
    objectives: List[str] = Field(default_factory=list)
    functional_requirements: List[RequirementItem] = Field(default_factory=list)
    non_functional_requirements: List[RequirementItem] = Field(default_factory=list)
    constraints: Dict[str, Any] = Field(default_factory=dict)
    assumptions: List[str] = Field(default_factory=list)
    open_questions: List[str] = Field(default_factory=list)
    finalized: bool = False

    @model_validator(mode="after")
    def _finalized_has_no_open_questions(self) -> "RequirementsDoc":
        if self.finalized and self.open_questions:
            raise ValueError("a finalized requirements document cannot have open questions")
        return self

    @classmethod
    def from_cdc(cls, cdc: str) -> "RequirementsDoc":
        """Finalized document wrapping a CDC that was fed directly to the workflow."""
        heading = re.search(r"^#+\s*(.+)$", cdc, re.MULTILINE)
        return cls(
            project_name=heading.group(1).strip() if heading else "",
            description=cdc,
            finalized=True,
        )


def contains_finalized(text: str) -> bool:
    """True when FINALIZED appears as a standalone token (markdown emphasis allowed)."""
    return re.search(rf"(?<![A-Za-z0-9_]){FINALIZED_TOKEN}(?![A-Za-z0-9_])", text) is not None


class ProposalSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    proposals: List[DesignState] = Field(min_length=1, max_length=3)
    labels: List[str] = Field(default_factory=list)
    diagnostics: List[str] = Field(default_factory=list)


class Critique(_Output):
    proposal_index: int = Field(ge=0)
    text: str
    research_requested: bool = False

    @model_validator(mode="before")
    @classmethod
    def _accept_critique_key(cls, data: Any) -> Any:
        if isinstance(data, dict) and "text" not in data and "critique" in data:
            data = {**data, "text": data["critique"]}
        return data


class ReflectionOutput(_Output):
    critiques: List[Critique]
    research_request: str = ""

    @property
    def research_requested(self) -> bool:
        return bool(self.research_request.strip()) or any(c.research_requested for c in self.critiques)


class ScoreEntry(_Output):
    proposal_index: int = Field(ge=0)
    score: float = Field(allow_inf_nan=False)
    justification: str = ""


class RankingOutput(_Output):
    scores: List[ScoreEntry]
    research_request: str = ""

    @property
    def research_requested(self) -> bool:
        return bool(self.research_request.strip())

    def score_for(self, index: int) -> Optional[ScoreEntry]:
        return next((s for s in self.scores if s.proposal_index == index), None)


class DecisionStatus(str, Enum):
    SELECTED = "selected"
    REJECTED = "rejected"
    NEEDS_ITERATION = "needs_iteration"


def _normalize_status(value: Any) -> Any:
    if isinstance(value, str):
        return value.strip().lower().replace(" ", "_").replace("-", "_")
    return value


class MetaDecision(_Output):
    proposal_index: int = Field(ge=0)
    final_status: DecisionStatus
    reason: str = ""

    @field_validator("final_status", mode="before")
    @classmethod
    def _status(cls, value: Any) -> Any:
        return _normalize_status(value)


class MetaReviewOutput(_Output):
    selected_proposal_index: int = Field(ge=0)
    detailed_summary_for_graph: str = ""
    decisions: List[MetaDecision]

    @model_validator(mode="after")
    def _exactly_one_selected(self) -> "MetaReviewOutput":
        selected = [d for d in self.decisions if d.final_status is DecisionStatus.SELECTED]
        if len(selected) != 1:
            raise ValueError(f"exactly one decision must be 'selected', got {len(selected)}")
        if selected[0].proposal_index != self.selected_proposal_index:
            raise ValueError(
                f"selected_proposal_index {self.selected_proposal_index} does not match "
                f"the selected decision (proposal {selected[0].proposal_index})"
            )
        return self


class SupervisorVerdict(_Output):
    instructions: str = ""
    stop: bool = False


class ResearchTask(_Output):
    topic: str
    description: str = ""


class ResearchPlan(_Output):
    tasks: List[ResearchTask] = Field(default_factory=list)
    response: str = ""


class WorkerReport(_Output):
    findings: str = ""
    design_insight: str = ""
    insufficient: bool = False

    @model_validator(mode="after")
    def _content_or_limitation(self) -> "WorkerReport":
        if not (self.findings.strip() and self.design_insight.strip()) and not self.states_insufficiency:
            raise ValueError("a worker report needs findings and a design insight, or a stated limitation")
        return self

    @property
    def states_insufficiency(self) -> bool:
        text = f"{self.findings} {self.design_insight}".lower()
        return self.insufficient or "insufficient" in text

    def as_message(self, topic: str) -> str:
        return f"Research on '{topic}':\nFindings: {self.findings}\nDesign insight: {self.design_insight}"


class StatusEntry(_Output):
    proposal_index: int = Field(ge=0)
    status: DecisionStatus
    reason: str = ""

    @field_validator("status", mode="before")
    @classmethod
    def _status(cls, value: Any) -> Any:
        return _normalize_status(value)


class TwoAgentVerdict(_Output):
    """The 2AS Reflector's combined critique, selection and termination decision."""
    critiques: List[Critique]
    selected_index: int = Field(ge=0)
    statuses: List[StatusEntry]
    terminate: bool = False
    reason: str = ""
    research_request: str = ""

    @model_validator(mode="after")
    def _exactly_one_selected(self) -> "TwoAgentVerdict":
        selected = [s for s in self.statuses if s.status is DecisionStatus.SELECTED]
        if len(selected) != 1:
            raise ValueError(f"exactly one proposal must be 'selected', got {len(selected)}")
        if selected[0].proposal_index != self.selected_index:
            raise ValueError(
                f"selected_index {self.selected_index} does not match the selected status "
                f"(proposal {selected[0].proposal_index})"
            )
        return self

    @property
    def research_requested(self) -> bool:
        return bool(self.research_request.strip()) or any(c.research_requested for c in self.critiques)
