"""
Design-State Graph (DSG) data model.

A DSG is a typed, directed multigraph: a map of design nodes keyed by UUID plus a
flat edge list that is the only record of connectivity. This module parses and
serializes the JSON interchange form, computes advisory graph diagnostics and
applies node-local patches.
"""
import json
import logging
import math
import uuid
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import networkx as nx
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.errors import MalformedDocument, SchemaViolation, UnknownNode

logger = logging.getLogger(__name__)


class StatusFlag(str, Enum):
    """Life-cycle flag shared by physics models and embodiments."""
    DRAFT = "draft"
    REVIEWED = "reviewed"
    VALIDATED = "validated"


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="ignore")


class DesignParameter(_Frozen):
    value: float
    unit: str = ""

    @model_validator(mode="before")
    @classmethod
    def _accept_bare_number(cls, data: Any) -> Any:
        # models often write {"area_m2": 2.5} instead of {"area_m2": {"value": 2.5, "unit": ""}}
        if isinstance(data, (int, float)) and not isinstance(data, bool):
            return {"value": data, "unit": ""}
        return data

    @field_validator("value")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("design parameter values must be finite numbers")
        return value


class PhysicsModel(_Frozen):
    """An equation, its simulation script and the assumptions behind it."""
    equation: str
    code: str
    assumptions: Tuple[str, ...] = ()
    status: StatusFlag = StatusFlag.DRAFT


class Embodiment(_Frozen):
    """The physical realization of a sub-function."""
    principle: str
    description: str = ""
    design_parameters: Dict[str, DesignParameter] = Field(default_factory=dict)
    cost_estimate: Optional[float] = None
    mass_estimate: Optional[float] = None
    status: StatusFlag = StatusFlag.DRAFT

    def is_empty(self) -> bool:
        return not self.principle.strip() and not self.description.strip()


class DesignNode(_Frozen):
    """The atomic element of the DSG: one sub-function, one embodiment, any number of models."""
    node_id: str
    node_kind: str = ""
    name: str
    description: str = ""
    embodiment: Optional[Embodiment] = None
    physics_models: Tuple[PhysicsModel, ...] = ()
    linked_reqs: Tuple[str, ...] = ()
    verification_plan: str = ""
    maturity: str = ""
    tags: Tuple[str, ...] = ()

    @field_validator("node_id")
    @classmethod
    def _uuid(cls, value: str) -> str:
        try:
            uuid.UUID(value)
        except (ValueError, AttributeError, TypeError):
            raise ValueError(f"node_id {value!r} is not a UUID")
        return value


class Edge(_Frozen):
    source: str
    target: str

    @model_validator(mode="before")
    @classmethod
    def _accept_pair(cls, data: Any) -> Any:
        if isinstance(data, (list, tuple)):
            if len(data) != 2:
                raise ValueError(f"edge must be a [source, target] pair, got {len(data)} items")
            return {"source": data[0], "target": data[1]}
        return data

    @model_validator(mode="after")
    def _no_self_loop(self) -> "Edge":
        if self.source == self.target:
            raise ValueError(f"self-loop on node {self.source}")
        return self

    def as_pair(self) -> Tuple[str, str]:
        return (self.source, self.target)


class DesignState(_Frozen):
    """Snapshot of the entire DSG."""
    nodes: Dict[str, DesignNode] = Field(default_factory=dict)
    edges: Tuple[Edge, ...] = ()

    @model_validator(mode="before")
    @classmethod
    def _accept_node_list(cls, data: Any) -> Any:
        if isinstance(data, dict) and isinstance(data.get("nodes"), list):
            nodes = {}
            for raw in data["nodes"]:
                node_id = raw.get("node_id") if isinstance(raw, dict) else getattr(raw, "node_id", None)
                nodes[node_id] = raw
            data = {**data, "nodes": nodes}
        return data

    @model_validator(mode="after")
    def _referential_integrity(self) -> "DesignState":
        for key, node in self.nodes.items():
            if key != node.node_id:
                raise ValueError(f"node map key {key!r} does not match node_id {node.node_id!r}")
        for edge in self.edges:
            for endpoint in (edge.source, edge.target):
                if endpoint not in self.nodes:
                    raise ValueError(f"edge endpoint {endpoint!r} is not in the node map")
        return self


class GraphDiagnostics(_Frozen):
    """Advisory findings; a state with cycles or orphans is still valid data."""
    orphan_nodes: Tuple[str, ...] = ()
    cycles: Tuple[Tuple[str, ...], ...] = ()
    duplicate_edges: Tuple[Edge, ...] = ()

    @property
    def is_clean(self) -> bool:
        return not (self.orphan_nodes or self.cycles or self.duplicate_edges)


def parse_design_state(text: Union[str, bytes]) -> DesignState:
    """
    Parse a DSG document.

    Raises:
        MalformedDocument: the text is not valid UTF-8 JSON
        SchemaViolation: the JSON does not satisfy the DSG schema
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedDocument(f"document is not UTF-8: {e}") from e
    try:
        data = json.loads(text)
    except (json.JSONDecodeError, TypeError) as e:
        raise MalformedDocument(f"document is not valid JSON: {e}") from e
    return design_state_from_data(data)


def design_state_from_data(data: Any) -> DesignState:
    """Validate already-decoded JSON data as a DesignState."""
    if not isinstance(data, dict):
        raise SchemaViolation(f"a DSG document must be a JSON object, got {type(data).__name__}")
    for field in ("nodes", "edges"):
        if field not in data:
            raise SchemaViolation(f"missing required field {field!r}")
    try:
        return DesignState.model_validate(data)
    except ValidationError as e:
        raise SchemaViolation(str(e)) from e


def _node_document(node: DesignNode) -> Dict[str, Any]:
    doc = node.model_dump(mode="json")
    embodiment = doc.get("embodiment")
    if embodiment is not None:
        embodiment["design_parameters"] = {
            name: embodiment["design_parameters"][name]
            for name in sorted(embodiment["design_parameters"])
        }
    return doc


def design_state_document(state: DesignState) -> Dict[str, Any]:
    """Canonical JSON-ready form: node keys sorted, edges in stored order, fixed field order."""
    return {
        "nodes": {node_id: _node_document(state.nodes[node_id]) for node_id in sorted(state.nodes)},
        "edges": [list(edge.as_pair()) for edge in state.edges],
    }


def serialize_design_state(state: DesignState) -> str:
    return json.dumps(design_state_document(state), indent=2, ensure_ascii=False)


def serialize_node(node: DesignNode) -> str:
    """Canonical serialization of a single node."""
    return json.dumps(_node_document(node), indent=2, ensure_ascii=False)


def canonicalize(text: Union[str, bytes]) -> str:
    return serialize_design_state(parse_design_state(text))


def validate_graph(state: DesignState) -> GraphDiagnostics:
    """Orphans, directed cycles and repeated edges; never mutates the state."""
    degree = {node_id: 0 for node_id in state.nodes}
    seen = set()
    duplicates: List[Edge] = []
    for edge in state.edges:
        degree[edge.source] += 1
        degree[edge.target] += 1
        pair = edge.as_pair()
        if pair in seen and all(d.as_pair() != pair for d in duplicates):
            duplicates.append(edge)
        seen.add(pair)

    graph = nx.DiGraph()
    graph.add_nodes_from(state.nodes)
    graph.add_edges_from(seen)
    cycles = []
    for cycle in nx.simple_cycles(graph):
        start = cycle.index(min(cycle))
        cycles.append(tuple(cycle[start:] + cycle[:start]))

    return GraphDiagnostics(
        orphan_nodes=tuple(sorted(n for n, d in degree.items() if d == 0)),
        cycles=tuple(sorted(cycles)),
        duplicate_edges=tuple(duplicates),
    )


_PATCHABLE_FIELDS = set(DesignNode.model_fields) - {"node_id"}


def mutate_subtree(state: DesignState, node_id: str, patch: Mapping[str, Any]) -> DesignState:
    """
    Return a new state where only `node_id` differs.

    Args:
        state: the current DSG
        node_id: node to patch
        patch: partial DesignNode fields (node_id may be repeated but not changed)

    Raises:
        UnknownNode: node_id is not in the node map
        SchemaViolation: the patch names unknown fields or yields an invalid node
    """
    if node_id not in state.nodes:
        raise UnknownNode(f"node {node_id!r} is not in the design state")
    patch = dict(patch)
    if patch.pop("node_id", node_id) != node_id:
        raise SchemaViolation("a patch cannot change node_id")
    unknown = set(patch) - _PATCHABLE_FIELDS
    if unknown:
        raise SchemaViolation(f"patch touches fields outside DesignNode: {sorted(unknown)}")

    merged = state.nodes[node_id].model_dump()
    merged.update(patch)
    try:
        node = DesignNode.model_validate(merged)
    except ValidationError as e:
        raise SchemaViolation(str(e)) from e

    nodes = dict(state.nodes)
    nodes[node_id] = node
    return DesignState(nodes=nodes, edges=state.edges)


def graph_size(state: DesignState) -> int:
    return len(state.nodes)


def summarize_design_state(state: DesignState) -> str:
    """Plain-text summary used wherever a prompt expects a DSG 'summarized in plain text'."""
    if not state.nodes:
        return "(empty design graph)"
    lines = []
    for node_id in sorted(state.nodes):
        node = state.nodes[node_id]
        lines.append(f"- {node.name} [{node.node_kind or 'node'}] ({node_id})")
        if node.description:
            lines.append(f"    description: {node.description}")
        if node.embodiment is not None:
            lines.append(f"    embodiment: {node.embodiment.principle} - {node.embodiment.description}".rstrip(" -"))
            for name in sorted(node.embodiment.design_parameters):
                param = node.embodiment.design_parameters[name]
                lines.append(f"      {name} = {param.value:g} {param.unit}".rstrip())
        else:
            lines.append("    embodiment: (none)")
        if node.linked_reqs:
            lines.append(f"    linked_reqs: {', '.join(node.linked_reqs)}")
        for i, model in enumerate(node.physics_models):
            lines.append(f"    model {i} [{model.status.value}]: {model.equation or '(no equation)'}")
    names = {node_id: node.name for node_id, node in state.nodes.items()}
    if state.edges:
        lines.append("edges:")
        lines.extend(f"  {names[e.source]} -> {names[e.target]}" for e in state.edges)
    else:
        lines.append("edges: (none)")
    return "\n".join(lines)


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ")


def to_dot(state: DesignState) -> str:
    """DOT export: one vertex line per node, one edge line per edge-list entry."""
    lines = ["digraph DSG {"]
    for node_id in sorted(state.nodes):
        lines.append(f'  "{node_id}" [label="{_dot_escape(state.nodes[node_id].name)}"];')
    for edge in state.edges:
        lines.append(f'  "{edge.source}" -> "{edge.target}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
