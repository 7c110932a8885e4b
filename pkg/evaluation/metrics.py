"""
Run metrics M1-M7 and their per-condition aggregation.

M1 JSON validity, M2 requirement coverage, M3 embodiment presence and M4 code
executability are computed on the final DSG; M5 run completion is a count over a
condition's seeds; M6 is wall-clock time between the first and last snapshot and
M7 the node count of the final DSG.
"""
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import pandas as pd
from pydantic import BaseModel, Field

from agent.checkpoint_store import CheckpointStore
from agent.config import M4_INTERPRETER, M4_PARALLELISM, M4_TIMEOUT_SECONDS
from design.dsg import DesignState, design_state_document, graph_size, parse_design_state, serialize_design_state
from utils.errors import MalformedDocument, NoFinalDsg, NoSnapshots, SchemaViolation
from utils.script_runner import resolve_interpreter, run_script

logger = logging.getLogger(__name__)

REQUIREMENT_COUNT = 10
MARKER_ABSENT_DSG = "absent_dsg"
MARKER_NO_SCRIPTS = "no_scripts"
MARKER_NO_SNAPSHOTS = "no_snapshots"
MARKER_EVALUATION_ERROR = "evaluation_error"

# SR1, SR-1, sr-01, SR 07; not USR-1 or SR-100
SR_PATTERN = re.compile(r"(?<![A-Za-z0-9])SR[-\s]?0*(\d{1,2})(?!\d)", re.IGNORECASE)
SR_STRICT_PATTERN = re.compile(r"(?<![A-Za-z0-9])SR-(\d{2})(?!\d)")
SN_PATTERN = re.compile(r"(?<![A-Za-z0-9])SN[-\s]?0*(\d{1,2})(?!\d)", re.IGNORECASE)


def canonical_sr(number: int) -> str:
    return f"SR-{number:02d}"


def _strings(value: Any) -> Iterable[str]:
    if isinstance(value, str):
        yield value
    elif isinstance(value, dict):
        for key, item in value.items():
            yield str(key)
            yield from _strings(item)
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _strings(item)


def requirement_mentions(state: DesignState, strict: bool = False) -> Tuple[Set[str], Set[str]]:
    """
    Canonical SR-01..SR-10 ids and SN-n ids mentioned anywhere in the nodes.

    Every string of each node's canonical document is searched: names,
    descriptions, linked_reqs, tags, code and comments.
    """
    sr_pattern = SR_STRICT_PATTERN if strict else SR_PATTERN
    srs: Set[str] = set()
    sns: Set[str] = set()
    for node_doc in design_state_document(state)["nodes"].values():
        for text in _strings(node_doc):
            for match in sr_pattern.finditer(text):
                number = int(match.group(1))
                if 1 <= number <= REQUIREMENT_COUNT:
                    srs.add(canonical_sr(number))
            for match in SN_PATTERN.finditer(text):
                if int(match.group(1)) >= 1:
                    sns.add(f"SN-{int(match.group(1))}")
    return srs, sns


def m1_json_validity(final_dsg_text: Optional[Union[str, bytes]]) -> float:
    if final_dsg_text is None:
        return 0.0
    try:
        parse_design_state(final_dsg_text)
    except (MalformedDocument, SchemaViolation):
        return 0.0
    return 1.0


def m2_requirements_coverage(state: DesignState, strict: bool = False) -> float:
    srs, _ = requirement_mentions(state, strict)
    return len(srs) / REQUIREMENT_COUNT


def m3_embodiment_presence(state: DesignState) -> float:
    """Fraction of nodes with an embodiment whose principle or description is non-empty."""
    if not state.nodes:
        return 0.0
    present = sum(1 for node in state.nodes.values() if node.embodiment is not None and not node.embodiment.is_empty())
    return present / len(state.nodes)


def collect_scripts(state: DesignState) -> List[str]:
    """Non-empty physics-model code, in sorted node_id then model order."""
    return [
        model.code
        for node_id in sorted(state.nodes)
        for model in state.nodes[node_id].physics_models
        if model.code.strip()
    ]


def m4_code_executability(
    state: DesignState,
    interpreter_command: str = M4_INTERPRETER,
    timeout: float = M4_TIMEOUT_SECONDS,
    parallelism: int = M4_PARALLELISM,
) -> float:
    """
    Fraction of scripts that exit 0 under `--help` within the timeout; 0.0 when there are none.

    Raises:
        InterpreterMissing: the interpreter command cannot be resolved
    """
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    interpreter = resolve_interpreter(interpreter_command)
    scripts = collect_scripts(state)
    if not scripts:
        return 0.0

    def check(code: str) -> bool:
        return run_script(code, interpreter, ["--help"], timeout).succeeded

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        outcomes = list(pool.map(check, scripts))
    logger.info(f"M4: {sum(outcomes)}/{len(outcomes)} scripts passed --help")
    return sum(outcomes) / len(outcomes)


def m6_wall_clock(record: Any) -> float:
    """Seconds from first to last snapshot; `record` is anything with a `snapshots` list."""
    snapshots = getattr(record, "snapshots", record)
    if not snapshots:
        raise NoSnapshots("run has no snapshots")
    first, last = snapshots[0], snapshots[-1]
    timestamp = (lambda s: s["timestamp"] if isinstance(s, dict) else s.timestamp)
    return round(max(0.0, timestamp(last) - timestamp(first)), 3)


def final_design_state(record: Any) -> DesignState:
    """Design state of the last snapshot that carries one."""
    for snapshot in reversed(getattr(record, "snapshots", record) or []):
        if snapshot.design_state is not None:
            return snapshot.design_state
    raise NoFinalDsg("no snapshot carries a design state")


def m7_graph_size(record: Any) -> int:
    return graph_size(final_design_state(record))


class MetricsReport(BaseModel):
    m1_json_validity: float = Field(ge=0.0, le=1.0)
    m2_requirements_coverage: float = Field(ge=0.0, le=1.0)
    m3_embodiment_presence: float = Field(ge=0.0, le=1.0)
    m4_code_executability: float = Field(ge=0.0, le=1.0)
    m6_wall_clock: float = Field(ge=0.0)
    m7_graph_size: int = Field(ge=0)
    covered_requirements: List[str] = Field(default_factory=list)
    stakeholder_mentions: List[str] = Field(default_factory=list)
    markers: List[str] = Field(default_factory=list)


class _SnapshotView(BaseModel):
    timestamp: float
    design_state: Optional[DesignState] = None


def _load_from_dir(run_dir: Path) -> Tuple[List[_SnapshotView], Optional[str]]:
    store = CheckpointStore(run_dir)
    views: List[_SnapshotView] = []
    final_text: Optional[str] = None
    for index in store.snapshot_indices():
        meta = store.read_snapshot_meta(index)
        path = store.snapshot_document_path(index)
        views.append(_SnapshotView(timestamp=meta["timestamp"]))
        if path.exists():
            final_text = path.read_text(encoding="utf-8")
    return views, final_text


def evaluate_run(
    source: Union[str, Path, Any],
    interpreter_command: str = M4_INTERPRETER,
    timeout: float = M4_TIMEOUT_SECONDS,
    parallelism: int = M4_PARALLELISM,
    strict: bool = False,
) -> MetricsReport:
    """
    M1-M4, M6 and M7 for one run, from a run directory or an in-memory RunRecord.

    A run without a final DSG scores 0 on M1-M4 and M7 and carries the absent_dsg marker.
    """
    markers: List[str] = []
    if isinstance(source, (str, Path)):
        snapshots, final_text = _load_from_dir(Path(source))
    else:
        snapshots = list(source.snapshots)
        try:
            final_text = serialize_design_state(final_design_state(source))
        except NoFinalDsg:
            final_text = None

    try:
        m6 = m6_wall_clock(snapshots)
    except NoSnapshots:
        m6 = 0.0
        markers.append(MARKER_NO_SNAPSHOTS)

    m1 = m1_json_validity(final_text)
    if m1 == 0.0:
        markers.append(MARKER_ABSENT_DSG)
        return MetricsReport(
            m1_json_validity=0.0, m2_requirements_coverage=0.0, m3_embodiment_presence=0.0,
            m4_code_executability=0.0, m6_wall_clock=m6, m7_graph_size=0, markers=markers,
        )

    state = parse_design_state(final_text)
    srs, sns = requirement_mentions(state, strict)
    if not collect_scripts(state):
        markers.append(MARKER_NO_SCRIPTS)
    return MetricsReport(
        m1_json_validity=m1,
        m2_requirements_coverage=len(srs) / REQUIREMENT_COUNT,
        m3_embodiment_presence=m3_embodiment_presence(state),
        m4_code_executability=m4_code_executability(state, interpreter_command, timeout, parallelism),
        m6_wall_clock=m6,
        m7_graph_size=graph_size(state),
        covered_requirements=sorted(srs),
        stakeholder_mentions=sorted(sns, key=lambda s: int(s.split("-")[1])),
        markers=markers,
    )


class TaggedReport(BaseModel):
    """A MetricsReport tagged with its run's matrix coordinates."""
    model: str
    system: str
    temperature: float
    seed: int
    report: MetricsReport
    completed: bool


class ConditionSummary(BaseModel):
    model: str
    system: str
    temperature: float
    runs: int
    m1_mean: float
    m1_std: float
    m2_mean: float
    m2_std: float
    m3_mean: float
    m3_std: float
    m4_mean: float
    m4_std: float
    m5_count: int
    m6_mean: float
    m6_std: float
    m7_mean: float
    m7_std: float


METRIC_COLUMNS = {
    "m1": "m1_json_validity",
    "m2": "m2_requirements_coverage",
    "m3": "m3_embodiment_presence",
    "m4": "m4_code_executability",
    "m6": "m6_wall_clock",
    "m7": "m7_graph_size",
}
CONDITION_KEYS = ["model", "system", "temperature"]


def _clean(value: float) -> float:
    return 0.0 if value is None or (isinstance(value, float) and math.isnan(value)) else float(value)


def aggregate(reports: Sequence[TaggedReport]) -> List[ConditionSummary]:
    """
    Mean and sample standard deviation (n-1) per (model, system, temperature).

    A single-run condition has std 0; m5 counts completed runs. Conditions are
    returned sorted by model, system, then temperature.
    """
    if not reports:
        return []
    rows = []
    for tagged in reports:
        row = {"model": tagged.model, "system": tagged.system, "temperature": tagged.temperature,
               "seed": tagged.seed, "completed": int(tagged.completed)}
        row.update({short: getattr(tagged.report, field) for short, field in METRIC_COLUMNS.items()})
        rows.append(row)
    frame = pd.DataFrame(rows)

    grouped = frame.sort_values(CONDITION_KEYS + ["seed"]).groupby(CONDITION_KEYS, sort=True)
    means = grouped[list(METRIC_COLUMNS)].mean()
    stds = grouped[list(METRIC_COLUMNS)].std(ddof=1)
    completed = grouped["completed"].sum()
    sizes = grouped.size()

    summaries = []
    for key in means.index:
        model, system, temperature = key
        values: Dict[str, Any] = {"model": model, "system": system, "temperature": float(temperature),
                                  "runs": int(sizes[key]), "m5_count": int(completed[key])}
        for short in METRIC_COLUMNS:
            values[f"{short}_mean"] = _clean(means.loc[key, short])
            values[f"{short}_std"] = _clean(stds.loc[key, short])
        summaries.append(ConditionSummary(**values))
    return summaries
