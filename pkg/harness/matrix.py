"""
Experiment matrix: enumeration, execution, persistence and summaries.

Runs are laid out as {output_dir}/{model}/{system}/{temperature}/{seed}/ and each
directory holds the checkpoint store of that run plus its metrics.json.
"""
import itertools
import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, SecretStr

from agent.checkpoint_store import METRICS_FILE, RUN_RECORD_FILE, CheckpointStore
from agent.config import (
    DEFAULT_CDC_PATH,
    DEFAULT_MODELS,
    DEFAULT_OUTPUT_DIR,
    DEFAULT_RETRY_LIMIT,
    DEFAULT_SCRIPT_DIR,
    DEFAULT_SEEDS,
    DEFAULT_SYSTEMS,
    DEFAULT_TEMPERATURES,
    DSGFORGE_API_KEY,
    M4_INTERPRETER,
    M4_TIMEOUT_SECONDS,
    MAX_COMPLETION_TOKENS,
    RESEARCH_OFFLINE,
)
from agent.llm_gateway import BackendConfig, BackendKind
from agent.workflow import FailureReason, RunConfig, RunRecord, WorkflowKind, run_to_completion
from design.dsg import parse_design_state, to_dot
from evaluation.metrics import MARKER_EVALUATION_ERROR, ConditionSummary, MetricsReport, TaggedReport, aggregate, evaluate_run
from utils.errors import (
    DuplicateAxisValue,
    EmptyAxis,
    InterpreterMissing,
    NoFinalDsg,
    RunDirectoryExists,
    StorageError,
)
from utils.paths import slugify
from utils.script_runner import resolve_interpreter

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "model", "system", "temperature",
    "m1_mean", "m1_std", "m2_mean", "m2_std", "m3_mean", "m3_std", "m4_mean", "m4_std",
    "m5_count", "m6_mean", "m6_std", "m7_mean", "m7_std",
]
PERCENT_METRICS = ("m1", "m2", "m3", "m4")


def temperature_label(temperature: float) -> str:
    return f"{temperature:.1f}"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, protected_namespaces=())

    model_id: str
    system: WorkflowKind
    temperature: float = Field(ge=0.0, le=2.0)
    seed: int = Field(ge=0)
    cdc_path: Path = DEFAULT_CDC_PATH
    backend: BackendConfig
    output_dir: Path = DEFAULT_OUTPUT_DIR
    max_completion_tokens: int = Field(default=MAX_COMPLETION_TOKENS, gt=0, le=MAX_COMPLETION_TOKENS)
    research_offline: bool = RESEARCH_OFFLINE

    @property
    def run_id(self) -> str:
        return f"{slugify(self.model_id)}-{self.system.value}-T{temperature_label(self.temperature)}-s{self.seed}"

    @property
    def run_dir(self) -> Path:
        return self.output_dir / slugify(self.model_id) / self.system.value / temperature_label(self.temperature) / str(self.seed)

    def to_run_config(self) -> RunConfig:
        return RunConfig(
            run_id=self.run_id,
            kind=self.system,
            model_id=self.model_id,
            temperature=self.temperature,
            seed=self.seed,
            cdc_path=self.cdc_path,
            max_completion_tokens=self.max_completion_tokens,
            research_offline=self.research_offline,
        )


class MatrixSpec(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    models: List[str] = Field(default_factory=lambda: list(DEFAULT_MODELS))
    systems: List[WorkflowKind] = Field(default_factory=lambda: [WorkflowKind(s) for s in DEFAULT_SYSTEMS])
    temperatures: List[float] = Field(default_factory=lambda: list(DEFAULT_TEMPERATURES))
    seeds: List[int] = Field(default_factory=lambda: list(DEFAULT_SEEDS))
    cdc_path: Path = DEFAULT_CDC_PATH
    backend: BackendConfig = Field(default_factory=lambda: BackendConfig.scripted(script_dir=DEFAULT_SCRIPT_DIR))
    output_dir: Path = DEFAULT_OUTPUT_DIR
    max_completion_tokens: int = Field(default=MAX_COMPLETION_TOKENS, gt=0, le=MAX_COMPLETION_TOKENS)
    parallelism: int = Field(default=1, ge=1)
    overwrite: bool = False
    research_offline: bool = RESEARCH_OFFLINE

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "MatrixSpec":
        """Load a matrix file; relative paths resolve against the file's directory."""
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        return cls.from_mapping(data, base_dir=path.parent)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base_dir: Optional[Path] = None) -> "MatrixSpec":
        data = dict(data)
        base_dir = base_dir or Path.cwd()

        def resolve(value: Any) -> Path:
            p = Path(value)
            return p if p.is_absolute() else base_dir / p

        if "cdc" in data:
            data["cdc_path"] = resolve(data.pop("cdc"))
        if "output_dir" in data:
            data["output_dir"] = resolve(data["output_dir"])
        backend = data.pop("backend", None) or {}
        data["backend"] = backend_from_mapping(backend, resolve)
        return cls(**data)


def backend_from_mapping(backend: Mapping[str, Any], resolve=Path) -> BackendConfig:
    """The `backend` block of a matrix file: {kind, endpoint_url, script_dir, retry_limit}."""
    kind = BackendKind(backend.get("kind", BackendKind.SCRIPTED.value))
    retry_limit = int(backend.get("retry_limit", DEFAULT_RETRY_LIMIT))
    if kind is BackendKind.HTTP:
        if not backend.get("endpoint_url"):
            return BackendConfig.from_env(retry_limit=retry_limit)
        return BackendConfig(
            kind=BackendKind.HTTP,
            endpoint_url=backend["endpoint_url"],
            api_key=SecretStr(DSGFORGE_API_KEY) if DSGFORGE_API_KEY else None,
            retry_limit=retry_limit,
        )
    script_dir = resolve(backend["script_dir"]) if backend.get("script_dir") else DEFAULT_SCRIPT_DIR
    return BackendConfig.scripted(script_dir=script_dir, retry_limit=retry_limit)


def _check_axis(name: str, values: Sequence[Any]) -> None:
    if not values:
        raise EmptyAxis(f"matrix axis {name!r} is empty")
    seen = set()
    for value in values:
        if value in seen:
            raise DuplicateAxisValue(f"matrix axis {name!r} lists {value!r} more than once")
        seen.add(value)


def enumerate_matrix(spec: MatrixSpec) -> List[ExperimentConfig]:
    """Cartesian product in model, system, temperature, seed order (seed innermost)."""
    for name in ("models", "systems", "temperatures", "seeds"):
        _check_axis(name, getattr(spec, name))
    return [
        ExperimentConfig(
            model_id=model,
            system=system,
            temperature=temperature,
            seed=seed,
            cdc_path=spec.cdc_path,
            backend=spec.backend,
            output_dir=spec.output_dir,
            max_completion_tokens=spec.max_completion_tokens,
            research_offline=spec.research_offline,
        )
        for model, system, temperature, seed in itertools.product(spec.models, spec.systems, spec.temperatures, spec.seeds)
    ]


class MatrixResult(BaseModel):
    config: ExperimentConfig
    record: RunRecord
    report: MetricsReport

    def tagged(self) -> TaggedReport:
        return TaggedReport(
            model=self.config.model_id,
            system=self.config.system.value,
            temperature=self.config.temperature,
            seed=self.config.seed,
            report=self.report,
            completed=self.record.completed,
        )


def metrics_document(tagged: TaggedReport, failure_reason: FailureReason) -> Dict[str, Any]:
    return {
        "model": tagged.model,
        "system": tagged.system,
        "temperature": tagged.temperature,
        "seed": tagged.seed,
        "completed": tagged.completed,
        "failure_reason": failure_reason.value,
        **tagged.report.model_dump(),
    }


def prepare_run_dir(run_dir: Path, overwrite: bool) -> None:
    """
    Raises:
        RunDirectoryExists: the directory already holds files and overwrite is off
    """
    if run_dir.exists() and any(run_dir.iterdir()):
        if not overwrite:
            raise RunDirectoryExists(f"run directory {run_dir} is not empty (use --overwrite)")
        logger.info(f"Overwriting {run_dir}")
        shutil.rmtree(run_dir)


def _crash_record(run_config: RunConfig, error: Exception) -> RunRecord:
    return RunRecord(
        config=run_config.model_dump(mode="json"),
        completed=False,
        failure_reason=FailureReason.TRANSPORT,
        snapshots=[],
        diagnostics=[f"crash: {error}"],
    )


def _unscored_report(marker: str) -> MetricsReport:
    return MetricsReport(
        m1_json_validity=0.0, m2_requirements_coverage=0.0, m3_embodiment_presence=0.0,
        m4_code_executability=0.0, m6_wall_clock=0.0, m7_graph_size=0, markers=[marker],
    )


def execute_experiment(
    config: ExperimentConfig,
    tools: Optional[Mapping[str, Any]] = None,
    interpreter_command: str = M4_INTERPRETER,
    timeout: float = M4_TIMEOUT_SECONDS,
) -> MatrixResult:
    """
    One run plus its metrics; a crashed run is contained in the returned record.

    The record returned by the workflow is kept as-is whatever happens while scoring it.

    Raises:
        InterpreterMissing: the M4 interpreter cannot be found
    """
    store = CheckpointStore(config.run_dir)
    run_config = config.to_run_config()
    try:
        record = run_to_completion(run_config, config.backend, store=store, tools=tools)
    except Exception as e:
        logger.exception(f"Run {config.run_id} crashed: {str(e)}")
        record = _crash_record(run_config, e)
        try:
            store.write_record(record.summary_document())
        except StorageError as write_error:
            logger.error(f"Could not write the crash record for {config.run_id}: {str(write_error)}")

    try:
        report = evaluate_run(record, interpreter_command, timeout)
    except InterpreterMissing:
        raise
    except Exception as e:
        logger.exception(f"Scoring {config.run_id} failed: {str(e)}")
        report = _unscored_report(MARKER_EVALUATION_ERROR)

    result = MatrixResult(config=config, record=record, report=report)
    try:
        store.write_metrics(metrics_document(result.tagged(), record.failure_reason))
    except Exception as e:
        logger.error(f"Could not write metrics for {config.run_id}: {str(e)}")
    return result


def run_matrix(
    spec: MatrixSpec,
    parallelism: Optional[int] = None,
    overwrite: Optional[bool] = None,
    tools: Optional[Mapping[str, Any]] = None,
    interpreter_command: str = M4_INTERPRETER,
    timeout: float = M4_TIMEOUT_SECONDS,
) -> List[MatrixResult]:
    """
    Execute every configuration of the matrix, in enumeration order.

    Raises:
        InterpreterMissing: the M4 interpreter cannot be found (checked before any run starts)
        RunDirectoryExists: a run directory is already populated and overwrite is off
            (checked for every run before any run starts)
    """
    configs = enumerate_matrix(spec)
    overwrite = spec.overwrite if overwrite is None else overwrite
    workers = spec.parallelism if parallelism is None else parallelism
    resolve_interpreter(interpreter_command)
    for config in configs:
        prepare_run_dir(config.run_dir, overwrite)

    logger.info(f"Running {len(configs)} experiments with parallelism {workers}")
    if workers <= 1:
        return [execute_experiment(c, tools, interpreter_command, timeout) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: execute_experiment(c, tools, interpreter_command, timeout), configs))


def _tag_all(results: Iterable[Union[MatrixResult, TaggedReport]]) -> List[TaggedReport]:
    return [r.tagged() if isinstance(r, MatrixResult) else r for r in results]


def summary_frame(summaries: Sequence[ConditionSummary]) -> pd.DataFrame:
    """Summaries in CSV form: m1-m4 as percentages (1 decimal), m6/m7 with 2 decimals."""
    frame = pd.DataFrame([s.model_dump() for s in summaries], columns=CSV_COLUMNS + ["runs"])
    for metric in PERCENT_METRICS:
        for stat in ("mean", "std"):
            frame[f"{metric}_{stat}"] = (frame[f"{metric}_{stat}"] * 100).round(1)
    for metric in ("m6", "m7"):
        for stat in ("mean", "std"):
            frame[f"{metric}_{stat}"] = frame[f"{metric}_{stat}"].round(2)
    frame["m5_count"] = frame["m5_count"].astype(int)
    return frame[CSV_COLUMNS]


def summarize(results: Iterable[Union[MatrixResult, TaggedReport]]) -> str:
    """Fixed-column CSV, one row per (model, system, temperature)."""
    summaries = aggregate(_tag_all(results))
    return summary_frame(summaries).to_csv(index=False, lineterminator="\n")


def render_table(summaries: Sequence[ConditionSummary]) -> str:
    """Markdown table with `mean ± std` cells and M5 as completed/runs."""
    lines = [
        "| Model | System | T | M1 (%) | M2 (%) | M3 (%) | M4 (%) | M5 | M6 (s) | M7 (nodes) |",
        "|---|---|---|---|---|---|---|---|---|---|",
    ]
    for s in summaries:
        cells = [s.model, s.system, temperature_label(s.temperature)]
        for metric in PERCENT_METRICS:
            cells.append(f"{getattr(s, metric + '_mean') * 100:.1f} ± {getattr(s, metric + '_std') * 100:.1f}")
        cells.append(f"{s.m5_count}/{s.runs}")
        cells.append(f"{s.m6_mean:.2f} ± {s.m6_std:.2f}")
        cells.append(f"{s.m7_mean:.2f} ± {s.m7_std:.2f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def find_run_dirs(root: Union[str, Path]) -> List[Path]:
    """Every directory under `root` holding a run_record.json, sorted."""
    return sorted(p.parent for p in Path(root).rglob(RUN_RECORD_FILE))


def load_tagged_reports(root: Union[str, Path]) -> List[TaggedReport]:
    """Tagged reports from the metrics.json files under `root`."""
    tagged = []
    for run_dir in find_run_dirs(root):
        path = run_dir / METRICS_FILE
        if not path.exists():
            logger.warning(f"No {METRICS_FILE} in {run_dir}; run `eval` first")
            continue
        doc = json.loads(path.read_text(encoding="utf-8"))
        report = MetricsReport.model_validate(doc)
        tagged.append(TaggedReport(
            model=doc["model"], system=doc["system"], temperature=doc["temperature"], seed=doc["seed"],
            report=report, completed=doc["completed"],
        ))
    return tagged


def evaluate_directory(
    run_dir: Union[str, Path],
    interpreter_command: str = M4_INTERPRETER,
    timeout: float = M4_TIMEOUT_SECONDS,
    strict: bool = False,
) -> TaggedReport:
    """Recompute metrics for a persisted run and rewrite its metrics.json."""
    store = CheckpointStore(run_dir)
    record = store.read_record()
    config = record["config"]
    report = evaluate_run(Path(run_dir), interpreter_command, timeout, strict=strict)
    tagged = TaggedReport(
        model=config["model_id"], system=config["kind"], temperature=config["temperature"], seed=config["seed"],
        report=report, completed=record["completed"],
    )
    store.write_metrics(metrics_document(tagged, FailureReason(record["failure_reason"])))
    return tagged


def export_graph(run_dir: Union[str, Path], out_path: Union[str, Path]) -> Path:
    """
    Write the run's final DSG as DOT.

    Raises:
        NoFinalDsg: no snapshot of the run carries a DSG
    """
    store = CheckpointStore(run_dir)
    documents = [store.snapshot_document_path(i) for i in store.snapshot_indices()]
    documents = [p for p in documents if p.exists()]
    if not documents:
        raise NoFinalDsg(f"run {run_dir} has no DSG snapshot")
    state = parse_design_state(documents[-1].read_bytes())
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(to_dot(state), encoding="utf-8")
    logger.info(f"Wrote {out_path} ({len(state.nodes)} nodes, {len(state.edges)} edges)")
    return out_path
