"""
Command-line surface: run, matrix, eval, summarize, export-graph and extract.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from langsmith.utils import tracing_is_enabled

from agent.agents import extract_requirements
from agent.config import (
    DEFAULT_CDC_PATH,
    DEFAULT_MODELS,
    DEFAULT_OUTPUT_DIR,
    DEFAULT_SCRIPT_DIR,
    DSGFORGE_MODEL,
    LANGSMITH_PROJECT,
    RESEARCH_OFFLINE,
    M4_INTERPRETER,
    M4_TIMEOUT_SECONDS,
    configure_logging,
)
from agent.llm_gateway import BackendConfig, BackendKind, LLMSession
from agent.workflow import WorkflowKind
from evaluation.metrics import aggregate
from harness.matrix import (
    ExperimentConfig,
    MatrixSpec,
    backend_from_mapping,
    evaluate_directory,
    execute_experiment,
    export_graph,
    find_run_dirs,
    load_tagged_reports,
    prepare_run_dir,
    render_table,
    run_matrix,
    summarize,
)
from utils.errors import DialogueAborted, DsgForgeError
from utils.script_runner import resolve_interpreter

logger = logging.getLogger(__name__)


def _backend(args: argparse.Namespace) -> BackendConfig:
    return backend_from_mapping({
        "kind": args.backend,
        "endpoint_url": getattr(args, "endpoint", None),
        "script_dir": getattr(args, "script_dir", None),
        "retry_limit": args.retry_limit,
    })


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend", choices=[k.value for k in BackendKind], default=BackendKind.SCRIPTED.value,
                        help="Chat backend")
    parser.add_argument("--endpoint", help="OpenAI-compatible base URL (http backend; default DSGFORGE_API_BASE)")
    parser.add_argument("--script-dir", type=Path, default=DEFAULT_SCRIPT_DIR, help="Canned replies (scripted backend)")
    parser.add_argument("--retry-limit", type=int, default=2, help="Structured-output re-prompts per call")


def _add_eval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--interpreter", default=M4_INTERPRETER, help="Interpreter used for the M4 --help check")
    parser.add_argument("--timeout", type=float, default=M4_TIMEOUT_SECONDS, help="M4 per-script timeout in seconds")


def cmd_run(args: argparse.Namespace) -> int:
    config = ExperimentConfig(
        model_id=args.model,
        system=WorkflowKind(args.system),
        temperature=args.temp,
        seed=args.seed,
        cdc_path=args.cdc,
        backend=_backend(args),
        output_dir=args.out,
        research_offline=args.offline or RESEARCH_OFFLINE,
    )
    resolve_interpreter(args.interpreter)
    prepare_run_dir(config.run_dir, args.overwrite)
    result = execute_experiment(config, interpreter_command=args.interpreter, timeout=args.timeout)
    record, report = result.record, result.report
    print(f"Run directory: {config.run_dir}")
    print(f"Completed: {record.completed} (failure: {record.failure_reason.value})")
    print(f"Stage trace: {' -> '.join(record.stage_trace)}")
    print(json.dumps(report.model_dump(), indent=2))
    return 0 if record.completed else 1


def cmd_matrix(args: argparse.Namespace) -> int:
    if args.spec:
        spec = MatrixSpec.from_yaml(args.spec)
    else:
        spec = MatrixSpec(
            models=args.models,
            systems=[WorkflowKind(s) for s in args.systems],
            temperatures=args.temps,
            seeds=args.seeds,
            cdc_path=args.cdc,
            backend=_backend(args),
            output_dir=args.out,
            research_offline=args.offline or RESEARCH_OFFLINE,
        )
    results = run_matrix(
        spec,
        parallelism=args.parallelism,
        overwrite=args.overwrite or spec.overwrite,
        interpreter_command=args.interpreter,
        timeout=args.timeout,
    )
    csv_text = summarize(results)
    summary_path = spec.output_dir / "summary.csv"
    summary_path.write_text(csv_text, encoding="utf-8")
    completed = sum(r.record.completed for r in results)
    print(f"{completed}/{len(results)} runs completed; summary written to {summary_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run_dirs: List[Path] = list(args.runs) or find_run_dirs(args.root)
    if not run_dirs:
        print(f"No run directories found under {args.root}")
        return 1
    for run_dir in run_dirs:
        tagged = evaluate_directory(run_dir, args.interpreter, args.timeout, strict=args.strict)
        r = tagged.report
        print(
            f"{run_dir}: M1={r.m1_json_validity:.0%} M2={r.m2_requirements_coverage:.0%} "
            f"M3={r.m3_embodiment_presence:.0%} M4={r.m4_code_executability:.0%} "
            f"M6={r.m6_wall_clock:.2f}s M7={r.m7_graph_size} {' '.join(r.markers)}".rstrip()
        )
    return 0


def cmd_summarize(args: argparse.Namespace) -> int:
    tagged = load_tagged_reports(args.root)
    if not tagged:
        print(f"No evaluated runs under {args.root}")
        return 1
    text = render_table(aggregate(tagged)) if args.format == "markdown" else summarize(tagged)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"Summary written to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_export_graph(args: argparse.Namespace) -> int:
    export_graph(args.run, args.out)
    print(f"DOT written to {args.out}")
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    """Interactive requirements dialogue; ends when the Extractor writes FINALIZED."""
    session = LLMSession.open(_backend(args), args.model, args.temp, args.seed)
    print("🧠 Requirements Extractor is ready. Describe your system (type 'exit' to quit).")

    def driver(last_reply: Optional[str]) -> Optional[str]:
        if last_reply is not None:
            print(f"\n{last_reply}")
        try:
            turn = input("\nYou: ")
        except EOFError:
            return None
        if turn.lower() in ["exit", "quit", "q"]:
            return None
        return turn

    try:
        doc = extract_requirements(driver, session)
    except (DialogueAborted, KeyboardInterrupt):
        print("\nGoodbye! 👋")
        return 1
    text = json.dumps(doc.model_dump(), indent=2, ensure_ascii=False)
    print("\n✅ Requirements FINALIZED")
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"Written to {args.out}")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsgforge", description="LLM-driven conceptual design runs and their evaluation")
    parser.add_argument("--log-level", default=None, help="Override LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run one experiment")
    run.add_argument("--model", default=DSGFORGE_MODEL)
    run.add_argument("--system", choices=[k.value for k in WorkflowKind], default=WorkflowKind.MAS.value)
    run.add_argument("--temp", type=float, default=0.0)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--cdc", type=Path, default=DEFAULT_CDC_PATH)
    run.add_argument("--out", type=Path, default=DEFAULT_OUTPUT_DIR)
    run.add_argument("--overwrite", action="store_true")
    run.add_argument("--offline", action="store_true", help="Disable research tools")
    _add_backend_flags(run)
    _add_eval_flags(run)
    run.set_defaults(func=cmd_run)

    matrix = sub.add_parser("matrix", help="Run an experiment matrix")
    matrix.add_argument("--spec", type=Path, help="YAML matrix file (overrides the axis flags)")
    matrix.add_argument("--models", nargs="+", default=list(DEFAULT_MODELS))
    matrix.add_argument("--systems", nargs="+", choices=[k.value for k in WorkflowKind], default=[k.value for k in WorkflowKind])
    matrix.add_argument("--temps", nargs="+", type=float, default=[0.0, 0.5, 1.0])
    matrix.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    matrix.add_argument("--cdc", type=Path, default=DEFAULT_CDC_PATH)
    matrix.add_argument("--out", type=Path, default=DEFAULT_OUTPUT_DIR)
    matrix.add_argument("--parallelism", type=int, default=None)
    matrix.add_argument("--overwrite", action="store_true")
    matrix.add_argument("--offline", action="store_true", help="Disable research tools")
    _add_backend_flags(matrix)
    _add_eval_flags(matrix)
    matrix.set_defaults(func=cmd_matrix)

    evaluate = sub.add_parser("eval", help="Recompute metrics for existing run directories")
    evaluate.add_argument("runs", nargs="*", type=Path, help="Run directories (default: all under --root)")
    evaluate.add_argument("--root", type=Path, default=DEFAULT_OUTPUT_DIR)
    evaluate.add_argument("--strict", action="store_true", help="Count only canonical SR-NN mentions for M2")
    _add_eval_flags(evaluate)
    evaluate.set_defaults(func=cmd_eval)

    summary = sub.add_parser("summarize", help="Per-condition summary of evaluated runs")
    summary.add_argument("--root", type=Path, default=DEFAULT_OUTPUT_DIR)
    summary.add_argument("--out", type=Path, help="Output path (default: stdout)")
    summary.add_argument("--format", choices=["csv", "markdown"], default="csv")
    summary.set_defaults(func=cmd_summarize)

    export = sub.add_parser("export-graph", help="Export a run's final DSG as DOT")
    export.add_argument("--run", type=Path, required=True)
    export.add_argument("--out", type=Path, required=True)
    export.set_defaults(func=cmd_export_graph)

    extract = sub.add_parser("extract", help="Interactive requirements extraction")
    extract.add_argument("--model", default=DSGFORGE_MODEL)
    extract.add_argument("--temp", type=float, default=0.0)
    extract.add_argument("--seed", type=int, default=0)
    extract.add_argument("--out", type=Path, help="Write the finalized document here")
    _add_backend_flags(extract)
    extract.set_defaults(func=cmd_extract, backend=BackendKind.HTTP.value)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.log_level:
        configure_logging(args.log_level.upper())
    else:
        configure_logging()
    if tracing_is_enabled():
        logger.info(f"LangSmith tracing enabled (project: {LANGSMITH_PROJECT or 'default'})")
    try:
        return args.func(args)
    except DsgForgeError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"Error: {e}", file=sys.stderr)
        return 2
