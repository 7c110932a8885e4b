# agent/checkpoint_store.py
"""
On-disk evidence for one run.

Layout of a run directory:
    snapshot_{NNN}.dsg.json    canonical DSG document (only when the snapshot carries one)
    snapshot_{NNN}.meta.json   timestamp, stage, transition_count, has_design_state
    run_record.json            the RunRecord without the agent I/O log
    agent_io_log.jsonl         one line per agent exchange, in call order
    metrics.json               written by the harness after evaluation

The store is append-only evidence; runs are never resumed from it.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

from pydantic import BaseModel

from design.dsg import DesignState, parse_design_state, serialize_design_state
from utils.errors import StorageError

logger = logging.getLogger(__name__)

RUN_RECORD_FILE = "run_record.json"
IO_LOG_FILE = "agent_io_log.jsonl"
METRICS_FILE = "metrics.json"


def snapshot_stem(index: int) -> str:
    return f"snapshot_{index:03d}"


class CheckpointStore:
    def __init__(self, run_dir: Union[str, Path]):
        """Initializes a store rooted at `run_dir` (created on first write)."""
        self.run_dir = Path(run_dir)

    def _write(self, name: str, text: str) -> Path:
        path = self.run_dir / name
        try:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        except OSError as e:
            logger.error(f"Failed to write {path}: {str(e)}")
            raise StorageError(f"cannot write {path}: {e}") from e
        return path

    def write_snapshot(self, index: int, meta: Dict[str, Any], design_state: Optional[DesignState]) -> None:
        """Persist snapshot `index` (1-based) as a DSG document plus metadata sidecar."""
        stem = snapshot_stem(index)
        if design_state is not None:
            self._write(f"{stem}.dsg.json", serialize_design_state(design_state) + "\n")
        self._write(f"{stem}.meta.json", json.dumps({**meta, "has_design_state": design_state is not None}, indent=2) + "\n")

    def write_record(self, record: Dict[str, Any]) -> None:
        self._write(RUN_RECORD_FILE, json.dumps(record, indent=2, ensure_ascii=False) + "\n")

    def write_io_log(self, exchanges: Iterable[BaseModel]) -> None:
        lines = [json.dumps(e.model_dump(mode="json"), ensure_ascii=False, sort_keys=True) for e in exchanges]
        self._write(IO_LOG_FILE, "".join(line + "\n" for line in lines))

    def write_metrics(self, metrics: Dict[str, Any]) -> None:
        self._write(METRICS_FILE, json.dumps(metrics, indent=2) + "\n")

    # --- readers used by evaluation and export ---

    def snapshot_indices(self) -> List[int]:
        return sorted(int(p.name[len("snapshot_"):len("snapshot_") + 3]) for p in self.run_dir.glob("snapshot_*.meta.json"))

    def read_snapshot_meta(self, index: int) -> Dict[str, Any]:
        return json.loads((self.run_dir / f"{snapshot_stem(index)}.meta.json").read_text(encoding="utf-8"))

    def snapshot_document_path(self, index: int) -> Path:
        return self.run_dir / f"{snapshot_stem(index)}.dsg.json"

    def read_snapshot_state(self, index: int) -> Optional[DesignState]:
        path = self.snapshot_document_path(index)
        return parse_design_state(path.read_bytes()) if path.exists() else None

    def read_record(self) -> Dict[str, Any]:
        path = self.run_dir / RUN_RECORD_FILE
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise StorageError(f"cannot read {path}: {e}") from e

    def read_io_log(self) -> List[Dict[str, Any]]:
        path = self.run_dir / IO_LOG_FILE
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
