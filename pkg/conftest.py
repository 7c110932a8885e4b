# conftest.py
import json
import shutil
import uuid
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import pytest

from agent.config import DEFAULT_CDC_PATH, DEFAULT_SCRIPT_DIR
from agent.llm_gateway import BackendConfig, LLMSession, open_backend
from design.dsg import DesignState, design_state_from_data


def uid(n: int) -> str:
    """Deterministic UUID for fixtures: uid(1) == '00000000-0000-4000-8000-000000000001'."""
    return str(uuid.UUID(int=(0x4000 << 64 | 0x8000 << 48) + n))


def node_doc(
    node_id: str,
    name: str = "Node",
    principle: Optional[str] = "photovoltaic",
    description: str = "",
    codes: Iterable[str] = (),
    linked_reqs: Iterable[str] = (),
    tags: Iterable[str] = (),
    embodiment_description: str = "",
) -> Dict[str, Any]:
    embodiment = None
    if principle is not None:
        embodiment = {"principle": principle, "description": embodiment_description}
    return {
        "node_id": node_id,
        "name": name,
        "description": description,
        "embodiment": embodiment,
        "physics_models": [{"equation": "y = f(x)", "code": code} for code in codes],
        "linked_reqs": list(linked_reqs),
        "tags": list(tags),
    }


def state_doc(nodes: List[Dict[str, Any]], edges: Iterable[Iterable[str]] = ()) -> Dict[str, Any]:
    return {"nodes": {n["node_id"]: n for n in nodes}, "edges": [list(e) for e in edges]}


def make_state(nodes: List[Dict[str, Any]], edges: Iterable[Iterable[str]] = ()) -> DesignState:
    return design_state_from_data(state_doc(nodes, edges))


def chain_state(count: int, prefix: int = 0) -> DesignState:
    """`count` nodes linked in a chain."""
    ids = [uid(prefix + i + 1) for i in range(count)]
    return make_state(
        [node_doc(i, name=f"Node {k}", codes=["print('x')"], linked_reqs=[f"SR-0{k % 9 + 1}"]) for k, i in enumerate(ids)],
        list(zip(ids, ids[1:])),
    )


def proposals_reply(states: List[DesignState]) -> str:
    from design.dsg import design_state_document
    return "Proposals:\n```json\n" + json.dumps([design_state_document(s) for s in states], indent=2) + "\n```\n"


@pytest.fixture
def cdc_text() -> str:
    return DEFAULT_CDC_PATH.read_text(encoding="utf-8")


@pytest.fixture
def script_dir(tmp_path: Path) -> Path:
    """A writable copy of the bundled canned replies."""
    target = tmp_path / "scripted"
    shutil.copytree(DEFAULT_SCRIPT_DIR, target)
    return target


@pytest.fixture
def scripted_session():
    """Factory: LLMSession over an in-memory script table."""
    def build(table: Dict[Any, str], seed: int = 0, retry_limit: int = 2, max_completion_tokens: int = 60000) -> LLMSession:
        config = BackendConfig.scripted(table=table, retry_limit=retry_limit)
        return LLMSession(open_backend(config), "test-model", 0.0, seed, max_completion_tokens, retry_limit)
    return build


@pytest.fixture
def no_tools() -> Dict[str, Any]:
    return {}
