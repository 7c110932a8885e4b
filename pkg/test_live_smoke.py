# test_live_smoke.py
import os

import pytest

from agent.config import DEFAULT_CDC_PATH, DSGFORGE_MODEL
from agent.llm_gateway import BackendConfig
from agent.workflow import FailureReason, RunConfig, WorkflowKind, run_to_completion

pytestmark = pytest.mark.skipif(not os.getenv("DSGFORGE_API_BASE"), reason="DSGFORGE_API_BASE not set")


def test_two_agent_run_against_live_endpoint(tmp_path):
    config = RunConfig(kind=WorkflowKind.TWO_AS, model_id=DSGFORGE_MODEL, cdc_path=DEFAULT_CDC_PATH,
                       research_offline=True, recursion_limit=6)
    record = run_to_completion(config, BackendConfig.from_env(), tools={})

    assert record.snapshots
    assert record.agent_io_log
    assert record.failure_reason in FailureReason
    if record.completed:
        assert record.final_state is not None
