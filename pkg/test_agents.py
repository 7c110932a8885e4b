# test_agents.py
import json
import random

import pytest

from agent.agents import (
    ResearchRequest,
    execute_worker_task,
    extract_code,
    extract_requirements,
    generate_proposals,
    is_calculation_task,
    meta_review,
    orchestrate_research,
    rank,
    reflect,
    reflect_and_decide,
    refine_code,
    run_research_plan,
)
from agent.prompts import TEMPLATE_DIR, AgentRole, PromptContext, assemble_prompt, system_prompt
from agent.schemas import Critique, DecisionStatus, RankingOutput, ResearchPlan, ResearchTask, ScoreEntry
from conftest import chain_state, make_state, node_doc, proposals_reply, uid
from design.dsg import serialize_design_state
from utils.arxiv_client import ArxivClient, parse_feed
from utils.errors import (
    DialogueAborted,
    InvalidSelection,
    MissingContext,
    SchemaExhausted,
    ToolUnavailable,
)

CDC = "# Pump\nSR-01 deliver water.\nFINALIZED"


def three_proposals():
    return [chain_state(2, 0), chain_state(3, 10), chain_state(1, 20)]


def review_context(proposals=None, **kwargs) -> PromptContext:
    proposals = three_proposals() if proposals is None else proposals
    defaults = dict(
        cdc=CDC,
        supervisor_instructions="Cover SR-01.",
        proposals=proposals,
        critiques=[Critique(proposal_index=i, text=f"critique {i}") for i in range(len(proposals))],
        ranking=RankingOutput(scores=[ScoreEntry(proposal_index=i, score=5) for i in range(len(proposals))]),
    )
    defaults.update(kwargs)
    return PromptContext(**defaults)


# --- prompts ---

@pytest.mark.parametrize("role", list(AgentRole))
def test_system_prompt_is_bundled_text(role):
    assert system_prompt(role) == (TEMPLATE_DIR / f"{role.value}.txt").read_text(encoding="utf-8")


def test_supervisor_first_step_has_two_messages():
    messages = assemble_prompt(AgentRole.SUPERVISOR, PromptContext(cdc=CDC))

    assert len(messages) == 2
    assert messages[0].role.value == "system"
    assert messages[0].content == system_prompt(AgentRole.SUPERVISOR)
    assert CDC in messages[1].content
    assert '"stop"' in messages[1].content


def test_ranker_without_proposals_is_missing_context():
    with pytest.raises(MissingContext, match="proposals"):
        assemble_prompt(AgentRole.RANKER, PromptContext(cdc=CDC, supervisor_instructions="x"))


def test_reflector_enumerates_proposal_indices():
    messages = assemble_prompt(AgentRole.REFLECTOR, review_context())
    proposals_message = next(m.content for m in messages if "Design-State Graph proposals" in m.content)

    for i in range(3):
        assert f"Proposal index {i}:" in proposals_message
    assert "Proposal index 3:" not in proposals_message


def test_meta_reviewer_sees_full_documents_with_scores():
    messages = assemble_prompt(AgentRole.META_REVIEWER, review_context())
    body = messages[1].content

    assert uid(1) in body
    assert "Reflection feedback: critique 0" in body
    assert "Ranking: 5/10" in body


# --- extractor ---

def finalized_doc(open_questions=()):
    return json.dumps({"project_name": "Pump", "open_questions": list(open_questions)})


class ScriptedUser:
    def __init__(self, turns):
        self.turns = list(turns)
        self.seen = []

    def __call__(self, last_reply):
        self.seen.append(last_reply)
        return self.turns.pop(0) if self.turns else None


def test_extractor_single_round(scripted_session):
    session = scripted_session({("extractor", "any", "any"): finalized_doc() + "\nFINALIZED"})
    user = ScriptedUser(["Here is my CDC."])

    doc = extract_requirements(user, session)
    assert doc.finalized
    assert user.seen == [None]
    assert len(session.io_log) == 1


def test_extractor_two_rounds(scripted_session):
    session = scripted_session({
        ("extractor", 0, "any"): finalized_doc(["What flow-rate?"]),
        ("extractor", 1, "any"): finalized_doc() + "\n**FINALIZED**",
    })
    user = ScriptedUser(["I need clean water.", "10 L/h."])

    doc = extract_requirements(user, session)
    assert doc.finalized
    assert doc.open_questions == []
    assert len(user.seen) == 2
    assert "What flow-rate?" in user.seen[1]


def test_extractor_ignores_finalized_with_open_questions(scripted_session):
    session = scripted_session({
        ("extractor", 0, "any"): finalized_doc(["Budget?"]) + "\nFINALIZED",
        ("extractor", 1, "any"): finalized_doc() + "\nFINALIZED",
    })
    user = ScriptedUser(["Water.", "500 dollars."])

    extract_requirements(user, session)
    assert len(session.io_log) == 2


def test_extractor_aborts_when_driver_stops(scripted_session):
    session = scripted_session({("extractor", "any", "any"): finalized_doc(["Budget?"])})
    with pytest.raises(DialogueAborted):
        extract_requirements(ScriptedUser(["Water."]), session)


# --- generator ---

def generator_context():
    return PromptContext(cdc=CDC, supervisor_instructions="Three variants.")


def test_generator_three_proposals(scripted_session):
    session = scripted_session({("generator", "any", "any"): proposals_reply(three_proposals())})
    result = generate_proposals(generator_context(), session)

    assert len(result.proposals) == 3
    assert result.diagnostics == []


def test_generator_drops_malformed_proposal(scripted_session):
    valid = proposals_reply(three_proposals()[:2])
    broken = json.dumps({"nodes": {"n1": {"node_id": "n1", "name": "x"}}, "edges": []})
    session = scripted_session({("generator", "any", "any"): valid + "\nAnd a third:\n" + broken})
    diagnostics = []

    result = generate_proposals(generator_context(), session, diagnostics=diagnostics)
    assert len(result.proposals) == 2
    assert any("dropped malformed" in d for d in diagnostics)
    assert any("expected 3 proposals, got 2" in d for d in diagnostics)


def test_generator_keeps_first_three(scripted_session):
    states = three_proposals() + [chain_state(4, 30)]
    session = scripted_session({("generator", "any", "any"): proposals_reply(states)})

    result = generate_proposals(generator_context(), session)
    assert [len(s.nodes) for s in result.proposals] == [2, 3, 1]


def test_generator_without_valid_proposals_exhausts(scripted_session):
    session = scripted_session({("generator", "any", "any"): "I could not produce a design."})
    with pytest.raises(SchemaExhausted):
        generate_proposals(generator_context(), session)
    assert len(session.io_log) == 3


def test_generator_research_request(scripted_session):
    session = scripted_session({("generator", "any", "any"): '{"research_request": "UF membrane flux at 1 bar?"}'})

    result = generate_proposals(generator_context(), session, allow_research=True)
    assert isinstance(result, ResearchRequest)
    assert result.requesting_role == "generator"


# --- coder ---

def coded(sentinel):
    return f"model.py\n```python\nprint('{sentinel}')\n```\n"


def test_coder_without_models_makes_no_calls(scripted_session):
    session = scripted_session({})
    state = make_state([node_doc(uid(1))])

    assert refine_code(state, session) == state
    assert session.io_log == []


def test_coder_rewrites_each_model_in_node_order(scripted_session):
    session = scripted_session({("coder", 0, "any"): coded("first"), ("coder", 1, "any"): coded("second")})
    state = make_state([node_doc(uid(2), codes=["old b"]), node_doc(uid(1), codes=["old a"])], [(uid(1), uid(2))])

    refined = refine_code(state, session)
    assert refined.nodes[uid(1)].physics_models[0].code == "print('first')\n"
    assert refined.nodes[uid(2)].physics_models[0].code == "print('second')\n"
    assert len(session.io_log) == 2

    # only code fields differ
    strip = lambda s: serialize_design_state(s).replace("print('first')\\n", "old a").replace("print('second')\\n", "old b")
    assert strip(refined) == serialize_design_state(state)


def test_coder_keeps_original_code_on_exhaustion(scripted_session):
    session = scripted_session({("coder", 0, "any"): coded("new"), ("coder", "any", "any"): "no code block"})
    state = make_state([node_doc(uid(1), codes=["old a"]), node_doc(uid(2), codes=["old b"])])
    diagnostics = []

    refined = refine_code(state, session, diagnostics)
    assert refined.nodes[uid(1)].physics_models[0].code == "print('new')\n"
    assert refined.nodes[uid(2)].physics_models[0].code == "old b"
    assert len(diagnostics) == 1


def test_extract_code_flattens_multiple_files():
    text = "solar.py\n```python\nA = 1\n```\nmain.py\n```py\nimport solar\n```"
    assert extract_code(text) == "# --- file: solar.py ---\nA = 1\n\n# --- file: main.py ---\nimport solar\n"


# --- reflector / ranker / meta-reviewer ---

def critiques_reply(count, flag_research=False):
    return json.dumps({"critiques": [
        {"proposal_index": i, "text": f"c{i}", "research_requested": flag_research and i == 0} for i in range(count)
    ]})


@pytest.mark.parametrize("count", [1, 3])
def test_reflect_one_critique_per_proposal(scripted_session, count):
    session = scripted_session({("reflector", "any", "any"): critiques_reply(count)})
    output = reflect(review_context(three_proposals()[:count]), session)

    assert [c.proposal_index for c in output.critiques] == list(range(count))
    assert not output.research_requested


def test_reflect_parses_research_flag(scripted_session):
    session = scripted_session({("reflector", "any", "any"): critiques_reply(3, flag_research=True)})
    assert reflect(review_context(), session).research_requested


def scores_reply(scores):
    return json.dumps({"scores": [{"proposal_index": i, "score": s} for i, s in enumerate(scores)]})


def test_rank_stores_scores_verbatim(scripted_session):
    session = scripted_session({("ranker", "any", "any"): scores_reply([7, 9, 4])})
    assert [s.score for s in rank(review_context(), session).scores] == [7, 9, 4]


def test_rank_clamps_out_of_range(scripted_session):
    session = scripted_session({("ranker", "any", "any"): scores_reply([12, 5, -1])})
    diagnostics = []

    output = rank(review_context(), session, diagnostics)
    assert [s.score for s in output.scores] == [10, 5, 0]
    assert len(diagnostics) == 2


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), float("-inf")])
def test_rank_rejects_non_finite_scores(scripted_session, bad):
    session = scripted_session({
        ("ranker", 0, "any"): scores_reply([bad, 5, 4]),
        ("ranker", 1, "any"): scores_reply([6, 5, 4]),
    })
    diagnostics = []

    output = rank(review_context(), session, diagnostics)
    assert [s.score for s in output.scores] == [6, 5, 4]
    assert len(session.io_log) == 2
    assert diagnostics == []


def test_rank_non_finite_scores_exhaust(scripted_session):
    session = scripted_session({("ranker", "any", "any"): scores_reply([float("nan"), 5, 4])}, retry_limit=1)
    with pytest.raises(SchemaExhausted):
        rank(review_context(), session)


def test_rank_missing_entry_retries_then_exhausts(scripted_session):
    session = scripted_session({("ranker", "any", "any"): scores_reply([7, 9])}, retry_limit=1)
    with pytest.raises(SchemaExhausted):
        rank(review_context(), session)
    assert len(session.io_log) == 2

    session = scripted_session({("ranker", 0, "any"): scores_reply([7, 9]), ("ranker", 1, "any"): scores_reply([7, 9, 4])})
    assert len(rank(review_context(), session).scores) == 3


def meta_reply(selected, statuses):
    return json.dumps({
        "selected_proposal_index": selected,
        "detailed_summary_for_graph": "notes",
        "decisions": [{"proposal_index": i, "final_status": s, "reason": ""} for i, s in enumerate(statuses)],
    })


def test_meta_review_accepts_single_selection(scripted_session):
    session = scripted_session({("meta_reviewer", "any", "any"): meta_reply(1, ["rejected", "selected", "needs_iteration"])})
    output = meta_review(review_context(), session)

    assert output.selected_proposal_index == 1
    assert output.decisions[2].final_status is DecisionStatus.NEEDS_ITERATION


def test_meta_review_out_of_range_is_invalid_selection(scripted_session):
    session = scripted_session({("meta_reviewer", "any", "any"): json.dumps({
        "selected_proposal_index": 5,
        "decisions": [{"proposal_index": 5, "final_status": "selected"}],
    })})
    with pytest.raises(InvalidSelection):
        meta_review(review_context(), session)
    assert len(session.io_log) == 3


def test_meta_review_out_of_range_index_with_mismatched_decision(scripted_session):
    session = scripted_session({("meta_reviewer", "any", "any"): meta_reply(5, ["rejected", "selected", "rejected"])})
    with pytest.raises(InvalidSelection):
        meta_review(review_context(), session)
    assert len(session.io_log) == 3


def test_meta_review_two_selected_is_retried(scripted_session):
    session = scripted_session({
        ("meta_reviewer", 0, "any"): meta_reply(0, ["selected", "selected", "rejected"]),
        ("meta_reviewer", 1, "any"): meta_reply(0, ["selected", "rejected", "rejected"]),
    })
    assert meta_review(review_context(), session).selected_proposal_index == 0
    assert len(session.io_log) == 2


def verdict_reply(selected, statuses, terminate=True):
    return json.dumps({
        "critiques": [{"proposal_index": i, "text": f"c{i}"} for i in range(len(statuses))],
        "selected_index": selected,
        "statuses": [{"proposal_index": i, "status": s} for i, s in enumerate(statuses)],
        "terminate": terminate,
    })


def test_two_agent_verdict_accepts_selection(scripted_session):
    session = scripted_session({("reflector_2as", "any", "any"): verdict_reply(2, ["rejected", "rejected", "selected"])})
    verdict = reflect_and_decide(review_context(), session)

    assert verdict.selected_index == 2
    assert verdict.terminate


def test_two_agent_verdict_out_of_range_with_mismatched_status(scripted_session):
    session = scripted_session({("reflector_2as", "any", "any"): verdict_reply(4, ["selected", "rejected", "rejected"])})
    with pytest.raises(InvalidSelection):
        reflect_and_decide(review_context(), session)
    assert len(session.io_log) == 3


# --- orchestrator / worker ---

def plan_reply(count, response=""):
    return json.dumps({"tasks": [{"topic": f"topic {i}", "description": "d"} for i in range(count)], "response": response})


def test_orchestrator_accepts_plan(scripted_session):
    session = scripted_session({("orchestrator", "any", "any"): plan_reply(2)})
    assert len(orchestrate_research("Need data", session).tasks) == 2


def test_orchestrator_truncates_to_three(scripted_session):
    session = scripted_session({("orchestrator", "any", "any"): plan_reply(4)})
    diagnostics = []

    plan = orchestrate_research("Need data", session, "reflector", diagnostics)
    assert [t.topic for t in plan.tasks] == ["topic 0", "topic 1", "topic 2"]
    assert len(diagnostics) == 1


def test_orchestrator_without_tasks(scripted_session):
    session = scripted_session({("orchestrator", "any", "any"): plan_reply(0, "No research needed.")})
    plan = orchestrate_research("Need data", session)

    assert plan.tasks == []
    assert plan.response == "No research needed."
    assert run_research_plan(plan, session) == []


class FakeArxivTool:
    def __init__(self, count=3):
        self.queries = []
        self.count = count

    def invoke(self, payload):
        self.queries.append(payload["query"])
        return [
            {"title": f"Paper {i}", "abstract": f"Abstract {i}", "link": f"http://arxiv.org/abs/2501.0000{i}"}
            for i in range(self.count)
        ]


class ExplodingTool:
    def invoke(self, payload):
        raise AssertionError("tool should not be called")


WORKER_REPLY = json.dumps({"findings": "UF flux is 20-40 L/m2/h.", "design_insight": "Use 0.5 m2.", "insufficient": False})


def test_worker_cites_search_results(scripted_session):
    session = scripted_session({("worker", "any", "any"): WORKER_REPLY})
    tool = FakeArxivTool()
    task = ResearchTask(topic="ultrafiltration membrane flux literature", description="Find typical flux values.")

    report = execute_worker_task(task, session, tools={"arxiv_search": tool}, offline=False)
    assert tool.queries == ["ultrafiltration membrane flux literature"]
    for i in range(3):
        assert f"http://arxiv.org/abs/2501.0000{i}" in report.findings
    assert "Paper 0" in session.io_log[0].request[-1]["content"]


def test_worker_offline_states_insufficiency(scripted_session):
    session = scripted_session({})
    report = execute_worker_task(ResearchTask(topic="membrane papers"), session, tools={"arxiv_search": FakeArxivTool()}, offline=True)

    assert report.insufficient
    assert "insufficient information" in report.findings.lower()
    assert session.io_log == []


def test_worker_unavailable_tool_states_insufficiency(scripted_session):
    class Unreachable:
        def invoke(self, payload):
            raise ToolUnavailable("ArXiv search unavailable: timeout")

    report = execute_worker_task(ResearchTask(topic="membrane papers"), scripted_session({}), tools={"arxiv": Unreachable()}, offline=False)
    assert report.states_insufficiency
    assert "timeout" in report.findings


def test_worker_calculation_uses_backend_only(scripted_session):
    session = scripted_session({("worker", "any", "any"): WORKER_REPLY})
    task = ResearchTask(topic="Estimate pump power", description="Compute hydraulic power for 12 L/h at 15 m head.")

    assert is_calculation_task(task)
    report = execute_worker_task(task, session, tools={"arxiv_search": ExplodingTool()}, offline=False)
    assert report.findings == "UF flux is 20-40 L/m2/h."


def test_research_plan_parallel_keeps_order(scripted_session):
    session = scripted_session({("worker", "any", "any"): WORKER_REPLY})
    plan = ResearchPlan(tasks=[ResearchTask(topic=f"paper search {i}") for i in range(3)])

    reports = run_research_plan(plan, session, tools={"arxiv_search": FakeArxivTool(count=1)}, offline=False, parallelism=3)
    assert len(reports) == 3
    assert len(session.io_log) == 3


ATOM_FEED = """<?xml version="1.0" encoding="UTF-8"?>
<feed xmlns="http://www.w3.org/2005/Atom">
  <title>ArXiv Query</title>
  <entry>
    <id>http://arxiv.org/abs/2401.00001v1</id>
    <title>Solar Driven
      Ultrafiltration</title>
    <summary>  We study small   membranes. </summary>
    <link href="http://arxiv.org/abs/2401.00001v1" rel="alternate" type="text/html"/>
  </entry>
  <entry>
    <id>http://arxiv.org/abs/2401.00002v1</id>
    <title>Battery Sizing</title>
    <summary>Off-grid storage.</summary>
    <link href="http://arxiv.org/abs/2401.00002v1" rel="alternate" type="text/html"/>
  </entry>
</feed>
"""


def test_parse_feed():
    entries = parse_feed(ATOM_FEED)

    assert [e.title for e in entries] == ["Solar Driven Ultrafiltration", "Battery Sizing"]
    assert entries[0].abstract == "We study small membranes."
    assert entries[1].link == "http://arxiv.org/abs/2401.00002v1"


def test_arxiv_client_query_parameters():
    class Response:
        text = ATOM_FEED

        def raise_for_status(self):
            pass

    class Session:
        def get(self, url, params, timeout):
            self.params = params
            return Response()

    session = Session()
    entries = ArxivClient(session=session).search("solar water", max_results=1)

    assert session.params == {"search_query": "all:solar water", "start": 0, "max_results": 1}
    assert len(entries) == 1


# --- randomized selection invariants ---

def test_randomized_selection_and_caps(scripted_session):
    rng = random.Random(1234)
    for trial in range(1000):
        count = rng.randint(1, 3)
        proposals = three_proposals()[:count]
        selected = rng.randrange(count)
        statuses = [rng.choice(["rejected", "needs_iteration"]) for _ in range(count)]
        statuses[selected] = "selected"
        generated = rng.randint(1, 6)
        session = scripted_session({
            ("ranker", "any", "any"): scores_reply([round(rng.uniform(-5, 15), 2) for _ in range(count)]),
            ("meta_reviewer", "any", "any"): meta_reply(selected, statuses),
            ("orchestrator", "any", "any"): plan_reply(rng.randint(0, 6)),
            ("generator", "any", "any"): proposals_reply([chain_state(1, 100 + k) for k in range(generated)]),
        }, seed=trial)
        context = review_context(proposals)

        ranking = rank(context, session)
        assert all(0 <= s.score <= 10 for s in ranking.scores)
        review = meta_review(context, session)
        assert sum(d.final_status is DecisionStatus.SELECTED for d in review.decisions) == 1
        assert review.selected_proposal_index == selected
        assert len(orchestrate_research("q", session).tasks) <= 3
        assert 1 <= len(generate_proposals(generator_context(), session).proposals) <= 3
