# test_dsg.py
import json
import random

import pytest

from conftest import make_state, node_doc, state_doc, uid
from design.dsg import (
    DesignState,
    canonicalize,
    graph_size,
    mutate_subtree,
    parse_design_state,
    serialize_design_state,
    serialize_node,
    to_dot,
    validate_graph,
)
from utils.errors import MalformedDocument, SchemaViolation, UnknownNode

STATUSES = ["draft", "reviewed", "validated"]


def random_document(rng: random.Random) -> dict:
    count = rng.randint(0, 8)
    ids = [uid(rng.randint(1, 10_000) * 16 + i) for i in range(count)]
    nodes = {}
    for i, node_id in enumerate(ids):
        embodiment = None
        if rng.random() < 0.8:
            embodiment = {
                "principle": rng.choice(["photovoltaic", "ultrafiltration", "UV-C", ""]),
                "description": rng.choice(["", "a description", "ünïcode ✓"]),
                "design_parameters": {
                    f"p{k}": {"value": round(rng.uniform(-100, 100), 3), "unit": rng.choice(["m", "W", ""])}
                    for k in rng.sample(range(10), rng.randint(0, 3))
                },
                "cost_estimate": rng.choice([None, 12.5]),
                "mass_estimate": rng.choice([None, 3.0]),
                "status": rng.choice(STATUSES),
            }
        nodes[node_id] = {
            "node_id": node_id,
            "node_kind": rng.choice(["", "subsystem", "component"]),
            "name": f"Node {i}",
            "description": rng.choice(["", "Pumps water (SR-01)."]),
            "embodiment": embodiment,
            "physics_models": [
                {
                    "equation": "P = G * A * eta",
                    "code": rng.choice(["", "print('hi')\n"]),
                    "assumptions": rng.sample(["steady state", "no losses", "AM1.5"], rng.randint(0, 2)),
                    "status": rng.choice(STATUSES),
                }
                for _ in range(rng.randint(0, 2))
            ],
            "linked_reqs": rng.sample(["SR-01", "SR-02", "SN-1"], rng.randint(0, 2)),
            "verification_plan": "",
            "maturity": "",
            "tags": [],
        }
    edges = []
    if count >= 2:
        for _ in range(rng.randint(0, 2 * count)):
            source, target = rng.sample(ids, 2)
            edges.append([source, target])
        if edges and rng.random() < 0.5:
            edges.append(list(edges[0]))  # duplicate
    # shuffle node-map insertion order
    items = list(nodes.items())
    rng.shuffle(items)
    return {"nodes": dict(items), "edges": edges}


VALID_DOCUMENTS = [json.dumps(random_document(random.Random(seed))) for seed in range(60)]


@pytest.mark.parametrize("text", VALID_DOCUMENTS)
def test_round_trip_is_canonical_and_stable(text):
    state = parse_design_state(text)
    serialized = serialize_design_state(state)

    assert serialized == canonicalize(text)
    assert parse_design_state(serialized) == state
    assert serialize_design_state(parse_design_state(serialized)) == serialized
    assert [e.as_pair() for e in state.edges] == [tuple(e) for e in json.loads(text)["edges"]]


def test_single_node_document():
    state = parse_design_state(json.dumps(state_doc([node_doc(uid(1), principle=None)])))

    assert len(state.nodes) == 1
    assert len(state.edges) == 0
    assert state.nodes[uid(1)].embodiment is None


def test_insertion_order_does_not_change_bytes():
    a, b = node_doc(uid(2), "B"), node_doc(uid(1), "A")
    first = serialize_design_state(make_state([a, b]))
    second = serialize_design_state(make_state([b, a]))

    assert first == second
    assert list(json.loads(first)["nodes"]) == [uid(1), uid(2)]


def test_three_nodes_two_edges_reparse():
    ids = [uid(i) for i in (1, 2, 3)]
    state = make_state([node_doc(i) for i in ids], [(ids[0], ids[1]), (ids[1], ids[2])])

    reparsed = parse_design_state(serialize_design_state(state))
    assert len(reparsed.nodes) == 3
    assert len(reparsed.edges) == 2


def test_bytes_input_and_node_list_form():
    doc = {"nodes": [node_doc(uid(1)), node_doc(uid(2))], "edges": [[uid(1), uid(2)]]}
    state = parse_design_state(json.dumps(doc).encode("utf-8"))

    assert sorted(state.nodes) == [uid(1), uid(2)]


def _valid_text() -> str:
    ids = [uid(1), uid(2)]
    return json.dumps(state_doc([node_doc(i, codes=["print(1)"]) for i in ids], [ids]))


def _with(mutator) -> str:
    doc = json.loads(_valid_text())
    mutator(doc)
    return json.dumps(doc)


def _set_node_field(field, value):
    def mutate(doc):
        doc["nodes"][uid(1)][field] = value
    return mutate


TRUNCATED = [_valid_text()[:cut] for cut in (0, 1, 10, 50, 100, -1, -2)]

MALFORMED = TRUNCATED + [
    "not json at all",
    "{'nodes': {}, 'edges': []}",
    b"\xff\xfe\x00garbage",
]

SCHEMA_VIOLATIONS = [
    json.dumps([]),
    json.dumps("a string"),
    json.dumps({"edges": []}),
    json.dumps({"nodes": {}}),
    _with(lambda d: d["edges"].append([uid(1), uid(9)])),           # dangling edge
    _with(lambda d: d["edges"].append([uid(1), uid(1)])),           # self-loop
    _with(lambda d: d["edges"].append([uid(1), uid(2), uid(1)])),   # not a pair
    _with(lambda d: d["nodes"].update({"n1": {**node_doc(uid(3)), "node_id": "n1"}})),  # bad UUID
    _with(lambda d: d["nodes"][uid(1)].update({"node_id": uid(3)})),  # key mismatch
    _with(lambda d: d["nodes"][uid(1)]["physics_models"][0].update({"status": "approved"})),  # bad status flag
    _with(lambda d: d["nodes"][uid(1)]["embodiment"].update({"status": "final"})),
    _with(lambda d: d["nodes"][uid(1)]["embodiment"].pop("principle")),
    _with(lambda d: d["nodes"][uid(1)]["embodiment"].update({"design_parameters": {"x": {"value": "big"}}})),
    _with(_set_node_field("name", None)),
    _with(lambda d: d["nodes"][uid(1)].pop("node_id")),
]


@pytest.mark.parametrize("text", MALFORMED)
def test_malformed_documents(text):
    with pytest.raises(MalformedDocument):
        parse_design_state(text)


@pytest.mark.parametrize("text", SCHEMA_VIOLATIONS)
def test_schema_violations(text):
    with pytest.raises(SchemaViolation):
        parse_design_state(text)


def test_non_finite_parameter_rejected():
    text = _valid_text().replace('"description": ""}', '"description": "", "design_parameters": {"x": NaN}}', 1)
    with pytest.raises(SchemaViolation):
        parse_design_state(text)


def test_validate_graph_orphan():
    state = make_state([node_doc(uid(1))])
    diagnostics = validate_graph(state)

    assert diagnostics.orphan_nodes == (uid(1),)
    assert diagnostics.cycles == ()
    assert diagnostics.duplicate_edges == ()


def test_validate_graph_cycle():
    state = make_state([node_doc(uid(1)), node_doc(uid(2))], [(uid(2), uid(1)), (uid(1), uid(2))])
    assert validate_graph(state).cycles == ((uid(1), uid(2)),)


def test_validate_graph_duplicates_and_purity():
    state = make_state([node_doc(uid(1)), node_doc(uid(2))], [(uid(1), uid(2)), (uid(1), uid(2))])
    before = serialize_design_state(state)
    diagnostics = validate_graph(state)

    assert [e.as_pair() for e in diagnostics.duplicate_edges] == [(uid(1), uid(2))]
    assert not diagnostics.is_clean
    assert serialize_design_state(state) == before
    assert len(state.edges) == 2


def test_mutate_subtree_is_local():
    ids = [uid(i) for i in (1, 2, 3)]
    state = make_state([node_doc(i, codes=["old"]) for i in ids], [(ids[0], ids[1])])
    models = [state.nodes[ids[0]].physics_models[0].model_copy(update={"code": "new"})]

    updated = mutate_subtree(state, ids[0], {"physics_models": models})

    assert updated.nodes[ids[0]].physics_models[0].code == "new"
    for other in ids[1:]:
        assert serialize_node(updated.nodes[other]) == serialize_node(state.nodes[other])
    assert updated.edges == state.edges
    assert state.nodes[ids[0]].physics_models[0].code == "old"


def test_mutate_unknown_node():
    with pytest.raises(UnknownNode):
        mutate_subtree(make_state([node_doc(uid(1))]), "zz", {"name": "x"})


def test_mutate_rejects_foreign_fields():
    state = make_state([node_doc(uid(1))])
    with pytest.raises(SchemaViolation):
        mutate_subtree(state, uid(1), {"edges": []})
    with pytest.raises(SchemaViolation):
        mutate_subtree(state, uid(1), {"node_id": uid(2)})


def test_disjoint_mutations_commute():
    ids = [uid(i) for i in (1, 2, 3)]
    state = make_state([node_doc(i) for i in ids])
    patches = [(ids[0], {"name": "first"}), (ids[2], {"description": "third"})]

    forward = state
    for node_id, patch in patches:
        forward = mutate_subtree(forward, node_id, patch)
    backward = state
    for node_id, patch in reversed(patches):
        backward = mutate_subtree(backward, node_id, patch)

    assert serialize_design_state(forward) == serialize_design_state(backward)


@pytest.mark.parametrize("count", [0, 1, 6])
def test_graph_size(count):
    state = make_state([node_doc(uid(i + 1)) for i in range(count)])
    assert graph_size(state) == count


def test_dot_export_lines():
    ids = [uid(i) for i in (1, 2, 3, 4)]
    state = make_state(
        [node_doc(i, name=f'Pump "{k}"') for k, i in enumerate(ids)],
        [(ids[0], ids[1]), (ids[1], ids[2]), (ids[1], ids[2])],
    )
    dot = to_dot(state)
    lines = dot.strip().splitlines()

    assert lines[0] == "digraph DSG {"
    assert sum("[label=" in line for line in lines) == 4
    assert sum("->" in line for line in lines) == 3
    assert lines.count(f'  "{ids[1]}" -> "{ids[2]}";') == 2
    assert '\\"0\\"' in dot


def test_empty_state_is_valid():
    assert graph_size(DesignState()) == 0
    assert parse_design_state('{"nodes": {}, "edges": []}') == DesignState()
