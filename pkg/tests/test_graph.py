"""Graph IR, validation, liveness bounds, peak evaluator, taxonomy."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MB, chain_graph, diamond_doc
from memplan.graph import (
    Graph,
    GraphFormatError,
    OpKind,
    OpNode,
    ScheduleError,
    TensorCategory,
    TensorInfo,
    asap_alap,
    classify_tensors,
    graph_to_doc,
    load_graph,
    pack_schedule,
    peak_memory,
    sequential_schedule,
    validate_graph,
    validate_schedule,
    weight_update_branches,
)
from oracles import all_topological_orders, naive_closure_sets


def test_load_two_op_chain():
    g = load_graph(
        {
            "ops": [
                {"id": 0, "name": "A", "kind": "forward", "inputs": [], "outputs": [7]},
                {"id": 1, "name": "B", "kind": "forward", "inputs": [7], "outputs": []},
            ],
            "tensors": [{"id": 7, "size_bytes": 4}],
        }
    )
    assert g.n_ops == 2 and g.n_tensors == 1
    assert g.tensors[0].producer == 0 and g.tensors[0].consumers == (1,)


def test_load_dangling_consumer_rejected():
    doc = {
        "ops": [{"id": 0, "name": "A", "kind": "forward", "inputs": [99], "outputs": [0]}],
        "tensors": [{"id": 0, "size_bytes": 4}],
    }
    with pytest.raises(GraphFormatError):
        load_graph(doc)


def test_load_duplicate_op_id_rejected():
    doc = {
        "ops": [
            {"id": 3, "name": "A", "kind": "forward", "inputs": [], "outputs": [0]},
            {"id": 3, "name": "B", "kind": "forward", "inputs": [0], "outputs": []},
        ],
        "tensors": [{"id": 0, "size_bytes": 4}],
    }
    with pytest.raises(GraphFormatError):
        load_graph(doc)


def test_load_diamond(diamond):
    assert diamond.n_ops == 4 and diamond.n_tensors == 4
    assert validate_graph(diamond).ok


def test_roundtrip_serialization(diamond):
    again = load_graph(graph_to_doc(diamond))
    assert again == load_graph(graph_to_doc(again))
    assert [op.name for op in again.ops] == ["A", "B", "C", "D"]
    assert [t.size for t in again.tensors] == [t.size for t in diamond.tensors]


def test_validate_cycle():
    # D -> A edge added to the diamond via an extra tensor
    ops = [
        OpNode(0, "A", OpKind.FORWARD, (4,), (0, 1)),
        OpNode(1, "B", OpKind.FORWARD, (1,), (2,)),
        OpNode(2, "C", OpKind.FORWARD, (0,), (3,)),
        OpNode(3, "D", OpKind.FORWARD, (2, 3), (4,)),
    ]
    tensors = [
        TensorInfo(0, 60 * MB, 0, (2,)),
        TensorInfo(1, 20 * MB, 0, (1,)),
        TensorInfo(2, 40 * MB, 1, (3,)),
        TensorInfo(3, 10 * MB, 2, (3,)),
        TensorInfo(4, 1 * MB, 3, (0,)),
    ]
    report = validate_graph(Graph(tuple(ops), tuple(tensors)))
    assert "cycle" in report.kinds()


def test_validate_zero_size():
    g = Graph(
        (OpNode(0, "A", OpKind.FORWARD, (), (0,)),),
        (TensorInfo(0, 0, 0, ()),),
    )
    assert "zero_size" in validate_graph(g).kinds()


def test_asap_alap_chain():
    g = chain_graph(3)
    b = asap_alap(g)
    assert b.asap == (0, 1, 2) and b.alap == (0, 1, 2)


def test_asap_alap_diamond(diamond):
    b = asap_alap(diamond)
    assert b.asap == (0, 1, 1, 3)
    assert b.alap == (0, 2, 2, 3)


def test_asap_alap_isolated_op():
    g = Graph((OpNode(0, "A", OpKind.FORWARD, (), ()),), ())
    b = asap_alap(g)
    assert b.asap == (0,) and b.alap == (0,)


def test_peak_diamond_definition_order(diamond):
    peak, argmax = peak_memory(diamond, sequential_schedule(diamond, (0, 1, 2, 3)))
    assert peak == 120 * MB
    assert argmax == 1  # while B runs


def test_peak_diamond_best_order(diamond):
    peak, _ = peak_memory(diamond, sequential_schedule(diamond, (0, 2, 1, 3)))
    assert peak == 90 * MB


def test_peak_single_op():
    g = Graph(
        (OpNode(0, "A", OpKind.FORWARD, (), (0,)),),
        (TensorInfo(0, 8, 0, ()),),
    )
    assert peak_memory(g, sequential_schedule(g, (0,))) == (8, 0)


def test_invalid_schedule_rejected(diamond):
    from memplan.graph import Schedule

    bad = Schedule(order=(3, 0, 1, 2), timesteps=(1, 2, 3, 0))
    with pytest.raises(ScheduleError):
        validate_schedule(diamond, bad)
    with pytest.raises(ScheduleError):
        validate_schedule(diamond, Schedule(order=(0, 1, 2), timesteps=(0, 1, 2)))


def test_pack_schedule_groups_respect_dependencies(diamond):
    s = pack_schedule(diamond, (0, 1, 2, 3), ops_per_step=2)
    validate_schedule(diamond, s)
    # B and C are independent and may share a step; A and D may not join them.
    assert s.timesteps[1] == s.timesteps[2] == 1
    assert s.timesteps[0] == 0 and s.timesteps[3] == 2
    peak, _ = peak_memory(diamond, s)
    assert peak == 60 * MB + 20 * MB + 40 * MB + 10 * MB  # both branches coexist


def _training_chain() -> Graph:
    ops = (
        OpNode(0, "f", OpKind.FORWARD, (), (0, 1)),
        OpNode(1, "f2", OpKind.FORWARD, (1,), (2,)),
        OpNode(2, "loss", OpKind.LOSS, (2,), (3,)),
        OpNode(3, "b", OpKind.BACKWARD, (3, 0), (4,)),
        OpNode(4, "wu", OpKind.WEIGHT_UPDATE, (4,), ()),
    )
    tensors = (
        TensorInfo(0, 4 * MB, 0, (3,)),   # forward -> backward: activation
        TensorInfo(1, 2 * MB, 0, (1,)),   # forward -> forward: temporary
        TensorInfo(2, 2 * MB, 1, (2,)),
        TensorInfo(3, 1 * MB, 2, (3,)),   # loss-produced seed: temporary
        TensorInfo(4, 3 * MB, 3, (4,)),   # backward -> weight_update: gradient
    )
    return Graph(ops, tensors)


def test_classify_tensors_rules():
    g = _training_chain()
    cats = classify_tensors(g)
    assert cats[0] is TensorCategory.ACTIVATION
    assert cats[1] is TensorCategory.TEMPORARY_BUFFER
    assert cats[3] is TensorCategory.TEMPORARY_BUFFER
    assert cats[4] is TensorCategory.GRADIENT


def test_classify_honors_pretagged_weight():
    g = _training_chain()
    tensors = list(g.tensors)
    tensors[1] = TensorInfo(1, 2 * MB, 0, (1,), TensorCategory.WEIGHT)
    cats = classify_tensors(Graph(g.ops, tuple(tensors)))
    assert cats[1] is TensorCategory.WEIGHT


def test_weight_update_branch_detection():
    g = _training_chain()
    branches = weight_update_branches(g)
    assert len(branches) == 1
    assert branches[0].ops == (4,)
    assert branches[0].gradients == (4,)
    assert branches[0].grad_bytes == 3 * MB


def test_peak_chain_order_insensitive():
    g = chain_graph(5)
    orders = list(all_topological_orders(g))
    assert len(orders) == 1  # a chain admits a single order
    peaks = {peak_memory(g, sequential_schedule(g, o))[0] for o in orders}
    assert len(peaks) == 1


@st.composite
def small_dags(draw, max_ops: int = 7):
    n = draw(st.integers(min_value=1, max_value=max_ops))
    parent_sets = [
        draw(st.sets(st.integers(0, i - 1), max_size=min(i, 3))) if i else set()
        for i in range(n)
    ]
    sizes = [draw(st.integers(1, 8)) * MB for _ in range(n)]
    ops = []
    tensors = []
    consumers: dict[int, list[int]] = {}
    for i in range(n):
        inputs = []
        for p in sorted(parent_sets[i]):
            inputs.append(p)
            consumers.setdefault(p, []).append(i)
        ops.append({"id": i, "name": f"v{i}", "kind": "forward", "inputs": inputs, "outputs": [i]})
        tensors.append({"id": i, "size_bytes": sizes[i]})
    return load_graph({"ops": ops, "tensors": tensors})


@settings(max_examples=40, deadline=None)
@given(small_dags())
def test_peak_lower_bounds(g: Graph):
    order = g.topological_order()
    peak, _ = peak_memory(g, sequential_schedule(g, order))
    for op in g.ops:
        footprint = sum(g.tensors[t].size for t in set(op.inputs) | set(op.outputs))
        assert peak >= footprint
    assert peak >= max(t.size for t in g.tensors)


@settings(max_examples=25, deadline=None)
@given(small_dags(max_ops=6))
def test_asap_alap_bound_every_schedule(g: Graph):
    bounds = asap_alap(g)
    for order in all_topological_orders(g):
        for t, v in enumerate(order):
            assert bounds.asap[v] <= t <= bounds.alap[v]


@settings(max_examples=40, deadline=None)
@given(small_dags())
def test_asap_alap_match_closure_oracle(g: Graph):
    preds, succs = naive_closure_sets(g)
    bounds = asap_alap(g)
    n = g.n_ops
    for v in range(n):
        assert bounds.asap[v] == len(preds[v])
        assert bounds.alap[v] == n - 1 - len(succs[v])


@settings(max_examples=40, deadline=None)
@given(small_dags())
def test_roundtrip_property(g: Graph):
    assert load_graph(graph_to_doc(g)) == g
