"""Memory-insensitive detection, subgraph tree, shared-tensor routing."""

from __future__ import annotations

import pytest

from conftest import MB, chain_graph, diamond_doc
from memplan.graph import (
    Graph,
    OpKind,
    OpNode,
    StructuralError,
    TensorInfo,
    asap_alap,
    load_graph,
    predecessor_masks,
)
from memplan.graphgen import gen_training_graph
from memplan.segmentation import (
    SharedTensorType,
    SubgraphNode,
    TensorNotShared,
    assign_shared_tensors,
    build_segment_tree,
    build_subgraph_tree,
    classify_shared_tensor,
    find_memory_insensitive,
    independent_segments,
    linearize,
)
from oracles import naive_closure_sets


def test_mi_chain():
    g = chain_graph(5)
    assert find_memory_insensitive(g) == {0, 1, 2, 3, 4}


def test_mi_diamond(diamond):
    assert find_memory_insensitive(diamond) == {0, 3}


def test_mi_two_chains_one_sink():
    # two disjoint 2-op chains joined only at a final sink
    doc = {
        "ops": [
            {"id": 0, "name": "a1", "kind": "forward", "inputs": [], "outputs": [0]},
            {"id": 1, "name": "a2", "kind": "forward", "inputs": [0], "outputs": [1]},
            {"id": 2, "name": "b1", "kind": "forward", "inputs": [], "outputs": [2]},
            {"id": 3, "name": "b2", "kind": "forward", "inputs": [2], "outputs": [3]},
            {"id": 4, "name": "sink", "kind": "forward", "inputs": [1, 3], "outputs": []},
        ],
        "tensors": [{"id": i, "size_bytes": MB} for i in range(4)],
    }
    g = load_graph(doc)
    assert find_memory_insensitive(g) == {4}
    # closure-counting oracle agrees
    preds, succs = naive_closure_sets(g)
    expected = {v for v in range(5) if len(preds[v]) + len(succs[v]) == 4}
    assert expected == {4}


def test_independent_segments_diamond(diamond):
    segs = independent_segments(diamond)
    assert [(s.lo, s.hi, s.members) for s in segs] == [
        (None, 0, ()),
        (0, 3, (1, 2)),
        (3, None, ()),
    ]


def _leaf_tags(tree: SubgraphNode) -> list[str]:
    return [c.tag or c.kind for c in tree.children]


def test_tree_two_block_mlp_wide_limit():
    g = gen_training_graph("mlp", 2, optimizer="sgd")
    tree = build_subgraph_tree(g, node_limit=64)
    independents = [c for c in tree.children if c.kind == "independent" and not c.tag]
    assert len(independents) == 2  # one per block; the loss forms the middle leaf
    assert any(c.tag == "middle" for c in tree.children)
    assert all(not c.children for c in tree.children)  # no dependent level needed
    # closure oracle: every member sits strictly between its node's boundaries
    preds = predecessor_masks(g)
    for node in tree.children:
        for v in node.members:
            if node.outer_fwd is not None:
                assert (preds[v] >> node.outer_fwd) & 1
            if node.outer_bwd is not None:
                assert (preds[node.outer_bwd] >> v) & 1


def test_tree_every_op_in_exactly_one_leaf():
    g = gen_training_graph("transformer_block", 2, optimizer="adam")
    tree = build_subgraph_tree(g, node_limit=64)
    lin = linearize(g, tree)
    assert set(lin.leaf_of_op) == set(range(g.n_ops))
    leaf_ids = {l.id for l in tree.leaves()}
    assert set(lin.leaf_of_op.values()) <= leaf_ids


def test_tree_small_limit_splits_into_dependents():
    g = gen_training_graph("mlp", 2, optimizer="sgd")
    tree = build_subgraph_tree(g, node_limit=4)
    block_igs = [c for c in tree.children if c.kind == "independent" and not c.tag]
    assert block_igs and all(len(ig.children) >= 2 for ig in block_igs)
    for leaf in tree.leaves():
        assert len(leaf.members) <= 4 or leaf.unsplittable


def test_tree_no_interior_mi_is_unsplittable():
    # three parallel forward ops into a loss, mirrored by three parallel
    # backward ops: no split point other than the loss itself
    ops = []
    tensors = []
    for i in range(3):
        ops.append({"id": i, "name": f"f{i}", "kind": "forward", "inputs": [], "outputs": [i]})
        tensors.append({"id": i, "size_bytes": MB})
    ops.append({"id": 3, "name": "loss", "kind": "loss", "inputs": [0, 1, 2], "outputs": [3]})
    tensors.append({"id": 3, "size_bytes": MB})
    for i in range(3):
        ops.append({"id": 4 + i, "name": f"b{i}", "kind": "backward", "inputs": [3], "outputs": []})
    g = load_graph({"ops": ops, "tensors": tensors})
    tree = build_subgraph_tree(g, node_limit=2)
    big = [l for l in tree.leaves() if len(l.members) > 2]
    assert big and all(l.unsplittable for l in big)


def test_tree_requires_backward_pass(diamond):
    with pytest.raises(StructuralError):
        build_subgraph_tree(diamond, node_limit=8)


def test_tree_deterministic():
    g = gen_training_graph("residual", 2, optimizer="adam")
    assert build_subgraph_tree(g, 8) == build_subgraph_tree(g, 8)


def test_segment_tree_pure_chain_assembles_unique_order():
    g = chain_graph(6)
    tree = build_segment_tree(g, node_limit=8)
    lin = linearize(g, tree)
    order = []
    for kind, ref in lin.slots:
        if kind == "op":
            order.append(ref)
        else:
            order.extend(lin.windows[ref].ops)
    assert order == list(range(6))
    assert set(lin.leaf_of_op) == set(range(6))


def _hand_tree_and_graph():
    # chain 0 -> 1 -> 2 -> 3 with one extra tensor per rule under test
    ops = (
        OpNode(0, "w", OpKind.FORWARD, (), (0, 3, 4)),
        OpNode(1, "x", OpKind.FORWARD, (0,), (1,)),
        OpNode(2, "y", OpKind.FORWARD, (1, 3), (2,)),
        OpNode(3, "z", OpKind.FORWARD, (2, 4), ()),
    )
    tensors = (
        TensorInfo(0, MB, 0, (1,)),       # internal to the first half
        TensorInfo(1, MB, 1, (2,)),       # crosses the halves
        TensorInfo(2, MB, 2, (3,)),       # internal to the second half
        TensorInfo(3, MB, 0, (2,)),       # produced left, freed right
        TensorInfo(4, MB, 0, (3,)),       # spans the middle node entirely
    )
    g = Graph(ops, tensors)
    left = SubgraphNode(id=1, kind="independent", members=(0, 1))
    mid = SubgraphNode(id=2, kind="independent", members=(1, 2))
    right = SubgraphNode(id=3, kind="independent", members=(2, 3))
    return g, left, mid, right


def test_classify_shared_tensor_cases():
    g, left, mid, right = _hand_tree_and_graph()
    bounds = asap_alap(g)
    with pytest.raises(TensorNotShared):
        classify_shared_tensor(g.tensors[0], left, bounds)
    assert classify_shared_tensor(g.tensors[1], left, bounds) is SharedTensorType.CIFO
    assert classify_shared_tensor(g.tensors[1], right, bounds) is SharedTensorType.COFI
    assert classify_shared_tensor(g.tensors[4], mid, bounds) is SharedTensorType.COFO


def test_assign_shared_tensors_rules():
    g = gen_training_graph("mlp", 2, optimizer="adam")
    tree = build_subgraph_tree(g, node_limit=64)
    ownership = assign_shared_tensors(tree, g)
    lin = linearize(g, tree)
    names = {op.name: op.id for op in g.ops}
    leaf_of = lin.leaf_of_op

    # forward-created tensor freed in a later leaf belongs to the freeing leaf
    x1 = next(t for t in g.tensors if t.producer == names["blk1.join"])
    last = max(x1.consumers, key=lambda c: leaf_of[c])
    assert ownership[x1.id] == leaf_of[names["blk2.p"]]  # freed during block 2

    # backward-created temporaries stay with the creating leaf
    g2 = next(t for t in g.tensors if t.producer == names["blk2.join_bwd"])
    assert ownership[g2.id] == leaf_of[names["blk2.join_bwd"]]

    # activations are owned where their gradient consumer frees them
    a2 = next(t for t in g.tensors if t.producer == names["blk2.p"] and len(t.consumers) == 1)
    assert ownership[a2.id] == leaf_of[next(iter(a2.consumers))]

    # union of owned tensors covers everything exactly once
    owned_union: list[int] = []
    for leaf in tree.leaves():
        owned_union.extend(leaf.owned_tensors)
    assert sorted(owned_union) == list(range(g.n_tensors))


def test_boundary_ops_join_the_segment_they_close():
    g = gen_training_graph("mlp", 1, optimizer="sgd")
    tree = build_subgraph_tree(g, node_limit=64)
    lin = linearize(g, tree)
    names = {op.name: op.id for op in g.ops}
    block_leaf = lin.leaf_of_op[names["blk1.p"]]
    mid_leaf = lin.leaf_of_op[names["loss"]]
    assert lin.leaf_of_op[names["blk1.join"]] == block_leaf  # ends block 1's forward
    assert lin.leaf_of_op[names["blk1.join_bwd"]] == mid_leaf  # ends the middle
    assert lin.leaf_of_op[names["stem_bwd"]] == block_leaf  # ends block 1's backward
    assert lin.leaf_of_op[names["stem"]] == block_leaf  # opens the graph
