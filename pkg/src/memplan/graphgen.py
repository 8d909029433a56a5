"""Deterministic synthetic graph generators for tests, oracles, and benchmarks.

Training generators emit a stem op, per-block forward ops with internal
parallelism, a loss, mirrored backward ops consuming every stashed activation,
and one weight-update branch per block. Block boundaries are joins that are
memory-insensitive in the forward/backward core, so the subgraph tree finds
one (mlp, residual) or two (transformer_block) independent subgraphs per
block. Sizes are round megabytes to keep oracle arithmetic exact.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .graph import Graph, load_graph

MB = 1 << 20

ARCHITECTURES = ("mlp", "residual", "transformer_block")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class SizeSpec:
    """Byte sizes used by the training-graph generators (round MBs).

    Activations and block outputs dominate temporaries so that the peak live
    set is activation-bound, the regime the planner targets."""

    interchange: int = 32 * MB  # block outputs linking segments
    activation: int = 24 * MB  # stashed forward tensors
    buffer: int = 2 * MB  # short-lived forward temporaries
    grad_flow: int = 2 * MB  # backward temporaries
    parameter: int = 2 * MB  # per-block gradient and optimizer temporaries
    loss_seed: int = 2 * MB


class _DocBuilder:
    def __init__(self) -> None:
        self.ops: list[dict] = []
        self.tensors: list[dict] = []

    def tensor(self, size: int, category: str | None = None) -> int:
        tid = len(self.tensors)
        entry: dict = {"id": tid, "size_bytes": size}
        if category is not None:
            entry["category"] = category
        self.tensors.append(entry)
        return tid

    def op(self, name: str, kind: str, inputs: list[int], outputs: list[int]) -> int:
        oid = len(self.ops)
        self.ops.append(
            {"id": oid, "name": name, "kind": kind, "inputs": inputs, "outputs": outputs}
        )
        return oid

    def build(self) -> Graph:
        return load_graph({"ops": self.ops, "tensors": self.tensors})


def _emit_weight_updates(b: _DocBuilder, grads: list[int], optimizer: str, p: int) -> None:
    for k, gw in enumerate(grads):
        if optimizer == "adam":
            mo = b.tensor(p)
            vo = b.tensor(p)
            st = b.tensor(p)
            b.op(f"adam.m{k}", "weight_update", [gw], [mo])
            b.op(f"adam.v{k}", "weight_update", [gw], [vo])
            b.op(f"adam.step{k}", "weight_update", [mo, vo], [st])
            b.op(f"adam.apply{k}", "weight_update", [st], [])
        else:
            b.op(f"sgd.apply{k}", "weight_update", [gw], [])


def _gen_mlp(b: _DocBuilder, blocks: int, s: SizeSpec, optimizer: str) -> list[int]:
    x = [0] * (blocks + 1)
    a, c, bt, gw = {}, {}, {}, {}
    x[0] = b.tensor(s.interchange)
    b.op("stem", "forward", [], [x[0]])
    for k in range(1, blocks + 1):
        u = b.tensor(s.buffer)
        a[k] = b.tensor(s.activation)
        w = b.tensor(s.buffer)
        c[k] = b.tensor(s.activation)
        h = b.tensor(s.buffer)
        bt[k] = b.tensor(s.activation)
        e = b.tensor(s.buffer)
        x[k] = b.tensor(s.interchange)
        b.op(f"blk{k}.p", "forward", [x[k - 1]], [u, a[k]])
        b.op(f"blk{k}.q", "forward", [x[k - 1]], [w])
        b.op(f"blk{k}.mid", "forward", [u, w], [c[k]])
        b.op(f"blk{k}.r", "forward", [c[k]], [h, bt[k]])
        b.op(f"blk{k}.s", "forward", [c[k]], [e])
        b.op(f"blk{k}.join", "forward", [h, e], [x[k]])
        # backward temporaries are created per block below
    dl = b.tensor(s.loss_seed)
    b.op("loss", "loss", [x[blocks]], [dl])
    g = b.tensor(s.grad_flow)
    b.op(f"blk{blocks}.join_bwd", "backward", [dl, x[blocks]], [g])
    for k in range(blocks, 0, -1):
        dh = b.tensor(s.grad_flow)
        de = b.tensor(s.grad_flow)
        gc = b.tensor(s.grad_flow)
        du = b.tensor(s.grad_flow)
        gw[k] = b.tensor(s.parameter)
        dw = b.tensor(s.grad_flow)
        # a_k crosses the mid cut (its producer is outside), so the half-block
        # pair is dependent rather than independent
        b.op(f"blk{k}.r_bwd", "backward", [g, a[k]], [dh])
        b.op(f"blk{k}.s_bwd", "backward", [g, bt[k]], [de])
        b.op(f"blk{k}.mid_bwd", "backward", [dh, de, c[k]], [gc])
        b.op(f"blk{k}.p_bwd", "backward", [gc], [du, gw[k]])
        b.op(f"blk{k}.q_bwd", "backward", [gc], [dw])
        if k > 1:
            g = b.tensor(s.grad_flow)
            b.op(f"blk{k - 1}.join_bwd", "backward", [du, dw, x[k - 1]], [g])
        else:
            b.op("stem_bwd", "backward", [du, dw, x[0]], [])
    return [gw[k] for k in range(blocks, 0, -1)]


def _gen_residual(b: _DocBuilder, blocks: int, s: SizeSpec, optimizer: str) -> list[int]:
    x = [0] * (blocks + 1)
    a, gw = {}, {}
    x[0] = b.tensor(s.interchange)
    b.op("stem", "forward", [], [x[0]])
    for k in range(1, blocks + 1):
        u = b.tensor(s.buffer)
        a[k] = b.tensor(s.activation)
        w = b.tensor(s.buffer)
        x[k] = b.tensor(s.interchange)
        b.op(f"blk{k}.p", "forward", [x[k - 1]], [u, a[k]])
        b.op(f"blk{k}.q", "forward", [x[k - 1]], [w])
        b.op(f"blk{k}.add", "forward", [u, w, x[k - 1]], [x[k]])
    dl = b.tensor(s.loss_seed)
    b.op("loss", "loss", [x[blocks]], [dl])
    g = b.tensor(s.grad_flow)
    b.op(f"blk{blocks}.add_bwd", "backward", [dl, x[blocks]], [g])
    for k in range(blocks, 0, -1):
        du = b.tensor(s.grad_flow)
        gw[k] = b.tensor(s.parameter)
        dw = b.tensor(s.grad_flow)
        b.op(f"blk{k}.p_bwd", "backward", [g, a[k]], [du, gw[k]])
        b.op(f"blk{k}.q_bwd", "backward", [g], [dw])
        if k > 1:
            prev_g = g
            g = b.tensor(s.grad_flow)
            b.op(f"blk{k - 1}.add_bwd", "backward", [du, dw, prev_g, x[k - 1]], [g])
        else:
            b.op("stem_bwd", "backward", [du, dw, g, x[0]], [])
    return [gw[k] for k in range(blocks, 0, -1)]


def _gen_transformer(b: _DocBuilder, blocks: int, s: SizeSpec, optimizer: str) -> list[int]:
    x = [0] * (blocks + 1)
    sc, y, h, gw = {}, {}, {}, {}
    x[0] = b.tensor(s.interchange)
    b.op("stem", "forward", [], [x[0]])
    for k in range(1, blocks + 1):
        qv = b.tensor(s.buffer)
        kv = b.tensor(s.buffer)
        sc[k] = b.tensor(s.activation)
        vo = b.tensor(s.buffer)
        y[k] = b.tensor(s.activation)
        h[k] = b.tensor(s.activation)
        e = b.tensor(s.buffer)
        x[k] = b.tensor(s.interchange)
        b.op(f"blk{k}.q_proj", "forward", [x[k - 1]], [qv])
        b.op(f"blk{k}.kv_proj", "forward", [x[k - 1]], [kv])
        b.op(f"blk{k}.scores", "forward", [qv], [sc[k]])
        b.op(f"blk{k}.values", "forward", [kv], [vo])
        b.op(f"blk{k}.attn_join", "forward", [sc[k], vo, x[k - 1]], [y[k]])
        b.op(f"blk{k}.ffn_up", "forward", [y[k]], [h[k]])
        b.op(f"blk{k}.gate", "forward", [y[k]], [e])
        b.op(f"blk{k}.ffn_join", "forward", [h[k], e], [x[k]])
    dl = b.tensor(s.loss_seed)
    b.op("loss", "loss", [x[blocks]], [dl])
    gx = b.tensor(s.grad_flow)
    b.op(f"blk{blocks}.ffn_join_bwd", "backward", [dl, x[blocks]], [gx])
    for k in range(blocks, 0, -1):
        dh = b.tensor(s.grad_flow)
        de = b.tensor(s.grad_flow)
        gy = b.tensor(s.grad_flow)
        dq = b.tensor(s.grad_flow)
        gw[k] = b.tensor(s.parameter)
        dk = b.tensor(s.grad_flow)
        b.op(f"blk{k}.ffn_up_bwd", "backward", [gx, h[k]], [dh])
        b.op(f"blk{k}.gate_bwd", "backward", [gx], [de])
        b.op(f"blk{k}.attn_join_bwd", "backward", [dh, de, gx, y[k]], [gy])
        b.op(f"blk{k}.scores_bwd", "backward", [gy, sc[k]], [dq, gw[k]])
        b.op(f"blk{k}.values_bwd", "backward", [gy], [dk])
        if k > 1:
            gx = b.tensor(s.grad_flow)
            b.op(f"blk{k - 1}.ffn_join_bwd", "backward", [dq, dk, gy, x[k - 1]], [gx])
        else:
            b.op("stem_bwd", "backward", [dq, dk, gy, x[0]], [])
    return [gw[k] for k in range(blocks, 0, -1)]


def gen_training_graph(
    arch: str,
    blocks: int,
    sizes: SizeSpec | None = None,
    optimizer: str = "adam",
    seed: int = 0,
) -> Graph:
    """Training graph with forward, loss, backward, and weight-update passes.

    The structure is fully determined by (arch, blocks, sizes, optimizer);
    seed is accepted for interface uniformity.
    """
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if blocks < 1:
        raise ValueError("blocks must be >= 1")
    s = sizes or SizeSpec()
    b = _DocBuilder()
    if arch == "mlp":
        grads = _gen_mlp(b, blocks, s, optimizer)
    elif arch == "residual":
        grads = _gen_residual(b, blocks, s, optimizer)
    else:
        grads = _gen_transformer(b, blocks, s, optimizer)
    _emit_weight_updates(b, grads, optimizer, s.parameter)
    return b.build()


def gen_random_dag(
    n: int,
    density: float = 0.3,
    size_range_mb: tuple[int, int] = (1, 8),
    seed: int = 0,
) -> Graph:
    """Random DAG of forward ops, one output tensor each; deterministic in seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    lo, hi = size_range_mb
    b = _DocBuilder()
    outputs = []
    consumers: list[list[int]] = []
    for i in range(n):
        outputs.append(b.tensor(rng.randint(lo, hi) * MB))
        consumers.append([])
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < density:
                consumers[i].append(j)
    inputs: list[list[int]] = [[] for _ in range(n)]
    for i, cs in enumerate(consumers):
        for j in cs:
            inputs[j].append(outputs[i])
    for i in range(n):
        b.op(f"v{i}", "forward", inputs[i], [outputs[i]])
    return b.build()


def gen_greedy_trap(seed: int = 0, max_attempts: int = 4000) -> Graph:
    """A graph on which least-increase greedy ordering is strictly worse than
    the exact minimum; found by seeded search over small random DAGs."""
    from .ordering import exact_order, greedy_order, whole_graph_problem

    for attempt in range(max_attempts):
        g = gen_random_dag(
            n=6 + (attempt % 3),
            density=0.35,
            size_range_mb=(1, 12),
            seed=seed * 100003 + attempt,
        )
        p = whole_graph_problem(g)
        exact = exact_order(p)
        greedy = greedy_order(p)
        if exact.optimal and exact.peak < greedy.peak:
            return g
    raise RuntimeError("no greedy trap found within the attempt bound; raise it")
