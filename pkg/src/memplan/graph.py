"""Computation-graph IR: loading, validation, liveness bounds, tensor taxonomy,
and the theoretical-peak-memory evaluator.

Memory model: a tensor occupies memory from the start of its producer's
timestep until the end of its last consumer's timestep; an operator's inputs
and outputs are simultaneously live while it executes. Tensors with no
consumers are graph outputs and stay live until the final timestep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, Mapping


class GraphError(Exception):
    """Base error for graph loading and structural problems."""


class GraphFormatError(GraphError):
    """Malformed interchange document: parse error, dangling or duplicate ids."""


class StructuralError(GraphError):
    """Graph violates a structural precondition (cycle, missing pass, ...)."""


class ScheduleError(GraphError):
    """Schedule is not valid for the graph it is paired with."""


class ConfigError(GraphError):
    """Invalid planner or solver configuration."""


class OpKind(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    WEIGHT_UPDATE = "weight_update"
    LOSS = "loss"


class TensorCategory(str, Enum):
    ACTIVATION = "activation"
    TEMPORARY_BUFFER = "temporary_buffer"
    GRADIENT = "gradient"
    WEIGHT = "weight"
    OPTIMIZER_STATE = "optimizer_state"


# Categories taken verbatim from the input document; the other categories are
# recomputed from graph structure by classify_tensors.
_PINNED_CATEGORIES = (TensorCategory.WEIGHT, TensorCategory.OPTIMIZER_STATE)


@dataclass(frozen=True)
class OpNode:
    id: int
    name: str
    kind: OpKind
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]


@dataclass(frozen=True)
class TensorInfo:
    id: int
    size: int
    producer: int
    consumers: tuple[int, ...]
    category: TensorCategory = TensorCategory.TEMPORARY_BUFFER


@dataclass(frozen=True)
class Graph:
    """Immutable DAG of operators (nodes) exchanging tensors (edges).

    Ids are dense: op ids and tensor ids each run 0..n-1 and index the
    corresponding tuples directly.
    """

    ops: tuple[OpNode, ...]
    tensors: tuple[TensorInfo, ...]

    @property
    def n_ops(self) -> int:
        return len(self.ops)

    @property
    def n_tensors(self) -> int:
        return len(self.tensors)

    @cached_property
    def direct_preds(self) -> tuple[tuple[int, ...], ...]:
        """Per op: producing ops of its input tensors (deduplicated, sorted)."""
        out = []
        for op in self.ops:
            preds = {self.tensors[t].producer for t in op.inputs}
            preds.discard(op.id)
            out.append(tuple(sorted(preds)))
        return tuple(out)

    @cached_property
    def direct_succs(self) -> tuple[tuple[int, ...], ...]:
        """Per op: consuming ops of its output tensors (deduplicated, sorted)."""
        out = []
        for op in self.ops:
            succs = set()
            for t in op.outputs:
                succs.update(self.tensors[t].consumers)
            succs.discard(op.id)
            out.append(tuple(sorted(succs)))
        return tuple(out)

    def topological_order(self) -> tuple[int, ...]:
        """Kahn order with smallest-id tie-breaking; raises on cycles."""
        indeg = [len(p) for p in self.direct_preds]
        import heapq

        ready = [v for v in range(self.n_ops) if indeg[v] == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            v = heapq.heappop(ready)
            order.append(v)
            for w in self.direct_succs[v]:
                indeg[w] -= 1
                if indeg[w] == 0:
                    heapq.heappush(ready, w)
        if len(order) != self.n_ops:
            raise StructuralError("graph contains a cycle")
        return tuple(order)


@dataclass(frozen=True)
class ScheduleBounds:
    """Per-op earliest possible and latest mandatory single-streaming timestep.

    asap(v) counts transitive predecessors; alap(v) = n-1 minus transitive
    successors. asap(v) == alap(v) iff v is comparable with every other op.
    """

    asap: tuple[int, ...]
    alap: tuple[int, ...]


@dataclass(frozen=True)
class Schedule:
    """Total order of ops plus a timestep per op.

    `order` is a topological sequence; `timesteps[op_id]` gives the op's
    timestep. Timesteps are non-decreasing along `order` and at most
    `ops_per_step` ops may share one. A producer may share a timestep with a
    consumer: the conservative liveness model keeps both ops' tensors live for
    the whole shared step.
    """

    order: tuple[int, ...]
    timesteps: tuple[int, ...]
    ops_per_step: int = 1

    @property
    def n_steps(self) -> int:
        return max(self.timesteps) + 1 if self.timesteps else 0


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> tuple[str, ...]:
        return tuple(v.kind for v in self.violations)


def load_graph(doc: Mapping) -> Graph:
    """Build a Graph from a parsed interchange document.

    Ids are normalized to dense 0..n-1 ranges following array order; array
    order of `ops` is preserved because it defines the definition-order
    baseline. Raises GraphFormatError on dangling references, duplicate ids,
    or malformed fields.
    """
    if not isinstance(doc, Mapping) or "ops" not in doc or "tensors" not in doc:
        raise GraphFormatError("document must contain 'ops' and 'tensors' arrays")

    raw_tensors = doc["tensors"]
    raw_ops = doc["ops"]
    tensor_index: dict[int, int] = {}
    for pos, entry in enumerate(raw_tensors):
        tid = entry.get("id")
        if not isinstance(tid, int):
            raise GraphFormatError(f"tensor at position {pos} has no integer id")
        if tid in tensor_index:
            raise GraphFormatError(f"duplicate tensor id {tid}")
        tensor_index[tid] = pos
    op_index: dict[int, int] = {}
    for pos, entry in enumerate(raw_ops):
        oid = entry.get("id")
        if not isinstance(oid, int):
            raise GraphFormatError(f"op at position {pos} has no integer id")
        if oid in op_index:
            raise GraphFormatError(f"duplicate op id {oid}")
        op_index[oid] = pos

    ops = []
    producer: dict[int, int] = {}
    consumers: dict[int, list[int]] = {t: [] for t in range(len(raw_tensors))}
    for pos, entry in enumerate(raw_ops):
        try:
            kind = OpKind(entry.get("kind", "forward"))
        except ValueError:
            raise GraphFormatError(f"op {entry['id']}: unknown kind {entry.get('kind')!r}")
        inputs = []
        for t in entry.get("inputs", []):
            if t not in tensor_index:
                raise GraphFormatError(f"op {entry['id']}: input tensor {t} does not exist")
            inputs.append(tensor_index[t])
            consumers[tensor_index[t]].append(pos)
        outputs = []
        for t in entry.get("outputs", []):
            if t not in tensor_index:
                raise GraphFormatError(f"op {entry['id']}: output tensor {t} does not exist")
            dense = tensor_index[t]
            if dense in producer:
                raise GraphFormatError(f"tensor {t} has multiple producers")
            producer[dense] = pos
            outputs.append(dense)
        ops.append(
            OpNode(
                id=pos,
                name=str(entry.get("name", f"op{entry['id']}")),
                kind=kind,
                inputs=tuple(inputs),
                outputs=tuple(outputs),
            )
        )

    tensors = []
    for pos, entry in enumerate(raw_tensors):
        size = entry.get("size_bytes")
        if not isinstance(size, int):
            raise GraphFormatError(f"tensor {entry['id']}: size_bytes must be an integer")
        if pos not in producer:
            raise GraphFormatError(f"tensor {entry['id']} has no producer op")
        category = TensorCategory.TEMPORARY_BUFFER
        if entry.get("category") is not None:
            try:
                category = TensorCategory(entry["category"])
            except ValueError:
                raise GraphFormatError(
                    f"tensor {entry['id']}: unknown category {entry['category']!r}"
                )
        tensors.append(
            TensorInfo(
                id=pos,
                size=size,
                producer=producer[pos],
                consumers=tuple(consumers[pos]),
                category=category,
            )
        )

    g = Graph(ops=tuple(ops), tensors=tuple(tensors))
    g.topological_order()  # rejects cyclic documents at load time
    return g


def graph_to_doc(g: Graph) -> dict:
    """Serialize a Graph back into the interchange document shape."""
    return {
        "ops": [
            {
                "id": op.id,
                "name": op.name,
                "kind": op.kind.value,
                "inputs": list(op.inputs),
                "outputs": list(op.outputs),
            }
            for op in g.ops
        ],
        "tensors": [
            {"id": t.id, "size_bytes": t.size, "category": t.category.value}
            for t in g.tensors
        ],
    }


def load_graph_json(text: str) -> Graph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"invalid JSON: {exc}") from exc
    return load_graph(doc)


def validate_graph(g: Graph) -> ValidationReport:
    """Check structural invariants; violations are report entries, not errors."""
    violations: list[Violation] = []
    seen_producer: dict[int, int] = {}
    for op in g.ops:
        for t in op.outputs:
            if t in seen_producer:
                violations.append(
                    Violation("multi_producer", f"tensor {t} produced by ops {seen_producer[t]} and {op.id}")
                )
            seen_producer[t] = op.id
    for t in g.tensors:
        if t.size <= 0:
            violations.append(Violation("zero_size", f"tensor {t.id} has size {t.size}"))
        if t.producer != g.ops[t.producer].id or t.id not in g.ops[t.producer].outputs:
            violations.append(Violation("producer_mismatch", f"tensor {t.id} producer link broken"))
        for c in t.consumers:
            if t.id not in g.ops[c].inputs:
                violations.append(Violation("consumer_mismatch", f"tensor {t.id} consumer {c} link broken"))
    try:
        g.topological_order()
    except StructuralError:
        violations.append(Violation("cycle", "graph contains a cycle"))
    return ValidationReport(tuple(violations))


def predecessor_masks(g: Graph, restrict: Iterable[int] | None = None) -> list[int]:
    """Bitmask of transitive predecessors per op, optionally restricted to an
    induced sub-DAG (ops outside `restrict` are ignored entirely)."""
    allowed = set(range(g.n_ops)) if restrict is None else set(restrict)
    masks = [0] * g.n_ops
    for v in g.topological_order():
        if v not in allowed:
            continue
        m = 0
        for p in g.direct_preds[v]:
            if p in allowed:
                m |= masks[p] | (1 << p)
        masks[v] = m
    return masks


def successor_masks(g: Graph, restrict: Iterable[int] | None = None) -> list[int]:
    allowed = set(range(g.n_ops)) if restrict is None else set(restrict)
    masks = [0] * g.n_ops
    for v in reversed(g.topological_order()):
        if v not in allowed:
            continue
        m = 0
        for s in g.direct_succs[v]:
            if s in allowed:
                m |= masks[s] | (1 << s)
        masks[v] = m
    return masks


def asap_alap(g: Graph) -> ScheduleBounds:
    """asap(v) = |transitive predecessors|; alap(v) = n-1 - |transitive successors|."""
    preds = predecessor_masks(g)
    succs = successor_masks(g)
    n = g.n_ops
    asap = tuple(bin(preds[v]).count("1") for v in range(n))
    alap = tuple(n - 1 - bin(succs[v]).count("1") for v in range(n))
    return ScheduleBounds(asap=asap, alap=alap)


def validate_schedule(g: Graph, s: Schedule) -> None:
    """Raise ScheduleError unless s is a valid schedule of g."""
    if sorted(s.order) != list(range(g.n_ops)):
        raise ScheduleError("schedule must contain every op exactly once")
    if len(s.timesteps) != g.n_ops:
        raise ScheduleError("timesteps must cover every op")
    if s.ops_per_step < 1:
        raise ConfigError("ops_per_step must be >= 1")
    pos = {op: i for i, op in enumerate(s.order)}
    last_t = -1
    for op in s.order:
        t = s.timesteps[op]
        if t < last_t:
            raise ScheduleError("timesteps must be non-decreasing along the order")
        last_t = t
    counts: dict[int, int] = {}
    for t in s.timesteps:
        counts[t] = counts.get(t, 0) + 1
        if counts[t] > s.ops_per_step:
            raise ScheduleError(f"timestep {t} holds more than {s.ops_per_step} ops")
    for v in range(g.n_ops):
        for p in g.direct_preds[v]:
            if pos[p] > pos[v] or s.timesteps[p] > s.timesteps[v]:
                raise ScheduleError(f"op {v} scheduled before its predecessor {p}")


def sequential_schedule(g: Graph, order: Iterable[int], ops_per_step: int = 1) -> Schedule:
    """One op per timestep in the given order (the single-streaming scale)."""
    order = tuple(order)
    timesteps = [0] * g.n_ops
    for i, op in enumerate(order):
        timesteps[op] = i
    s = Schedule(order=order, timesteps=tuple(timesteps), ops_per_step=ops_per_step)
    validate_schedule(g, s)
    return s


def pack_schedule(g: Graph, order: Iterable[int], ops_per_step: int) -> Schedule:
    """Pack an order into timesteps of up to ops_per_step ops (multi-streaming).

    An op never shares a timestep with one of its direct predecessors.
    """
    if ops_per_step < 1:
        raise ConfigError("ops_per_step must be >= 1")
    order = tuple(order)
    timesteps = [0] * g.n_ops
    current, filled = 0, 0
    placed: set[int] = set()
    for op in order:
        t = current
        for p in g.direct_preds[op]:
            if p in placed:
                t = max(t, timesteps[p] + 1)
        if t == current and filled >= ops_per_step:
            t += 1
        if t != current:
            current, filled = t, 0
        timesteps[op] = current
        filled += 1
        placed.add(op)
    s = Schedule(order=order, timesteps=tuple(timesteps), ops_per_step=ops_per_step)
    validate_schedule(g, s)
    return s


def tensor_lifetimes(g: Graph, s: Schedule) -> list[tuple[int, int]]:
    """Per tensor: [birth, death] in timesteps, inclusive. Tensors without
    consumers die at the final timestep."""
    horizon = s.n_steps - 1
    spans = []
    for t in g.tensors:
        birth = s.timesteps[t.producer]
        death = max((s.timesteps[c] for c in t.consumers), default=horizon)
        spans.append((birth, max(birth, death)))
    return spans


def live_bytes_by_timestep(g: Graph, s: Schedule) -> list[int]:
    steps = s.n_steps
    live = [0] * steps
    for tensor, (birth, death) in zip(g.tensors, tensor_lifetimes(g, s)):
        for t in range(birth, death + 1):
            live[t] += tensor.size
    return live


def peak_memory(g: Graph, s: Schedule) -> tuple[int, int]:
    """Theoretical peak memory of schedule s and the first timestep reaching it."""
    validate_schedule(g, s)
    if g.n_ops == 0:
        return 0, 0
    live = live_bytes_by_timestep(g, s)
    peak = max(live)
    return peak, live.index(peak)


def classify_tensors(g: Graph) -> dict[int, TensorCategory]:
    """Derive tensor categories from producer/consumer pass kinds.

    Pre-tagged weight and optimizer-state categories are kept; everything else
    is recomputed: forward-produced tensors with a backward consumer are
    activations, backward-produced tensors feeding weight updates are
    gradients, the rest are temporary buffers.
    """
    result: dict[int, TensorCategory] = {}
    for t in g.tensors:
        if t.category in _PINNED_CATEGORIES:
            result[t.id] = t.category
            continue
        pk = g.ops[t.producer].kind
        ck = {g.ops[c].kind for c in t.consumers}
        if pk is OpKind.FORWARD and OpKind.BACKWARD in ck:
            result[t.id] = TensorCategory.ACTIVATION
        elif pk is OpKind.BACKWARD and OpKind.WEIGHT_UPDATE in ck:
            result[t.id] = TensorCategory.GRADIENT
        else:
            result[t.id] = TensorCategory.TEMPORARY_BUFFER
    return result


def with_categories(g: Graph) -> Graph:
    """Return a copy of g whose tensors carry classified categories."""
    cats = classify_tensors(g)
    tensors = tuple(
        TensorInfo(t.id, t.size, t.producer, t.consumers, cats[t.id]) for t in g.tensors
    )
    return Graph(ops=g.ops, tensors=tensors)


@dataclass(frozen=True)
class WeightUpdateBranch:
    """A relocatable group of weight-update ops hanging off one gradient."""

    ops: tuple[int, ...]
    gradients: tuple[int, ...]  # tensor ids consumed from outside the branch
    grad_bytes: int


def weight_update_branches(g: Graph) -> list[WeightUpdateBranch]:
    """Weakly-connected components of weight_update ops.

    A branch is relocatable only if none of its tensors is consumed outside
    the branch; non-relocatable groups are ignored (their ops stay pinned in
    the core graph).
    """
    wu = [op.id for op in g.ops if op.kind is OpKind.WEIGHT_UPDATE]
    wu_set = set(wu)
    parent = {v: v for v in wu}

    def find(v: int) -> int:
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for v in wu:
        for p in g.direct_preds[v]:
            if p in wu_set:
                union(v, p)
        for s in g.direct_succs[v]:
            if s in wu_set:
                union(v, s)

    groups: dict[int, list[int]] = {}
    for v in wu:
        groups.setdefault(find(v), []).append(v)

    branches = []
    for root in sorted(groups):
        members = sorted(groups[root])
        mset = set(members)
        relocatable = True
        grads: list[int] = []
        for v in members:
            for t in g.ops[v].outputs:
                if any(c not in mset for c in g.tensors[t].consumers):
                    relocatable = False
            for t in g.ops[v].inputs:
                if g.tensors[t].producer not in mset and t not in grads:
                    grads.append(t)
        if not relocatable:
            continue
        grad_bytes = sum(g.tensors[t].size for t in grads)
        branches.append(
            WeightUpdateBranch(ops=tuple(members), gradients=tuple(sorted(grads)), grad_bytes=grad_bytes)
        )
    return branches
