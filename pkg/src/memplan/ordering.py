"""Operator-order optimization per window, weight-update placement, and
assembly of the global schedule.

The exact solver minimizes the window's peak live bytes over all topological
sub-orders via memoized search over scheduled-set states with incumbent
pruning (an anytime contract: on budget exhaustion the greedy incumbent is
returned flagged non-optimal). The greedy baseline always schedules the ready
op with the least net memory increase.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .graph import (
    ConfigError,
    Graph,
    OpKind,
    Schedule,
    ScheduleBounds,
    ScheduleError,
    TensorCategory,
    WeightUpdateBranch,
    asap_alap,
    classify_tensors,
    sequential_schedule,
    weight_update_branches,
)
from .segmentation import Linearization, SubgraphNode, Window, linearize

DEFAULT_ALPHA: dict[str, float] = {"adam": 3.0, "sgd": 1.0}


@dataclass(frozen=True)
class OrderingProblem:
    """One window's sequencing problem with its boundary liveness context.

    live_in tensors are alive from the first timestep and freed after their
    last consumer inside the window; live_out tensors (and products with no
    consumers inside) are held through the window's end.
    """

    graph: Graph
    ops: tuple[int, ...]
    live_in: frozenset[int] = frozenset()
    live_out: frozenset[int] = frozenset()
    ops_per_step: int = 1
    time_budget: float = 60.0
    node_cap: int | None = None  # deterministic search cutoff (anytime)


@dataclass(frozen=True)
class SolverStats:
    nodes: int
    wall_time: float


@dataclass(frozen=True)
class OrderingSolution:
    order: tuple[int, ...]
    peak: int
    optimal: bool
    stats: SolverStats


def whole_graph_problem(g: Graph, ops_per_step: int = 1, time_budget: float = 60.0) -> OrderingProblem:
    return OrderingProblem(
        graph=g, ops=tuple(range(g.n_ops)), ops_per_step=ops_per_step, time_budget=time_budget
    )


class _Budget(Exception):
    pass


class _Local:
    """Window-local liveness bookkeeping shared by both solvers."""

    def __init__(self, p: OrderingProblem):
        if p.ops_per_step < 1:
            raise ConfigError("ops_per_step must be >= 1")
        if p.time_budget <= 0:
            raise ConfigError("time budget must be positive")
        g = p.graph
        self.p = p
        self.ops = tuple(sorted(p.ops))
        self.index = {v: i for i, v in enumerate(self.ops)}
        inside = set(self.ops)

        self.tracked: dict[int, int] = {}  # tensor -> remaining local consumers
        self.held: set[int] = set()
        self.sizes: dict[int, int] = {}
        produced_in: set[int] = set()
        for v in self.ops:
            for t in g.ops[v].outputs:
                produced_in.add(t)
        relevant = produced_in | set(p.live_in)
        for t in sorted(relevant):
            info = g.tensors[t]
            local = sum(1 for c in info.consumers if c in inside)
            self.sizes[t] = info.size
            self.tracked[t] = local
            if t in p.live_out or (t in produced_in and local == 0):
                self.held.add(t)
            elif t in p.live_in and local == 0:
                raise ConfigError(
                    f"live-in tensor {t} has no consumer in the window and is not live-out"
                )
        self.start_live = sum(self.sizes[t] for t in sorted(p.live_in))
        self.out_bytes = [sum(g.tensors[t].size for t in g.ops[v].outputs) for v in self.ops]

        # local precedence: producer inside the window
        self.pred_mask = [0] * len(self.ops)
        for i, v in enumerate(self.ops):
            m = 0
            for t in g.ops[v].inputs:
                prod = g.tensors[t].producer
                if prod in inside and prod != v:
                    m |= 1 << self.index[prod]
            self.pred_mask[i] = m



def greedy_order(p: OrderingProblem) -> OrderingSolution:
    """Least-memory-increase list scheduling; always flagged non-optimal.

    Among ready ops, picks the one whose net delta (bytes allocated minus
    bytes freed by consuming its inputs for the last time) is smallest, ties
    to the smaller op id.
    """
    t0 = time.monotonic()
    loc = _Local(p)
    g = p.graph
    n = len(loc.ops)
    counts = dict(loc.tracked)
    live = loc.start_live
    peak = live
    scheduled = 0
    order: list[int] = []
    steps = 0
    while len(order) < n:
        best: tuple[int, int] | None = None
        for i in range(n):
            if scheduled >> i & 1 or (loc.pred_mask[i] & ~scheduled):
                continue
            freed = 0
            seen: set[int] = set()
            for t in g.ops[loc.ops[i]].inputs:
                if t in seen or t not in counts or t in loc.held:
                    continue
                seen.add(t)
                if counts[t] == 1:
                    freed += loc.sizes[t]
            delta = loc.out_bytes[i] - freed
            if best is None or delta < best[0]:
                best = (delta, i)
        assert best is not None, "window precedence contains a cycle"
        i = best[1]
        v = loc.ops[i]
        live += loc.out_bytes[i]
        peak = max(peak, live)
        seen = set()
        for t in g.ops[v].inputs:
            if t in seen or t not in counts:
                continue
            seen.add(t)
            counts[t] -= 1
            if counts[t] == 0 and t not in loc.held:
                live -= loc.sizes[t]
        scheduled |= 1 << i
        order.append(v)
        steps += 1
    return OrderingSolution(
        order=tuple(order),
        peak=peak,
        optimal=False,
        stats=SolverStats(nodes=steps, wall_time=time.monotonic() - t0),
    )


def exact_order(p: OrderingProblem) -> OrderingSolution:
    """Minimum-peak sub-order via memoized search over scheduled-set states.

    Anytime: seeds the greedy incumbent and returns it flagged non-optimal if
    the time budget runs out; otherwise the result is exact and ties are
    broken toward the lexicographically smallest op-id sequence.
    """
    t0 = time.monotonic()
    incumbent = greedy_order(p)
    loc = _Local(p)
    g = p.graph
    n = len(loc.ops)
    if n == 0:
        return OrderingSolution((), loc.start_live, True, SolverStats(0, time.monotonic() - t0))

    deadline = t0 + p.time_budget
    counts = dict(loc.tracked)
    memo: dict[int, int] = {}
    nodes = 0
    full = (1 << n) - 1

    input_tensors: list[list[int]] = []
    for i in range(n):
        seen: list[int] = []
        for t in g.ops[loc.ops[i]].inputs:
            if t in counts and t not in seen:
                seen.append(t)
        input_tensors.append(seen)

    def search(mask: int, live: int) -> int:
        nonlocal nodes
        if mask == full:
            return 0
        hit = memo.get(mask)
        if hit is not None:
            return hit
        nodes += 1
        if p.node_cap is not None and nodes > p.node_cap:
            raise _Budget
        if nodes % 1024 == 0 and time.monotonic() > deadline:
            raise _Budget
        best = None
        for i in range(n):
            if mask >> i & 1 or (loc.pred_mask[i] & ~mask):
                continue
            step = live + loc.out_bytes[i]
            if best is not None and step >= best:
                continue  # cannot improve: the branch value is >= step
            new_live = step
            freed = []
            for t in input_tensors[i]:
                counts[t] -= 1
                if counts[t] == 0 and t not in loc.held:
                    new_live -= loc.sizes[t]
                    freed.append(t)
            sub = search(mask | (1 << i), new_live)
            value = step if step >= sub else sub
            for t in input_tensors[i]:
                counts[t] += 1
            if best is None or value < best:
                best = value
        assert best is not None
        memo[mask] = best
        return best

    try:
        optimum = max(search(0, loc.start_live), loc.start_live)
    except _Budget:
        return incumbent

    # Reconstruct the lexicographically smallest optimal order. Branches the
    # search pruned lack memo entries, but an earlier op id always attains the
    # same or a better value, so skipping them keeps the walk correct.
    order: list[int] = []
    mask, live = 0, loc.start_live
    while mask != full:
        target = memo[mask]
        chosen = None
        for i in range(n):
            if mask >> i & 1 or (loc.pred_mask[i] & ~mask):
                continue
            step = live + loc.out_bytes[i]
            nxt = mask | (1 << i)
            sub = 0 if nxt == full else memo.get(nxt)
            if sub is None:
                continue
            if max(step, sub) <= target:
                chosen = i
                break
        assert chosen is not None, "order reconstruction failed"
        live += loc.out_bytes[chosen]
        for t in input_tensors[chosen]:
            counts[t] -= 1
            if counts[t] == 0 and t not in loc.held:
                live -= loc.sizes[t]
        mask |= 1 << chosen
        order.append(loc.ops[chosen])

    return OrderingSolution(
        order=tuple(order),
        peak=optimum,
        optimal=True,
        stats=SolverStats(nodes=nodes, wall_time=time.monotonic() - t0),
    )


def resolve_alpha(g: Graph, branch: WeightUpdateBranch, alpha: Mapping[str, float]) -> float:
    """Optimizer coefficient for a weight-update branch.

    The optimizer is named by the longest alpha-map key prefixing the branch's
    first op name (case-insensitive); a "default" key catches the rest.
    """
    name = g.ops[branch.ops[0]].name.lower()
    match = ""
    for key in alpha:
        if key != "default" and name.startswith(key.lower()) and len(key) > len(match):
            match = key
    if match:
        return float(alpha[match])
    if "default" in alpha:
        return float(alpha["default"])
    raise ConfigError(
        f"cannot resolve optimizer alpha for weight-update op {branch.ops[0]} "
        f"({g.ops[branch.ops[0]].name!r}); add an alpha override"
    )


def weight_update_cost(
    g: Graph,
    bounds: ScheduleBounds,
    t: int,
    branch: WeightUpdateBranch,
    alpha: Mapping[str, float] | None = None,
) -> tuple[int, int, float]:
    """Estimated memory picture of running a weight-update branch at timestep t.

    Returns (activation_total, activations_alive_at_t, projected_use) where
    projected_use = activations alive + alpha * gradient bytes. A tensor may
    be alive at t when asap(producer) <= t <= alap(last consumer); tensors
    without consumers stay alive through the horizon.
    """
    categories = classify_tensors(g)
    n = g.n_ops
    activation_total = 0
    alive = 0
    for info in g.tensors:
        if categories[info.id] is not TensorCategory.ACTIVATION:
            continue
        activation_total += info.size
        start = bounds.asap[info.producer]
        end = max((bounds.alap[c] for c in info.consumers), default=n - 1)
        if start <= t <= end:
            alive += info.size
    a = resolve_alpha(g, branch, DEFAULT_ALPHA if alpha is None else alpha)
    projected = alive + a * branch.grad_bytes
    return activation_total, alive, projected


@dataclass(frozen=True)
class BranchPlacement:
    branch: WeightUpdateBranch
    delayed: bool
    target_window: int
    target_leaf: int
    alpha: float
    size_ratio: float
    ready_t: int
    projected_use: float


@dataclass(frozen=True)
class WeightUpdatePlan:
    placements: tuple[BranchPlacement, ...]
    activation_total: int

    def ops_for_window(self, window_index: int) -> tuple[int, ...]:
        out: list[int] = []
        for p in self.placements:
            if p.target_window == window_index:
                out.extend(p.branch.ops)
        return tuple(sorted(out))

    def any_delayed(self) -> bool:
        return any(p.delayed for p in self.placements)


def _op_slot_positions(lin: Linearization) -> dict[int, int]:
    pos: dict[int, int] = {}
    for i, (kind, ref) in enumerate(lin.slots):
        if kind == "op":
            pos[ref] = i
        else:
            for v in lin.windows[ref].ops:
                pos[v] = i
    return pos


def _window_slot(lin: Linearization, window_index: int) -> int:
    for i, (kind, ref) in enumerate(lin.slots):
        if kind == "win" and ref == window_index:
            return i
    raise ValueError(f"window {window_index} not in slot sequence")


def place_weight_updates(
    g: Graph,
    tree: SubgraphNode,
    r: float,
    alpha: Mapping[str, float] | None = None,
    *,
    force_immediate: bool = False,
) -> WeightUpdatePlan:
    """Assign each weight-update branch to the window where it runs.

    A branch is delayed only when its gradient is larger than r times the mean
    tensor size AND the projected use at its ready timestep exceeds the summed
    activation bytes; delayed branches move to the earliest later window whose
    projected use drops back under that estimate, falling back to the tail
    window after the backward pass.
    """
    alpha = DEFAULT_ALPHA if alpha is None else alpha
    lin = linearize(g, tree)
    bounds = asap_alap(g)
    branches = weight_update_branches(g)
    floating = set(tree.floating_ops)
    branches = [b for b in branches if b.ops and b.ops[0] in floating]
    mean_size = (
        sum(t.size for t in g.tensors) / g.n_tensors if g.n_tensors else 0.0
    )
    positions = _op_slot_positions(lin)

    activation_total = 0
    placements: list[BranchPlacement] = []
    order_key = lambda b: (max(bounds.asap[g.tensors[t].producer] for t in b.gradients), b.ops[0])
    for branch in sorted(branches, key=order_key):
        producer = max(
            (g.tensors[t].producer for t in branch.gradients),
            key=lambda v: (bounds.asap[v], v),
        )
        ready_t = bounds.asap[producer]
        est_total, _, projected = weight_update_cost(g, bounds, ready_t, branch, alpha)
        activation_total = est_total
        a = resolve_alpha(g, branch, alpha)
        ratio = branch.grad_bytes / mean_size if mean_size else 0.0
        delayed = (not force_immediate) and ratio > r and projected > est_total

        home_slot = positions[producer]
        home_window = None
        for i, (kind, ref) in enumerate(lin.slots):
            if kind == "win" and i >= home_slot and lin.windows[ref].ops:
                home_window = ref
                break
        if home_window is None:
            home_window = lin.tail_window if lin.tail_window is not None else 0

        target = home_window
        chosen_projected = projected
        if delayed:
            target = lin.tail_window if lin.tail_window is not None else home_window
            for i, (kind, ref) in enumerate(lin.slots):
                if kind != "win" or i <= home_slot or ref == lin.tail_window:
                    continue
                # estimate the window's start as one step after the preceding
                # forced boundary op
                t_w = ready_t
                if i > 0 and lin.slots[i - 1][0] == "op":
                    t_w = bounds.asap[lin.slots[i - 1][1]] + 1
                _, _, use_w = weight_update_cost(g, bounds, t_w, branch, alpha)
                if use_w <= est_total:
                    target = ref
                    chosen_projected = use_w
                    break
        placements.append(
            BranchPlacement(
                branch=branch,
                delayed=delayed,
                target_window=target,
                target_leaf=lin.windows[target].leaf,
                alpha=a,
                size_ratio=ratio,
                ready_t=ready_t,
                projected_use=chosen_projected,
            )
        )
    return WeightUpdatePlan(placements=tuple(placements), activation_total=activation_total)


def build_window_problems(
    g: Graph,
    lin: Linearization,
    wu_plan: WeightUpdatePlan | None = None,
    ops_per_step: int = 1,
    time_budget: float = 60.0,
    node_cap: int | None = None,
) -> list[tuple[Window, OrderingProblem]]:
    """Attach boundary-liveness context to every window's op set.

    Window op sets are the linearization's core ops plus any weight-update
    branches placed there. Tensor roles come from slot positions: produced
    earlier and consumed here -> live-in; consumed later (or never) -> live-out.
    """
    extra: dict[int, tuple[int, ...]] = {}
    if wu_plan is not None:
        for w in lin.windows:
            extra[w.index] = wu_plan.ops_for_window(w.index)

    final_ops: dict[int, tuple[int, ...]] = {}
    op_window: dict[int, int] = {}
    for w in lin.windows:
        ops = tuple(sorted((*w.ops, *extra.get(w.index, ()))))
        final_ops[w.index] = ops
        for v in ops:
            op_window[v] = w.index

    slot_of_window = {w.index: _window_slot(lin, w.index) for w in lin.windows}
    op_pos: dict[int, int] = {}
    for i, (kind, ref) in enumerate(lin.slots):
        if kind == "op":
            op_pos[ref] = i
    for v, w in op_window.items():
        op_pos[v] = slot_of_window[w]

    horizon = len(lin.slots)
    problems: list[tuple[Window, OrderingProblem]] = []
    for w in lin.windows:
        ops = final_ops[w.index]
        inside = set(ops)
        wpos = slot_of_window[w.index]
        live_in: set[int] = set()
        live_out: set[int] = set()
        for t in g.tensors:
            produced_in = t.producer in inside
            last = max((op_pos[c] for c in t.consumers), default=horizon)
            if produced_in:
                if last > wpos or not t.consumers:
                    live_out.add(t.id)
                continue
            if op_pos[t.producer] >= wpos:
                continue  # produced later: dead during this window
            local = any(c in inside for c in t.consumers)
            if not local and last <= wpos:
                continue  # freed before this window
            live_in.add(t.id)
            if last > wpos:
                live_out.add(t.id)
        problems.append(
            (
                Window(index=w.index, leaf=w.leaf, ops=ops),
                OrderingProblem(
                    graph=g,
                    ops=ops,
                    live_in=frozenset(live_in),
                    live_out=frozenset(live_out),
                    ops_per_step=ops_per_step,
                    time_budget=time_budget,
                    node_cap=node_cap,
                ),
            )
        )
    return problems


def assemble_order(
    g: Graph,
    lin: Linearization,
    orders: Mapping[int, Sequence[int]],
    ops_per_step: int = 1,
) -> Schedule:
    """Concatenate window sub-orders in slot order, interleaving boundary ops.

    Raises ScheduleError when the sub-orders do not compose into a valid
    topological order (a bug guard: solved windows always should).
    """
    sequence: list[int] = []
    for kind, ref in lin.slots:
        if kind == "op":
            sequence.append(ref)
        else:
            sequence.extend(orders.get(ref, ()))
    if len(sequence) != g.n_ops:
        raise ScheduleError(
            f"assembled order covers {len(sequence)} of {g.n_ops} ops"
        )
    return sequential_schedule(g, sequence, ops_per_step)
