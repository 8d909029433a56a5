"""End-to-end planning: segment, place weight updates, solve window orders and
leaf layouts in a worker pool, assemble, concatenate, repair, and report.

The planner evaluates its delay heuristic against the all-immediate
weight-update policy and keeps whichever schedule peaks lower, so a plan's
theoretical peak never exceeds the all-immediate policy's.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .graph import (
    ConfigError,
    Graph,
    OpKind,
    Schedule,
    StructuralError,
    TensorCategory,
    classify_tensors,
    live_bytes_by_timestep,
    peak_memory,
    tensor_lifetimes,
    validate_graph,
)
from .layout import (
    LayoutItem,
    LayoutProblem,
    MemoryLayout,
    concat_layouts,
    constrained_llfb_layout,
    exact_layout,
    fragmentation_pct,
    llfb_layout,
    repair_conflicts,
    validate_layout,
)
from .ordering import (
    DEFAULT_ALPHA,
    OrderingProblem,
    OrderingSolution,
    WeightUpdatePlan,
    assemble_order,
    build_window_problems,
    exact_order,
    greedy_order,
    place_weight_updates,
)
from .segmentation import (
    Linearization,
    SubgraphNode,
    assign_shared_tensors,
    build_segment_tree,
    build_subgraph_tree,
    linearize,
)

BASELINES = ("definition-order", "greedy-order", "llfb-layout", "caching-allocator")


@dataclass(frozen=True)
class PlannerConfig:
    node_limit: int = 20
    layout_limit: int = 24
    delay_radius: float = 2.0
    alpha: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_ALPHA))
    ops_per_step: int = 1
    order_budget: float = 60.0
    layout_budget: float = 60.0
    order_node_cap: int = 500_000
    layout_node_cap: int = 200_000
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        if self.node_limit < 2:
            raise ConfigError("node_limit must be >= 2")
        if self.ops_per_step < 1:
            raise ConfigError("ops_per_step must be >= 1")
        if self.order_budget <= 0 or self.layout_budget <= 0:
            raise ConfigError("time budgets must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass(frozen=True)
class LeafReport:
    leaf: int
    order_peak: int
    order_optimal: bool
    layout_capacity: int
    layout_optimal: bool
    n_ops: int
    n_items: int


@dataclass(frozen=True)
class PlanStats:
    theoretical_peak: int
    capacity: int
    fragmentation_pct: float
    optimal_leaves: int
    total_leaves: int
    leaf_reports: tuple[LeafReport, ...] = ()
    boundary_peaks: tuple[tuple[int, int], ...] = ()  # (op, live bytes at its step)
    delayed_branches: int = 0


@dataclass(frozen=True)
class ExecutionPlan:
    schedule: Schedule
    layout: MemoryLayout
    stats: PlanStats


def _pool_map(fn: Callable, jobs: Sequence, workers: int) -> list:
    """Order-preserving map; results are independent of the worker count."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _solve_window(args: tuple[OrderingProblem, int]) -> OrderingSolution:
    problem, node_limit = args
    if len(problem.ops) > node_limit:
        return greedy_order(problem)
    return exact_order(problem)


def _solve_layout(args: tuple[LayoutProblem, int]) -> MemoryLayout:
    problem, layout_limit = args
    if len(problem.items) > layout_limit:
        return constrained_llfb_layout(problem)
    return exact_layout(problem)


def _order_schedule(
    g: Graph,
    lin: Linearization,
    wu_plan: WeightUpdatePlan | None,
    cfg: PlannerConfig,
) -> tuple[Schedule, dict[int, OrderingSolution], list]:
    pairs = build_window_problems(
        g,
        lin,
        wu_plan,
        ops_per_step=cfg.ops_per_step,
        time_budget=cfg.order_budget,
        node_cap=cfg.order_node_cap,
    )
    solutions = _pool_map(
        _solve_window, [(prob, cfg.node_limit) for _, prob in pairs], cfg.workers
    )
    orders = {win.index: sol.order for (win, _), sol in zip(pairs, solutions)}
    schedule = assemble_order(g, lin, orders, cfg.ops_per_step)
    return schedule, {win.index: sol for (win, _), sol in zip(pairs, solutions)}, pairs


def _leaf_stack_order(
    leaves: Sequence[SubgraphNode], items_by_leaf: Mapping[int, list[LayoutItem]]
) -> list[SubgraphNode]:
    """Longest-lived activation blocks stack lowest; leaves without
    activations go on top."""

    def key(leaf: SubgraphNode):
        atvs = [i for i in items_by_leaf.get(leaf.id, []) if i.is_activation]
        if not atvs:
            return (1, 0, 0, leaf.id)
        birth = min(a.start for a in atvs)
        death = max(a.end for a in atvs)
        return (0, birth, -death, leaf.id)

    return sorted(leaves, key=key)


def plan(g: Graph, cfg: PlannerConfig | None = None) -> ExecutionPlan:
    """Compute a full execution plan (schedule + static layout + stats)."""
    cfg = cfg or PlannerConfig()
    report = validate_graph(g)
    if not report.ok:
        raise StructuralError(f"invalid graph: {', '.join(report.kinds())}")
    if g.n_ops == 0:
        return ExecutionPlan(
            schedule=Schedule((), (), cfg.ops_per_step),
            layout=MemoryLayout(offsets={}, capacity=0),
            stats=PlanStats(0, 0, 0.0, 0, 0),
        )

    training = any(op.kind is OpKind.BACKWARD for op in g.ops)
    if training:
        tree = build_subgraph_tree(g, cfg.node_limit)
    else:
        tree = build_segment_tree(g, cfg.node_limit)
    lin = linearize(g, tree)

    candidates: list[WeightUpdatePlan | None] = [None]
    if training and tree.floating_ops:
        heuristic = place_weight_updates(g, tree, cfg.delay_radius, cfg.alpha)
        candidates = [heuristic]
        if heuristic.any_delayed():
            candidates.append(
                place_weight_updates(g, tree, cfg.delay_radius, cfg.alpha, force_immediate=True)
            )

    best: tuple[int, Schedule, dict[int, OrderingSolution], list, WeightUpdatePlan | None] | None = None
    for wu_plan in candidates:
        schedule, sols, pairs = _order_schedule(g, lin, wu_plan, cfg)
        peak, _ = peak_memory(g, schedule)
        if best is None or peak < best[0]:
            best = (peak, schedule, sols, pairs, wu_plan)
    assert best is not None
    peak, schedule, solutions, pairs, wu_plan = best

    # tensor ownership with weight-update branches routed to their target leaf
    leaf_of = dict(lin.leaf_of_op)
    if wu_plan is not None:
        for placement in wu_plan.placements:
            for v in placement.branch.ops:
                leaf_of[v] = placement.target_leaf
    ownership = assign_shared_tensors(tree, g, leaf_of)

    cats = classify_tensors(g)
    spans = tensor_lifetimes(g, schedule)
    items_by_leaf: dict[int, list[LayoutItem]] = {}
    for t in g.tensors:
        item = LayoutItem(
            tensor=t.id,
            size=t.size,
            start=spans[t.id][0],
            end=spans[t.id][1],
            is_activation=cats[t.id] is TensorCategory.ACTIVATION,
        )
        items_by_leaf.setdefault(ownership[t.id], []).append(item)

    leaves = tree.leaves()
    stacked = _leaf_stack_order(leaves, items_by_leaf)
    problems = [
        LayoutProblem(
            items=tuple(sorted(items_by_leaf.get(leaf.id, []), key=lambda i: i.tensor)),
            activations_at_bottom=True,
            time_budget=cfg.layout_budget,
            node_cap=cfg.layout_node_cap,
        )
        for leaf in stacked
    ]
    layouts = _pool_map(
        _solve_layout, [(p, cfg.layout_limit) for p in problems], cfg.workers
    )
    merged = concat_layouts(
        [(layout, problem.items) for layout, problem in zip(layouts, problems)]
    )
    all_items = tuple(
        sorted((i for p in problems for i in p.items), key=lambda i: i.tensor)
    )
    final = repair_conflicts(merged, LayoutProblem(items=all_items))
    violations = validate_layout(g, schedule, final)
    if violations:
        raise StructuralError(f"planned layout failed validation: {violations[:3]}")

    live = live_bytes_by_timestep(g, schedule)
    boundary_peaks = tuple(
        (ref, live[schedule.timesteps[ref]])
        for kind, ref in lin.slots
        if kind == "op"
    )
    leaf_reports = []
    optimal_leaves = 0
    layout_by_leaf = {leaf.id: lay for leaf, lay in zip(stacked, layouts)}
    for leaf in leaves:
        leaf_sols = [solutions[w.index] for (w, _p) in pairs if w.leaf == leaf.id]
        order_peak = max((s.peak for s in leaf_sols), default=0)
        order_opt = all(s.optimal for s in leaf_sols) if leaf_sols else True
        lay = layout_by_leaf[leaf.id]
        n_items = len(items_by_leaf.get(leaf.id, []))
        layout_opt = lay.optimal if n_items else True
        if order_opt and layout_opt:
            optimal_leaves += 1
        leaf_reports.append(
            LeafReport(
                leaf=leaf.id,
                order_peak=order_peak,
                order_optimal=order_opt,
                layout_capacity=lay.capacity,
                layout_optimal=layout_opt,
                n_ops=sum(len(w.ops) for (w, _p) in pairs if w.leaf == leaf.id),
                n_items=n_items,
            )
        )

    stats = PlanStats(
        theoretical_peak=peak,
        capacity=final.capacity,
        fragmentation_pct=fragmentation_pct(final.capacity, peak),
        optimal_leaves=optimal_leaves,
        total_leaves=len(leaves),
        leaf_reports=tuple(leaf_reports),
        boundary_peaks=boundary_peaks,
        delayed_branches=sum(
            1 for p in (wu_plan.placements if wu_plan else ()) if p.delayed
        ),
    )
    return ExecutionPlan(schedule=schedule, layout=final, stats=stats)


@dataclass(frozen=True)
class BaselineRow:
    name: str
    theoretical_peak: int
    capacity: int
    fragmentation: float
    peak_saving_pct: float
    capacity_saving_pct: float


@dataclass(frozen=True)
class ComparisonReport:
    plan: ExecutionPlan
    rows: tuple[BaselineRow, ...]


def compare_baselines(
    g: Graph, cfg: PlannerConfig | None = None, baselines: Sequence[str] = BASELINES
) -> ComparisonReport:
    """Run baseline order/layout combinations against the planner.

    definition-order and greedy-order pair the baseline order with the dynamic
    caching-allocator model; llfb-layout and caching-allocator keep the
    planner's schedule and swap only the layout side.
    """
    from .ordering import whole_graph_problem
    from .simulator import AllocatorModel, replay_dynamic

    cfg = cfg or PlannerConfig()
    for name in baselines:
        if name not in BASELINES:
            raise ConfigError(f"unknown baseline {name!r}")
    result = plan(g, cfg)
    plan_peak = result.stats.theoretical_peak
    plan_cap = result.stats.capacity

    from .graph import sequential_schedule

    rows: list[BaselineRow] = []
    for name in baselines:
        if name == "definition-order":
            schedule = sequential_schedule(g, range(g.n_ops), cfg.ops_per_step)
            peak, _ = peak_memory(g, schedule)
            cap, frag, _trace = replay_dynamic(g, schedule, AllocatorModel())
        elif name == "greedy-order":
            sol = greedy_order(whole_graph_problem(g, cfg.ops_per_step, cfg.order_budget))
            schedule = sequential_schedule(g, sol.order, cfg.ops_per_step)
            peak, _ = peak_memory(g, schedule)
            cap, frag, _trace = replay_dynamic(g, schedule, AllocatorModel())
        elif name == "llfb-layout":
            schedule = result.schedule
            peak = plan_peak
            from .layout import items_from_schedule

            lay = llfb_layout(LayoutProblem(items=items_from_schedule(g, schedule)))
            cap = lay.capacity
            frag = fragmentation_pct(cap, peak)
        else:  # caching-allocator on the planner's schedule
            schedule = result.schedule
            peak = plan_peak
            cap, frag, _trace = replay_dynamic(g, schedule, AllocatorModel())
        rows.append(
            BaselineRow(
                name=name,
                theoretical_peak=peak,
                capacity=cap,
                fragmentation=frag,
                peak_saving_pct=100.0 * (peak - plan_peak) / peak if peak else 0.0,
                capacity_saving_pct=100.0 * (cap - plan_cap) / cap if cap else 0.0,
            )
        )
    return ComparisonReport(plan=result, rows=tuple(rows))


def plan_to_doc(p: ExecutionPlan) -> dict:
    return {
        "schedule": list(p.schedule.order),
        "timesteps": {str(op): int(t) for op, t in enumerate(p.schedule.timesteps)},
        "layout": {str(t): int(off) for t, off in sorted(p.layout.offsets.items())},
        "capacity": int(p.layout.capacity),
        "stats": {
            "theoretical_peak": int(p.stats.theoretical_peak),
            "fragmentation_pct": float(p.stats.fragmentation_pct),
            "optimal_leaves": int(p.stats.optimal_leaves),
            "total_leaves": int(p.stats.total_leaves),
        },
    }


def plan_doc_bytes(p: ExecutionPlan) -> bytes:
    return (json.dumps(plan_to_doc(p), sort_keys=True, separators=(",", ":")) + "\n").encode()


def schedule_from_doc(doc: Mapping, g: Graph) -> Schedule:
    order = tuple(int(v) for v in doc["schedule"])
    steps = [0] * g.n_ops
    for key, t in doc["timesteps"].items():
        steps[int(key)] = int(t)
    buckets: dict[int, int] = {}
    for t in steps:
        buckets[t] = buckets.get(t, 0) + 1
    ops_per_step = max(buckets.values(), default=1)
    return Schedule(order=order, timesteps=tuple(steps), ops_per_step=ops_per_step)


def layout_from_doc(doc: Mapping) -> MemoryLayout:
    return MemoryLayout(
        offsets={int(k): int(v) for k, v in doc["layout"].items()},
        capacity=int(doc["capacity"]),
    )
