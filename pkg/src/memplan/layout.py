"""Static memory-layout solvers and layout plumbing.

Offsets are byte-granular. The exact solver minimizes capacity subject to the
non-overlap rule (items with intersecting lifetimes get disjoint address
ranges) and, when requested, a constraint that keeps activations in one
contiguous block at offset 0 with lifetime-overlapping temporaries above it.
Candidate offsets are 0 (or the block top) and the tops of already-placed
items, which is sufficient for optimality by the downward-shift argument.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .graph import ConfigError, Graph, Schedule, StructuralError, tensor_lifetimes


@dataclass(frozen=True)
class LayoutItem:
    tensor: int
    size: int
    start: int
    end: int  # inclusive timestep
    is_activation: bool = False

    def overlaps(self, other: "LayoutItem") -> bool:
        return self.start <= other.end and other.start <= self.end


@dataclass(frozen=True)
class LayoutProblem:
    items: tuple[LayoutItem, ...]
    activations_at_bottom: bool = False
    time_budget: float = 60.0
    node_cap: int | None = None  # deterministic search cutoff (anytime)


@dataclass(frozen=True)
class LayoutStats:
    nodes: int
    wall_time: float


@dataclass(frozen=True)
class MemoryLayout:
    """Tensor offsets plus the capacity of the region they need.

    activation_block is the summed size of the activation items (the stacking
    base used when layouts are concatenated).
    """

    offsets: dict[int, int]
    capacity: int
    activation_block: int = 0
    optimal: bool = True
    stats: LayoutStats = LayoutStats(0, 0.0)


def clique_lower_bound(items: Iterable[LayoutItem]) -> int:
    """Max over timesteps of the summed sizes of live items."""
    items = list(items)
    best = 0
    for probe in items:
        t = probe.start
        best = max(best, sum(i.size for i in items if i.start <= t <= i.end))
    return best


def _lowest_fit(item: LayoutItem, placed: list[tuple[LayoutItem, int]], floor: int = 0) -> int:
    spans = sorted((off, off + it.size) for it, off in placed if it.overlaps(item))
    candidate = floor
    for lo, hi in spans:
        if candidate + item.size <= lo:
            break
        candidate = max(candidate, hi)
    return candidate


def _activation_floors(p: LayoutProblem) -> tuple[list[tuple[LayoutItem, int]], dict[int, int], int]:
    """Pre-place the activation block and derive each temporary's floor."""
    atvs = sorted(
        (i for i in p.items if i.is_activation),
        key=lambda i: (-(i.end - i.start), i.tensor),
    )
    placed: list[tuple[LayoutItem, int]] = []
    off = 0
    for a in atvs:
        placed.append((a, off))
        off += a.size
    floors: dict[int, int] = {}
    for i in p.items:
        if i.is_activation:
            continue
        floors[i.tensor] = off if any(i.overlaps(a) for a in atvs) else 0
    return placed, floors, off


def llfb_layout(p: LayoutProblem) -> MemoryLayout:
    """Long-lived-first best-fit baseline: items sorted by lifetime length
    descending (ties: larger size, then id) each take the lowest feasible
    offset. Ignores the activation constraint."""
    t0 = time.monotonic()
    order = sorted(p.items, key=lambda i: (-(i.end - i.start), -i.size, i.tensor))
    placed: list[tuple[LayoutItem, int]] = []
    capacity = 0
    for item in order:
        off = _lowest_fit(item, placed)
        placed.append((item, off))
        capacity = max(capacity, off + item.size)
    return MemoryLayout(
        offsets={it.tensor: off for it, off in placed},
        capacity=capacity,
        activation_block=sum(i.size for i in p.items if i.is_activation),
        optimal=False,
        stats=LayoutStats(len(p.items), time.monotonic() - t0),
    )


def _constrained_incumbent(p: LayoutProblem) -> tuple[dict[int, int], int]:
    placed, floors, _ = _activation_floors(p)
    rest = sorted(
        (i for i in p.items if not i.is_activation),
        key=lambda i: (-(i.end - i.start), -i.size, i.tensor),
    )
    capacity = sum(a.size for a, _ in placed)
    for item in rest:
        off = _lowest_fit(item, placed, floors[item.tensor])
        placed.append((item, off))
        capacity = max(capacity, off + item.size)
    return {it.tensor: off for it, off in placed}, capacity


def constrained_llfb_layout(p: LayoutProblem) -> MemoryLayout:
    """Long-lived-first fallback that still honors the activation block
    (used for problems past the exact solver's item limit)."""
    t0 = time.monotonic()
    offsets, capacity = _constrained_incumbent(p)
    return MemoryLayout(
        offsets=offsets,
        capacity=capacity,
        activation_block=sum(i.size for i in p.items if i.is_activation),
        optimal=False,
        stats=LayoutStats(len(p.items), time.monotonic() - t0),
    )


class _LayoutBudget(Exception):
    pass


def exact_layout(p: LayoutProblem) -> MemoryLayout:
    """Minimum-capacity placement via branch-and-bound over candidate offsets.

    Anytime: seeds a long-lived-first incumbent (constrained when the
    activation rule applies) and returns it flagged non-optimal on budget
    exhaustion."""
    t0 = time.monotonic()
    if p.time_budget <= 0:
        raise ConfigError("time budget must be positive")
    if not p.items:
        return MemoryLayout(offsets={}, capacity=0, stats=LayoutStats(0, 0.0))

    if p.activations_at_bottom:
        pre_placed, floors, block_top = _activation_floors(p)
        incumbent_offsets, incumbent_cap = _constrained_incumbent(p)
    else:
        pre_placed, floors, block_top = [], {i.tensor: 0 for i in p.items}, 0
        base = llfb_layout(p)
        incumbent_offsets, incumbent_cap = dict(base.offsets), base.capacity

    activation_block = sum(i.size for i in p.items if i.is_activation)
    rest = [i for i in p.items if not (p.activations_at_bottom and i.is_activation)]

    # Lifetime-disjoint groups never constrain each other (they may reuse the
    # same addresses), so each overlap-connected component solves on its own
    # and the capacity is the maximum over components.
    parent = {i.tensor: i.tensor for i in rest}

    def find(t: int) -> int:
        while parent[t] != t:
            parent[t] = parent[parent[t]]
            t = parent[t]
        return t

    for i, a in enumerate(rest):
        for b in rest[i + 1 :]:
            if a.overlaps(b):
                ra, rb = find(a.tensor), find(b.tensor)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[LayoutItem]] = {}
    for item in rest:
        groups.setdefault(find(item.tensor), []).append(item)

    deadline = t0 + p.time_budget
    node_cap = p.node_cap
    offsets: dict[int, int] = {it.tensor: off for it, off in pre_placed}
    capacity = block_top
    nodes_total = 0
    optimal = True

    class _Done(Exception):
        pass

    for root in sorted(groups):
        comp = sorted(groups[root], key=lambda i: (-(i.end - i.start), -i.size, i.tensor))
        # per-component lower bound: live bytes must fit disjointly, and
        # block-floored items additionally stack above the activation block
        bound_c = 0
        for probe in comp:
            t = probe.start
            live = [i for i in comp if i.start <= t <= i.end]
            total = sum(i.size for i in live)
            above = sum(i.size for i in live if floors[i.tensor])
            bound_c = max(bound_c, total, (block_top + above) if above else 0)

        placed: list[tuple[LayoutItem, int]] = []
        best_cap = 0
        for item in comp:  # long-lived-first incumbent inside the component
            off = _lowest_fit(item, placed, floors[item.tensor])
            placed.append((item, off))
            best_cap = max(best_cap, off + item.size)
        best_offsets = {it.tensor: off for it, off in placed}
        if best_cap > bound_c:
            order = sorted(comp, key=lambda i: (-i.size * (i.end - i.start + 1), i.tensor))
            n_c = len(order)
            sizes_c = [i.size for i in order]
            floor_c = [floors[i.tensor] for i in order]
            key_c = [(i.size, i.start, i.end, floors[i.tensor]) for i in order]
            ov = [0] * n_c
            for a in range(n_c):
                for b in range(a + 1, n_c):
                    if order[a].overlaps(order[b]):
                        ov[a] |= 1 << b
                        ov[b] |= 1 << a
            used_mask = 0
            off_c = [0] * n_c
            nodes = 0

            def search(depth: int, cap: int) -> None:
                nonlocal best_cap, best_offsets, nodes, used_mask
                nodes += 1
                if node_cap is not None and nodes_total + nodes > node_cap:
                    raise _LayoutBudget
                if nodes % 4096 == 0 and time.monotonic() > deadline:
                    raise _LayoutBudget
                if cap >= best_cap:
                    return
                if depth == n_c:
                    best_cap = cap
                    best_offsets = {order[i].tensor: off_c[i] for i in range(n_c)}
                    if best_cap <= bound_c:
                        raise _Done
                    return
                tried: set[tuple[int, int, int, int]] = set()
                for i in range(n_c):
                    if used_mask >> i & 1 or key_c[i] in tried:
                        continue
                    tried.add(key_c[i])
                    blockers = used_mask & ov[i]
                    spans = []
                    m = blockers
                    while m:
                        j = (m & -m).bit_length() - 1
                        m &= m - 1
                        spans.append((off_c[j], off_c[j] + sizes_c[j]))
                    spans.sort()
                    off = floor_c[i]
                    for lo, hi in spans:
                        if off + sizes_c[i] <= lo:
                            break
                        if hi > off:
                            off = hi
                    new_cap = cap if cap >= off + sizes_c[i] else off + sizes_c[i]
                    if new_cap >= best_cap:
                        continue
                    used_mask |= 1 << i
                    off_c[i] = off
                    search(depth + 1, new_cap)
                    used_mask &= ~(1 << i)

            try:
                search(0, 0)
            except _Done:
                pass
            except _LayoutBudget:
                optimal = False
            nodes_total += nodes
        offsets.update(best_offsets)
        capacity = max(capacity, best_cap)

    if optimal and capacity > incumbent_cap:
        raise StructuralError("layout search lost to its own incumbent")  # bug guard
    return MemoryLayout(
        offsets=offsets,
        capacity=capacity,
        activation_block=activation_block,
        optimal=optimal,
        stats=LayoutStats(nodes_total, time.monotonic() - t0),
    )


def layout_violations(
    items: Sequence[LayoutItem], offsets: Mapping[int, int], capacity: int
) -> list[str]:
    """Overlap / extent / missing-offset violations for an item set."""
    out: list[str] = []
    have = []
    for item in items:
        if item.tensor not in offsets:
            out.append(f"tensor {item.tensor} has no offset")
            continue
        off = offsets[item.tensor]
        if off < 0:
            out.append(f"tensor {item.tensor} has negative offset {off}")
        if off + item.size > capacity:
            out.append(
                f"tensor {item.tensor} extent {off + item.size} exceeds capacity {capacity}"
            )
        have.append((item, off))
    for i, (a, ao) in enumerate(have):
        for b, bo in have[i + 1 :]:
            if a.overlaps(b) and ao < bo + b.size and bo < ao + a.size:
                out.append(
                    f"tensors {a.tensor} and {b.tensor} overlap in time and address"
                )
    return out


def items_from_schedule(g: Graph, s: Schedule) -> tuple[LayoutItem, ...]:
    from .graph import classify_tensors, TensorCategory

    cats = classify_tensors(g)
    spans = tensor_lifetimes(g, s)
    return tuple(
        LayoutItem(
            tensor=t.id,
            size=t.size,
            start=spans[t.id][0],
            end=spans[t.id][1],
            is_activation=cats[t.id] is TensorCategory.ACTIVATION,
        )
        for t in g.tensors
    )


def validate_layout(g: Graph, s: Schedule, m: MemoryLayout) -> list[str]:
    """Empty iff no lifetime-overlapping pair shares addresses and every
    extent fits the capacity."""
    return layout_violations(items_from_schedule(g, s), m.offsets, m.capacity)


def _check_block_invariant(layout: MemoryLayout, items: Sequence[LayoutItem]) -> None:
    atvs = [i for i in items if i.is_activation]
    block = sum(a.size for a in atvs)
    covered = []
    for a in atvs:
        off = layout.offsets[a.tensor]
        if off + a.size > block:
            raise StructuralError(
                f"activation {a.tensor} at {off} escapes the bottom block of {block}"
            )
        covered.append((off, off + a.size))
    covered.sort()
    edge = 0
    for lo, hi in covered:
        if lo != edge:
            raise StructuralError("activation block is not contiguous from offset 0")
        edge = hi
    for i in items:
        if i.is_activation:
            continue
        off = layout.offsets[i.tensor]
        if off < block and any(i.overlaps(a) for a in atvs):
            raise StructuralError(
                f"temporary {i.tensor} at {off} sits under the activation block"
            )


def concat_layouts(
    parts: Sequence[tuple[MemoryLayout, Sequence[LayoutItem]]]
) -> MemoryLayout:
    """Stack per-subgraph layouts, ordered longest-lived activations first.

    Each layout shifts up by the cumulative activation-block bytes of the
    layouts below it; inputs must satisfy the activations-at-bottom invariant.
    """
    merged: dict[int, int] = {}
    capacity = 0
    base = 0
    for layout, items in parts:
        _check_block_invariant(layout, items)
        for item in items:
            if item.tensor in merged:
                raise StructuralError(f"tensor {item.tensor} owned by two layouts")
            merged[item.tensor] = base + layout.offsets[item.tensor]
        capacity = max(capacity, base + layout.capacity)
        base += layout.activation_block
    return MemoryLayout(
        offsets=merged,
        capacity=capacity,
        activation_block=sum(l.activation_block for l, _ in parts),
        optimal=all(l.optimal for l, _ in parts),
    )


def repair_conflicts(m: MemoryLayout, p: LayoutProblem) -> MemoryLayout:
    """Re-place the smaller, shorter-lived member of every conflicting pair.

    Activations and the larger/longer-lived side stay fixed; movers best-fit
    into free gaps, growing capacity only when no gap fits. The result passes
    layout validation for p's items.
    """
    by_id = {i.tensor: i for i in p.items}
    offsets = dict(m.offsets)
    capacity = m.capacity

    def conflicts() -> list[tuple[LayoutItem, LayoutItem]]:
        out = []
        items = sorted(p.items, key=lambda i: i.tensor)
        for i, a in enumerate(items):
            ao = offsets[a.tensor]
            for b in items[i + 1 :]:
                bo = offsets[b.tensor]
                if a.overlaps(b) and ao < bo + b.size and bo < ao + a.size:
                    out.append((a, b))
        return out

    def mover(a: LayoutItem, b: LayoutItem) -> LayoutItem:
        if a.is_activation != b.is_activation:
            return b if a.is_activation else a
        ka = (a.size, a.end - a.start, -a.tensor)
        kb = (b.size, b.end - b.start, -b.tensor)
        return a if ka < kb else b

    for _ in range(len(p.items) + 1):
        pairs = conflicts()
        if not pairs:
            break
        movers = sorted(
            {mover(a, b).tensor for a, b in pairs},
            key=lambda t: (by_id[t].size, by_id[t].end - by_id[t].start, t),
        )
        for t in movers:
            item = by_id[t]
            spans = sorted(
                (offsets[o], offsets[o] + by_id[o].size)
                for o in offsets
                if o != t and by_id[o].overlaps(item)
            )
            gaps: list[tuple[int, int]] = []  # free [lo, hi) for this lifetime
            edge = 0
            for lo, hi in spans:
                if lo > edge:
                    gaps.append((edge, lo))
                edge = max(edge, hi)
            if capacity > edge:
                gaps.append((edge, capacity))
            best: tuple[int, int] | None = None  # (gap size, offset)
            for lo, hi in gaps:
                if hi - lo >= item.size and (best is None or hi - lo < best[0]):
                    best = (hi - lo, lo)
            off = best[1] if best is not None else edge
            offsets[t] = off
            capacity = max(capacity, off + item.size)
    if conflicts():
        raise StructuralError("conflict repair did not converge")
    return replace(m, offsets=offsets, capacity=capacity)


def fragmentation_pct(actual: int, theoretical: int) -> float:
    """100 * (actual - theoretical) / actual; zero when both are zero."""
    if actual < theoretical:
        raise StructuralError(
            f"actual requirement {actual} below theoretical peak {theoretical}"
        )
    if actual == 0:
        return 0.0
    return 100.0 * (actual - theoretical) / actual
