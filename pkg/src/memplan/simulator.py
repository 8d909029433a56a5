"""Schedule replay under a dynamic caching-allocator model and under a planned
static layout, measuring actual peak and fragmentation.

The dynamic model mimics framework memory pools: it best-fit scans a block
list, splits the chosen block, grows the high-water mark when nothing fits,
and coalesces adjacent free blocks on free. Variations in tensor size and
lifetime leave holes the pool cannot always reuse, which is the fragmentation
the static layout avoids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .graph import ConfigError, Graph, Schedule, peak_memory, tensor_lifetimes, validate_schedule
from .layout import MemoryLayout, fragmentation_pct, items_from_schedule, layout_violations


@dataclass
class _Block:
    start: int
    end: int
    free: bool

    def size(self) -> int:
        return self.end - self.start


@dataclass
class AllocatorModel:
    """Best-fit (or first-fit) pool with block splitting and coalescing."""

    policy: str = "best_fit_with_split"
    blocks: list[_Block] = field(default_factory=list)
    high_water: int = 0

    def __post_init__(self) -> None:
        if self.policy not in ("best_fit_with_split", "first_fit"):
            raise ConfigError(f"unknown allocator policy {self.policy!r}")

    def malloc(self, size: int) -> int:
        chosen: _Block | None = None
        for block in self.blocks:
            if not block.free or block.size() < size:
                continue
            if self.policy == "first_fit":
                chosen = block
                break
            if chosen is None or block.size() < chosen.size():
                chosen = block
        if chosen is not None:
            chosen.free = False
            remain = chosen.size() - size
            if remain:
                idx = self.blocks.index(chosen)
                self.blocks.insert(idx + 1, _Block(chosen.end - remain, chosen.end, True))
                chosen.end -= remain
            return chosen.start
        if self.blocks and self.blocks[-1].free:
            last = self.blocks[-1]
            last.end = last.start + size
            last.free = False
            self.high_water = last.end
            return last.start
        block = _Block(self.high_water, self.high_water + size, False)
        self.blocks.append(block)
        self.high_water = block.end
        return block.start

    def free(self, start: int) -> None:
        idx = next(i for i, b in enumerate(self.blocks) if b.start == start and not b.free)
        self.blocks[idx].free = True
        if idx + 1 < len(self.blocks) and self.blocks[idx + 1].free:
            self.blocks[idx].end = self.blocks[idx + 1].end
            self.blocks.pop(idx + 1)
        if idx > 0 and self.blocks[idx - 1].free:
            self.blocks[idx - 1].end = self.blocks[idx].end
            self.blocks.pop(idx)


@dataclass(frozen=True)
class TraceEvent:
    timestep: int
    action: str  # alloc | free
    tensor: int
    offset: int
    size: int

    def line(self) -> str:
        return f"{self.timestep}\t{self.action}\t{self.tensor}\t{self.offset}\t{self.size}"


def replay_dynamic(
    g: Graph, s: Schedule, a: AllocatorModel | None = None
) -> tuple[int, float, list[TraceEvent]]:
    """Replay a schedule through the allocator model.

    Outputs allocate at op start; tensors free after their last consumer's
    timestep. Returns (high-water mark, fragmentation vs the schedule's
    theoretical peak, event trace).
    """
    a = a or AllocatorModel()
    validate_schedule(g, s)
    spans = tensor_lifetimes(g, s)
    frees_at: dict[int, list[int]] = {}
    for t in g.tensors:
        frees_at.setdefault(spans[t.id][1], []).append(t.id)
    offsets: dict[int, int] = {}
    trace: list[TraceEvent] = []
    steps = s.n_steps
    by_step: dict[int, list[int]] = {}
    for op in s.order:
        by_step.setdefault(s.timesteps[op], []).append(op)
    for t in range(steps):
        for op in by_step.get(t, ()):
            for tensor in g.ops[op].outputs:
                off = a.malloc(g.tensors[tensor].size)
                offsets[tensor] = off
                trace.append(TraceEvent(t, "alloc", tensor, off, g.tensors[tensor].size))
        for tensor in sorted(frees_at.get(t, ())):
            a.free(offsets[tensor])
            trace.append(
                TraceEvent(t, "free", tensor, offsets[tensor], g.tensors[tensor].size)
            )
    peak, _ = peak_memory(g, s)
    return a.high_water, fragmentation_pct(a.high_water, peak), trace


def replay_static(
    g: Graph, s: Schedule, m: MemoryLayout
) -> tuple[int, list[str]]:
    """Simulate fixed-offset occupancy; returns (actual peak extent,
    violations). Valid plans replay with no violations."""
    validate_schedule(g, s)
    items = items_from_schedule(g, s)
    violations = layout_violations(items, m.offsets, m.capacity)
    actual = 0
    steps = s.n_steps
    for t in range(steps):
        extent = 0
        for item in items:
            if item.start <= t <= item.end and item.tensor in m.offsets:
                extent = max(extent, m.offsets[item.tensor] + item.size)
        actual = max(actual, extent)
    return actual, violations
