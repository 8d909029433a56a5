"""Independent brute-force oracles used to freeze expected values.

These deliberately avoid the library's solver machinery: order enumeration is
plain recursion without memoization, and the layout oracle enumerates item
permutations with lowest-fit placement.
"""

from __future__ import annotations

from memplan.graph import Graph, peak_memory, sequential_schedule


def all_topological_orders(g: Graph):
    """Yield every topological order of g (plain backtracking)."""
    n = g.n_ops
    indeg = [len(p) for p in g.direct_preds]
    order: list[int] = []

    def rec():
        if len(order) == n:
            yield tuple(order)
            return
        for v in range(n):
            if indeg[v] == 0 and v not in order:
                order.append(v)
                for w in g.direct_succs[v]:
                    indeg[w] -= 1
                yield from rec()
                for w in g.direct_succs[v]:
                    indeg[w] += 1
                order.pop()

    yield from rec()


def count_topological_orders(g: Graph, cap: int = 10**9) -> int:
    """Number of topological orders, stopping early once `cap` is exceeded."""
    count = 0
    for _ in all_topological_orders(g):
        count += 1
        if count > cap:
            return count
    return count


def min_peak_by_enumeration(g: Graph) -> tuple[int, tuple[int, ...]]:
    """Minimum theoretical peak over all topological orders, via full
    enumeration and the public peak evaluator."""
    best = None
    best_order = None
    for order in all_topological_orders(g):
        peak, _ = peak_memory(g, sequential_schedule(g, order))
        if best is None or peak < best:
            best, best_order = peak, order
    assert best is not None, "graph has no topological order"
    return best, best_order


def _overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def min_capacity_by_enumeration(items: list[tuple[int, tuple[int, int]]]) -> int:
    """Minimum layout capacity over all placement orders with lowest-fit
    candidate offsets.

    `items` is a list of (size, (start, end)) with inclusive lifetimes. For a
    fixed order, each item goes to the lowest candidate offset (0 or the top
    of an already-placed overlapping item) that fits; the minimum over all
    orders is the exact optimum. Branches whose running capacity already
    exceeds the incumbent are cut, which does not affect the minimum.
    """
    n = len(items)
    if n == 0:
        return 0
    best = sum(size for size, _ in items)  # stacking everything always works
    placed: list[tuple[int, int, tuple[int, int]]] = []  # offset, size, span
    used = [False] * n

    def lowest_fit(size: int, span: tuple[int, int]) -> int:
        conflicts = sorted(
            (off, off + sz) for off, sz, sp in placed if _overlaps(sp, span)
        )
        candidate = 0
        for lo, hi in conflicts:
            if candidate + size <= lo:
                break
            candidate = max(candidate, hi)
        return candidate

    def rec(depth: int, cap: int):
        nonlocal best
        if cap >= best:
            return
        if depth == n:
            best = cap
            return
        for i in range(n):
            if used[i]:
                continue
            size, span = items[i]
            off = lowest_fit(size, span)
            used[i] = True
            placed.append((off, size, span))
            rec(depth + 1, max(cap, off + size))
            placed.pop()
            used[i] = False

    rec(0, 0)
    return best


def naive_closure_sets(g: Graph) -> tuple[list[set[int]], list[set[int]]]:
    """Transitive predecessor/successor sets via repeated DFS (oracle for
    asap/alap and memory-insensitivity checks)."""

    def reach(start: int, nbrs) -> set[int]:
        seen: set[int] = set()
        stack = list(nbrs(start))
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            stack.extend(nbrs(v))
        return seen

    preds = [reach(v, lambda u: g.direct_preds[u]) for v in range(g.n_ops)]
    succs = [reach(v, lambda u: g.direct_succs[u]) for v in range(g.n_ops)]
    return preds, succs
