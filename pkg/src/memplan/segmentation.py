"""Graph segmentation: memory-insensitive operators, independent segments,
the three-level subgraph tree, and shared-tensor ownership routing.

Training graphs decompose into independent subgraphs, each pairing a forward
segment with the backward segment that frees its activations; oversized
subgraphs split further into dependent subgraphs along interior
memory-insensitive operators. Inference graphs decompose into plain
independent segments between consecutive memory-insensitive operators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from .graph import (
    ConfigError,
    Graph,
    OpKind,
    ScheduleBounds,
    StructuralError,
    TensorCategory,
    TensorInfo,
    WeightUpdateBranch,
    classify_tensors,
    predecessor_masks,
    successor_masks,
    weight_update_branches,
)


class SharedTensorType(str, Enum):
    CIFO = "cifo"  # created in, freed outside
    COFI = "cofi"  # created outside, freed inside
    COFO = "cofo"  # created and freed outside


class TensorNotShared(Exception):
    """The tensor is fully internal to the subgraph; caller should skip it."""


@dataclass(frozen=True)
class Segment:
    """Run of operators strictly between two memory-insensitive boundaries."""

    lo: int | None
    hi: int | None
    members: tuple[int, ...]


@dataclass
class SubgraphNode:
    """Node of the subgraph tree. Treated as immutable once the tree is built.

    For two-sided nodes the four boundary fields name the forward/backward
    memory-insensitive ops enclosing the node; contiguous nodes (the middle
    subgraph, residual runs, dependent slices of the middle) only use
    outer_fwd/outer_bwd as their left/right cut ops.
    """

    id: int
    kind: str  # root | independent | dependent
    outer_fwd: int | None = None
    inner_fwd: int | None = None
    inner_bwd: int | None = None
    outer_bwd: int | None = None
    members: tuple[int, ...] = ()
    children: tuple["SubgraphNode", ...] = ()
    owned_tensors: tuple[int, ...] = ()
    unsplittable: bool = False
    tag: str = ""  # "", "middle", "residual", "tail", "catchall"
    floating_ops: tuple[int, ...] = ()  # root only: relocatable weight-update ops
    pinned_ops: tuple[int, ...] = ()  # root only: every forced boundary op

    def boundary_ops(self) -> tuple[int, ...]:
        seen = []
        for b in (self.outer_fwd, self.inner_fwd, self.inner_bwd, self.outer_bwd):
            if b is not None and b not in seen:
                seen.append(b)
        return tuple(seen)

    def leaves(self) -> list["SubgraphNode"]:
        if not self.children:
            return [self]
        out: list[SubgraphNode] = []
        for c in self.children:
            out.extend(c.leaves())
        return out

    def walk(self) -> list["SubgraphNode"]:
        out = [self]
        for c in self.children:
            out.extend(c.walk())
        return out


def find_memory_insensitive(g: Graph) -> set[int]:
    """Ops comparable with every other op: |preds| + |succs| = n - 1."""
    n = g.n_ops
    preds = predecessor_masks(g)
    succs = successor_masks(g)
    return {
        v for v in range(n) if bin(preds[v]).count("1") + bin(succs[v]).count("1") == n - 1
    }


def _mi_over(g: Graph, ops: list[int]) -> list[int]:
    """Memory-insensitive ops of the induced sub-DAG, sorted by forced position."""
    preds = predecessor_masks(g, ops)
    succs = successor_masks(g, ops)
    n = len(ops)
    mi = [
        v for v in ops if bin(preds[v]).count("1") + bin(succs[v]).count("1") == n - 1
    ]
    mi.sort(key=lambda v: bin(preds[v]).count("1"))
    return mi


def independent_segments(g: Graph) -> list[Segment]:
    """Segments of an inference graph between consecutive memory-insensitive ops."""
    mi = _mi_over(g, list(range(g.n_ops)))
    preds = predecessor_masks(g)
    segments = []
    for gap in range(len(mi) + 1):
        members = tuple(
            sorted(
                v
                for v in range(g.n_ops)
                if v not in mi and sum((preds[v] >> m) & 1 for m in mi) == gap
            )
        )
        lo = mi[gap - 1] if gap > 0 else None
        hi = mi[gap] if gap < len(mi) else None
        segments.append(Segment(lo=lo, hi=hi, members=members))
    return segments


@dataclass
class _TreeBuild:
    g: Graph
    node_limit: int
    preds: list[int]
    categories: dict[int, TensorCategory]
    branches: list[WeightUpdateBranch]
    next_id: int = 1

    def new_node(self, **kw) -> SubgraphNode:
        node = SubgraphNode(id=self.next_id, **kw)
        self.next_id += 1
        return node

    def before(self, a: int, b: int) -> bool:
        return bool((self.preds[b] >> a) & 1)

    def position(self, v: int) -> int:
        return bin(self.preds[v]).count("1")

    def wu_load(self, region: Iterable[int]) -> int:
        """Ops of weight-update branches whose gradient is produced in region."""
        rs = set(region)
        total = 0
        for br in self.branches:
            producers = {self.g.tensors[t].producer for t in br.gradients}
            if producers & rs:
                total += len(br.ops)
        return total

    def load(self, region: Iterable[int]) -> int:
        region = list(region)
        return len(region) + self.wu_load(region)


def _region_between(build: _TreeBuild, core: Iterable[int], lo: int | None, hi: int | None) -> list[int]:
    """Core ops strictly between lo and hi (None = unbounded on that side)."""
    out = []
    for v in core:
        if v == lo or v == hi:
            continue
        if lo is not None and not build.before(lo, v):
            continue
        if hi is not None and not build.before(v, hi):
            continue
        out.append(v)
    return sorted(out)


def _format_ig_ok(build: _TreeBuild, members: set[int], boundary: set[int]) -> bool:
    """Independent-subgraph test: every activation touching the candidate's
    members is both produced and consumed within it (tensors of boundary ops
    are exempt: they are the constant cross-segment links)."""
    g = build.g
    inside = members | boundary
    for t in g.tensors:
        if build.categories[t.id] is not TensorCategory.ACTIVATION:
            continue
        if t.producer in members and any(c not in inside for c in t.consumers):
            return False
        if any(c in members for c in t.consumers) and t.producer not in inside:
            return False
    return True


def _pair_backward(
    build: _TreeBuild, fwd_cut: int, fwd_ops: Iterable[int], bwd_candidates: list[int]
) -> int | None:
    """Earliest backward MI op at or after every consumer of activations
    produced by forward ops strictly after the cut point."""
    g = build.g
    consumers: set[int] = set()
    for v in fwd_ops:
        if v == fwd_cut or not build.before(fwd_cut, v):
            continue
        for t in g.ops[v].outputs:
            if build.categories[t] is TensorCategory.ACTIVATION:
                consumers.update(g.tensors[t].consumers)
    for b in sorted(bwd_candidates, key=build.position):
        if all(c == b or build.before(c, b) for c in consumers):
            return b
    return None


def _split_contiguous(build: _TreeBuild, node: SubgraphNode, interior_mi: list[int]) -> None:
    """Split a contiguous oversized node into dependent runs along its interior
    memory-insensitive ops, greedily keeping each run within node_limit."""
    cuts = sorted(interior_mi, key=build.position)
    members = [v for v in node.members if v not in cuts]
    runs: list[list[int]] = [[] for _ in range(len(cuts) + 1)]
    for v in members:
        rank = sum(1 for c in cuts if build.before(c, v))
        runs[rank].append(v)

    children: list[SubgraphNode] = []
    acc: list[int] = list(runs[0])
    left: int | None = node.outer_fwd
    for i, cut in enumerate(cuts):
        nxt = runs[i + 1]
        if acc and build.load(acc) + build.load(nxt) + 1 > build.node_limit:
            children.append(
                build.new_node(
                    kind="dependent", outer_fwd=left, outer_bwd=cut, members=tuple(sorted(acc))
                )
            )
            left = cut
            acc = list(nxt)
        else:
            acc.extend([cut, *nxt])
    children.append(
        build.new_node(
            kind="dependent", outer_fwd=left, outer_bwd=node.outer_bwd, members=tuple(sorted(acc))
        )
    )
    for c in children:
        if build.load(c.members) > build.node_limit:
            c.unsplittable = True
    node.children = tuple(children)


def _split_two_sided(build: _TreeBuild, node: SubgraphNode, interior_mi: list[int]) -> None:
    """Split an oversized two-sided subgraph along paired interior MI ops.

    Shells are walked inside out; consecutive shells merge while the combined
    op load stays within node_limit."""
    g = build.g
    fwd_members = [v for v in node.members if build.before(v, node.inner_fwd)]
    bwd_members = [v for v in node.members if build.before(node.inner_bwd, v)]
    fwd_cuts = [m for m in interior_mi if m in fwd_members and g.ops[m].kind is OpKind.FORWARD]
    bwd_cand = [m for m in interior_mi if m in bwd_members and g.ops[m].kind is OpKind.BACKWARD]
    fwd_cuts.sort(key=build.position, reverse=True)  # innermost first

    pairs: list[tuple[int, int]] = []
    available = list(bwd_cand)
    for m in fwd_cuts:
        b = _pair_backward(build, m, fwd_members, available)
        if b is None:
            continue
        pairs.append((m, b))
        available = [x for x in available if build.before(b, x)]
    if not pairs:
        node.unsplittable = True
        return

    cut_ops = {m for m, _ in pairs} | {b for _, b in pairs}
    plain_f = [v for v in fwd_members if v not in cut_ops]
    plain_b = [v for v in bwd_members if v not in cut_ops]

    def shell(i: int) -> list[int]:
        f_hi = pairs[i - 1][0] if i > 0 else node.inner_fwd
        f_lo = pairs[i][0] if i < len(pairs) else node.outer_fwd
        b_lo = pairs[i - 1][1] if i > 0 else node.inner_bwd
        b_hi = pairs[i][1] if i < len(pairs) else node.outer_bwd
        return _region_between(build, plain_f, f_lo, f_hi) + _region_between(build, plain_b, b_lo, b_hi)

    children: list[SubgraphNode] = []
    acc = shell(0)
    inner_pair = (node.inner_fwd, node.inner_bwd)
    for i, (m, b) in enumerate(pairs):
        nxt = shell(i + 1)
        if acc and build.load(acc) + build.load(nxt) + 2 > build.node_limit:
            children.append(
                build.new_node(
                    kind="dependent",
                    outer_fwd=m,
                    inner_fwd=inner_pair[0],
                    inner_bwd=inner_pair[1],
                    outer_bwd=b,
                    members=tuple(sorted(acc)),
                )
            )
            inner_pair = (m, b)
            acc = list(nxt)
        else:
            acc.extend([m, b, *nxt])
    children.append(
        build.new_node(
            kind="dependent",
            outer_fwd=node.outer_fwd,
            inner_fwd=inner_pair[0],
            inner_bwd=inner_pair[1],
            outer_bwd=node.outer_bwd,
            members=tuple(sorted(acc)),
        )
    )
    for c in children:
        if build.load(c.members) > build.node_limit:
            c.unsplittable = True
    node.children = tuple(children)


def _split_if_oversized(build: _TreeBuild, node: SubgraphNode, mi_core: list[int]) -> None:
    if build.load(node.members) <= build.node_limit:
        return
    interior = [m for m in mi_core if m in set(node.members)]
    if not interior:
        node.unsplittable = True
        return
    if node.inner_fwd is None:
        _split_contiguous(build, node, interior)
    else:
        _split_two_sided(build, node, interior)


def build_subgraph_tree(g: Graph, node_limit: int) -> SubgraphNode:
    """Divide a training graph into the three-level subgraph tree.

    Inner boundaries start empty; outer boundaries start at the last
    forward-pass and first backward-pass memory-insensitive ops and expand
    outward, forming an independent subgraph whenever the activation-closure
    test passes. Oversized subgraphs split into dependent children. Ops never
    covered by a successful pair fall into residual leaves; relocatable
    weight-update branches float and are excluded from the comparability core.
    """
    if node_limit < 2:
        raise ConfigError("node_limit must be >= 2")
    if not any(op.kind is OpKind.BACKWARD for op in g.ops):
        raise StructuralError("graph has no backward pass; segment it as an inference graph")

    branches = weight_update_branches(g)
    floating = sorted(op for b in branches for op in b.ops)
    core = [v for v in range(g.n_ops) if v not in set(floating)]
    build = _TreeBuild(
        g=g,
        node_limit=node_limit,
        preds=predecessor_masks(g),
        categories=classify_tensors(g),
        branches=branches,
    )
    mi_core = _mi_over(g, core)
    fwd_mi = [v for v in mi_core if g.ops[v].kind is OpKind.FORWARD]
    bwd_mi = [v for v in mi_core if g.ops[v].kind is OpKind.BACKWARD]

    igs: list[SubgraphNode] = []
    used: set[int] = set()
    if fwd_mi and bwd_mi:
        inner_f: int | None = None
        inner_b: int | None = None
        fi, bi = len(fwd_mi) - 1, 0
        while fi >= 0 and bi < len(bwd_mi):
            of, ob = fwd_mi[fi], bwd_mi[bi]
            if inner_f is None:
                members = _region_between(build, core, of, ob)
                boundary = {of, ob}
            else:
                fwd_part = _region_between(build, core, of, inner_f)
                bwd_part = _region_between(build, core, inner_b, ob)
                members = sorted(fwd_part + bwd_part)
                boundary = {of, ob, inner_f, inner_b}
            if _format_ig_ok(build, set(members), boundary):
                igs.append(
                    build.new_node(
                        kind="independent",
                        outer_fwd=of,
                        inner_fwd=inner_f,
                        inner_bwd=inner_b,
                        outer_bwd=ob,
                        members=tuple(members),
                        tag="middle" if inner_f is None else "",
                    )
                )
                used.update((of, ob))
                inner_f, inner_b = of, ob
            fi -= 1
            bi += 1

    covered: set[int] = set(used)
    for node in igs:
        covered.update(node.members)
    uncovered = [v for v in core if v not in covered]
    residuals: list[SubgraphNode] = []
    if uncovered:
        sorted_used = sorted(used, key=build.position)
        groups: dict[int, list[int]] = {}
        for v in uncovered:
            rank = sum(1 for b in sorted_used if build.before(b, v))
            groups.setdefault(rank, []).append(v)
        for rank in sorted(groups):
            lo = sorted_used[rank - 1] if rank > 0 else None
            hi = sorted_used[rank] if rank < len(sorted_used) else None
            residuals.append(
                build.new_node(
                    kind="independent",
                    outer_fwd=lo,
                    outer_bwd=hi,
                    members=tuple(sorted(groups[rank])),
                    tag="residual",
                )
            )

    for node in igs + residuals:
        _split_if_oversized(build, node, mi_core)

    children = igs + residuals
    if not children:
        children.append(build.new_node(kind="independent", tag="catchall"))
    children.append(build.new_node(kind="independent", tag="tail"))
    pinned: set[int] = set()
    for node in children:
        pinned.update(node.boundary_ops())
        for c in node.children:
            pinned.update(c.boundary_ops())
    return SubgraphNode(
        id=0,
        kind="root",
        members=(),
        children=tuple(children),
        floating_ops=tuple(floating),
        pinned_ops=tuple(sorted(pinned)),
    )


def build_segment_tree(g: Graph, node_limit: int) -> SubgraphNode:
    """Flat decomposition of an inference graph into independent segments."""
    if node_limit < 2:
        raise ConfigError("node_limit must be >= 2")
    segments = independent_segments(g)
    next_id = 1
    children: list[SubgraphNode] = []
    for seg in segments:
        if not seg.members:
            continue
        node = SubgraphNode(
            id=next_id,
            kind="independent",
            outer_fwd=seg.lo,
            outer_bwd=seg.hi,
            members=seg.members,
            unsplittable=len(seg.members) > node_limit,
        )
        next_id += 1
        children.append(node)
    if not children:
        children.append(SubgraphNode(id=next_id, kind="independent", tag="catchall"))
    mi = _mi_over(g, list(range(g.n_ops)))
    return SubgraphNode(
        id=0, kind="root", children=tuple(children), pinned_ops=tuple(sorted(mi))
    )


@dataclass(frozen=True)
class Window:
    """Contiguous run of one leaf's ops between two boundary slots."""

    index: int
    leaf: int
    ops: tuple[int, ...]


@dataclass(frozen=True)
class Linearization:
    """Global slot skeleton of the schedule: alternating windows and forced
    boundary ops, in time order. Windows of a two-sided leaf appear twice
    (forward part and backward part)."""

    slots: tuple[tuple[str, int], ...]  # ("op", op_id) | ("win", window_index)
    windows: tuple[Window, ...]
    leaf_of_op: dict[int, int]
    tail_window: int | None


def linearize(g: Graph, root: SubgraphNode) -> Linearization:
    preds = predecessor_masks(g)
    leaves = root.leaves()
    member_leaf: dict[int, int] = {}
    for leaf in leaves:
        for v in leaf.members:
            member_leaf[v] = leaf.id

    boundary_set: set[int] = set(root.pinned_ops)
    if not boundary_set:
        for node in root.walk():
            boundary_set.update(node.boundary_ops())
    boundaries = sorted(boundary_set, key=lambda v: bin(preds[v]).count("1"))

    floating = set(root.floating_ops)
    gap_ops: dict[int, list[int]] = {}
    for v in range(g.n_ops):
        if v in boundary_set or v in floating:
            continue
        rank = sum(1 for b in boundaries if (preds[v] >> b) & 1)
        gap_ops.setdefault(rank, []).append(v)

    windows: list[Window] = []
    slots: list[tuple[str, int]] = []
    gap_window: dict[int, int] = {}
    for gap in range(len(boundaries) + 1):
        ops = sorted(gap_ops.get(gap, []))
        if ops:
            owners = {member_leaf.get(v) for v in ops}
            if len(owners) != 1 or None in owners:
                raise StructuralError(f"window ops {ops} span leaves {owners}")
            windows.append(Window(index=len(windows), leaf=owners.pop(), ops=tuple(ops)))
            gap_window[gap] = windows[-1].index
            slots.append(("win", windows[-1].index))
        if gap < len(boundaries):
            slots.append(("op", boundaries[gap]))

    tail_window: int | None = None
    for leaf in leaves:
        if leaf.tag == "tail":
            tail_window = len(windows)
            windows.append(Window(index=tail_window, leaf=leaf.id, ops=()))
            slots.append(("win", tail_window))

    leaf_of_op: dict[int, int] = dict(member_leaf)
    catchall = next((l.id for l in leaves if l.tag == "catchall"), None)
    nonempty_gaps = sorted(gap_window)
    for i, b in enumerate(boundaries):
        # a boundary op belongs to the segment it closes: the nearest window
        # before it, falling back to the nearest after, then the catch-all
        before = [gap for gap in nonempty_gaps if gap <= i]
        after = [gap for gap in nonempty_gaps if gap > i]
        if before:
            leaf_of_op[b] = windows[gap_window[before[-1]]].leaf
        elif after:
            leaf_of_op[b] = windows[gap_window[after[0]]].leaf
        elif catchall is not None:
            leaf_of_op[b] = catchall
        else:
            raise StructuralError("no leaf available for boundary op assignment")

    for br in weight_update_branches(g):
        if br.ops and br.ops[0] in floating:
            producer = g.tensors[br.gradients[0]].producer
            for v in br.ops:
                leaf_of_op[v] = leaf_of_op[producer]

    return Linearization(
        slots=tuple(slots),
        windows=tuple(windows),
        leaf_of_op=leaf_of_op,
        tail_window=tail_window,
    )


def classify_shared_tensor(
    t: TensorInfo, node: SubgraphNode, s_bounds: ScheduleBounds
) -> SharedTensorType:
    """CIFO/COFI/COFO classification of a tensor against one subgraph node.

    Raises TensorNotShared for tensors fully internal to the node.
    """
    inside = set(node.members) | set(node.boundary_ops())
    produced_in = t.producer in inside
    if t.consumers:
        last = max(t.consumers, key=lambda c: (s_bounds.asap[c], c))
        freed_in = last in inside
    else:
        freed_in = False
    if produced_in and freed_in:
        raise TensorNotShared(f"tensor {t.id} is internal to node {node.id}")
    if produced_in:
        return SharedTensorType.CIFO
    if freed_in:
        return SharedTensorType.COFI
    return SharedTensorType.COFO


def assign_shared_tensors(
    tree: SubgraphNode, g: Graph, leaf_of: Mapping[int, int] | None = None
) -> dict[int, int]:
    """Route every tensor to the single leaf that lays it out.

    Tensors created in the backward or weight-update pass stay with their
    creating leaf; everything else goes to the leaf of its last consumer
    (where it is freed). COFO occurrences are never assigned. Also records
    owned_tensors on the leaves.
    """
    lin = linearize(g, tree)
    if leaf_of is None:
        leaf_of = lin.leaf_of_op

    slot_pos: dict[int, int] = {}
    for pos, (kind, ref) in enumerate(lin.slots):
        if kind == "op":
            slot_pos[ref] = pos
        else:
            for v in lin.windows[ref].ops:
                slot_pos[v] = pos
    for v in range(g.n_ops):
        if v not in slot_pos:  # floating weight-update op: position of its leaf
            leaf = leaf_of[v]
            win_pos = [
                pos
                for pos, (kind, ref) in enumerate(lin.slots)
                if kind == "win" and lin.windows[ref].leaf == leaf
            ]
            slot_pos[v] = win_pos[-1] if win_pos else len(lin.slots)

    ownership: dict[int, int] = {}
    for t in g.tensors:
        producer_kind = g.ops[t.producer].kind
        if producer_kind in (OpKind.BACKWARD, OpKind.WEIGHT_UPDATE) or not t.consumers:
            ownership[t.id] = leaf_of[t.producer]
        else:
            last = max(t.consumers, key=lambda c: (slot_pos[c], c))
            ownership[t.id] = leaf_of[last]

    owned: dict[int, list[int]] = {}
    for tid, leaf in ownership.items():
        owned.setdefault(leaf, []).append(tid)
    for leaf in tree.leaves():
        leaf.owned_tensors = tuple(sorted(owned.get(leaf.id, [])))
    return ownership
