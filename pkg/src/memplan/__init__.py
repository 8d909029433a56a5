"""Memory-efficient execution plans for DNN training computation graphs.

Computes a peak-minimizing operator order and a fragmentation-free static
tensor memory layout by dividing the graph into a subgraph tree and solving
each leaf exactly.
"""

from .graph import (
    Graph,
    OpKind,
    OpNode,
    Schedule,
    ScheduleBounds,
    TensorCategory,
    TensorInfo,
    asap_alap,
    classify_tensors,
    graph_to_doc,
    load_graph,
    peak_memory,
    sequential_schedule,
    validate_graph,
)
from .layout import (
    LayoutItem,
    LayoutProblem,
    MemoryLayout,
    concat_layouts,
    exact_layout,
    fragmentation_pct,
    llfb_layout,
    repair_conflicts,
    validate_layout,
)
from .ordering import (
    OrderingProblem,
    OrderingSolution,
    assemble_order,
    exact_order,
    greedy_order,
    place_weight_updates,
    weight_update_cost,
    whole_graph_problem,
)
from .planner import ExecutionPlan, PlannerConfig, compare_baselines, plan
from .segmentation import (
    SharedTensorType,
    SubgraphNode,
    assign_shared_tensors,
    build_subgraph_tree,
    classify_shared_tensor,
    find_memory_insensitive,
    independent_segments,
)
from .simulator import AllocatorModel, replay_dynamic, replay_static

__all__ = [name for name in dir() if not name.startswith("_")]
