"""Command-line interface: plan, eval, gen, compare, and viz subcommands.

Exit codes: 0 success, 1 usage error, 2 input or validation error,
3 internal invariant failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from xml.sax.saxutils import escape

from .graph import (
    ConfigError,
    Graph,
    GraphError,
    GraphFormatError,
    ScheduleError,
    StructuralError,
    classify_tensors,
    graph_to_doc,
    load_graph,
    peak_memory,
    tensor_lifetimes,
    validate_graph,
    validate_schedule,
)
from .graphgen import ARCHITECTURES, MB, OPTIMIZERS, SizeSpec, gen_greedy_trap, gen_random_dag, gen_training_graph
from .layout import fragmentation_pct, validate_layout
from .planner import (
    BASELINES,
    PlannerConfig,
    compare_baselines,
    layout_from_doc,
    plan,
    plan_doc_bytes,
    plan_to_doc,
    schedule_from_doc,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="memplan", description="Memory-efficient execution plans for training graphs")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_planner_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--node-limit", type=int, default=20)
        p.add_argument("--layout-limit", type=int, default=24)
        p.add_argument("--delay-radius", type=float, default=2.0)
        p.add_argument("--alpha", type=str, default="adam=3,sgd=1")
        p.add_argument("--ops-per-step", type=int, default=1)
        p.add_argument("--time-limit-order", type=float, default=60.0)
        p.add_argument("--time-limit-layout", type=float, default=60.0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)

    p_plan = sub.add_parser("plan", help="compute an execution plan for a graph")
    p_plan.add_argument("--graph", required=True)
    p_plan.add_argument("--out", required=True)
    add_planner_flags(p_plan)

    p_eval = sub.add_parser("eval", help="recompute and verify a plan's statistics")
    p_eval.add_argument("--graph", required=True)
    p_eval.add_argument("--plan", required=True)

    p_gen = sub.add_parser("gen", help="emit a synthetic graph document")
    p_gen.add_argument("--kind", choices=("training", "random", "trap"), default="training")
    p_gen.add_argument("--arch", choices=ARCHITECTURES, default="mlp")
    p_gen.add_argument("--blocks", type=int, default=2)
    p_gen.add_argument("--optimizer", choices=OPTIMIZERS, default="adam")
    p_gen.add_argument("--sizes", type=str, default="", help="MB overrides, e.g. parameter=48,activation=24")
    p_gen.add_argument("--n", type=int, default=8, help="op count for random graphs")
    p_gen.add_argument("--density", type=float, default=0.3)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)

    p_cmp = sub.add_parser("compare", help="compare the planner against baselines")
    p_cmp.add_argument("--graph", required=True)
    p_cmp.add_argument("--baselines", type=str, default=",".join(BASELINES))
    add_planner_flags(p_cmp)

    p_viz = sub.add_parser("viz", help="render a plan's memory layout as SVG")
    p_viz.add_argument("--graph", required=True)
    p_viz.add_argument("--plan", required=True)
    p_viz.add_argument("--out", required=True)
    return parser


def _parse_alpha(text: str) -> dict[str, float]:
    out: dict[str, float] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"bad --alpha entry {part!r}; expected name=value")
        name, value = part.split("=", 1)
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise UsageError(f"bad --alpha value {value!r}")
    if not out:
        raise UsageError("--alpha must name at least one optimizer")
    return out


def _parse_sizes(text: str) -> SizeSpec:
    if not text.strip():
        return SizeSpec()
    fields = {}
    valid = set(SizeSpec.__dataclass_fields__)
    for part in text.split(","):
        name, _, value = part.strip().partition("=")
        if name not in valid or not value:
            raise UsageError(f"bad --sizes entry {part!r}")
        fields[name] = int(value) * MB
    return SizeSpec(**fields)


def _config(args: argparse.Namespace) -> PlannerConfig:
    return PlannerConfig(
        node_limit=args.node_limit,
        layout_limit=args.layout_limit,
        delay_radius=args.delay_radius,
        alpha=_parse_alpha(args.alpha),
        ops_per_step=args.ops_per_step,
        order_budget=args.time_limit_order,
        layout_budget=args.time_limit_layout,
        seed=args.seed,
        workers=args.workers,
    )


def _load_graph_file(path: str) -> Graph:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise GraphFormatError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: invalid JSON: {exc}") from exc
    g = load_graph(doc)
    report = validate_graph(g)
    if not report.ok:
        raise StructuralError(f"{path}: " + "; ".join(v.message for v in report.violations))
    return g


def _cmd_plan(args: argparse.Namespace) -> int:
    g = _load_graph_file(args.graph)
    result = plan(g, _config(args))
    with open(args.out, "wb") as fh:
        fh.write(plan_doc_bytes(result))
    s = result.stats
    print(f"ops scheduled      : {len(result.schedule.order)}")
    print(f"theoretical peak   : {s.theoretical_peak} bytes")
    print(f"capacity           : {s.capacity} bytes")
    print(f"fragmentation      : {s.fragmentation_pct:.4f} %")
    print(f"optimal leaves     : {s.optimal_leaves}/{s.total_leaves}")
    print(f"delayed wu branches: {s.delayed_branches}")
    print(f"plan written to {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    g = _load_graph_file(args.graph)
    try:
        with open(args.plan, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise GraphFormatError(f"cannot read plan {args.plan}: {exc}")
    schedule = schedule_from_doc(doc, g)
    layout = layout_from_doc(doc)
    try:
        validate_schedule(g, schedule)
    except ScheduleError as exc:
        print(f"schedule violation: {exc}")
        return 2
    violations = validate_layout(g, schedule, layout)
    if violations:
        for v in violations:
            print(f"layout violation: {v}")
        return 2
    peak, _ = peak_memory(g, schedule)
    frag = fragmentation_pct(layout.capacity, peak)
    recomputed = {
        "theoretical_peak": peak,
        "capacity": layout.capacity,
        "fragmentation_pct": frag,
    }
    print(json.dumps(recomputed, sort_keys=True))
    stats = doc.get("stats", {})
    mismatches = []
    if stats.get("theoretical_peak") != peak:
        mismatches.append("theoretical_peak")
    if abs(stats.get("fragmentation_pct", 0.0) - frag) > 1e-9:
        mismatches.append("fragmentation_pct")
    if doc.get("capacity") != layout.capacity:
        mismatches.append("capacity")
    if mismatches:
        print(f"stats mismatch vs plan document: {', '.join(mismatches)}")
        return 2
    return 0


def _cmd_gen(args: argparse.Namespace) -> int:
    if args.kind == "training":
        g = gen_training_graph(
            args.arch, args.blocks, sizes=_parse_sizes(args.sizes), optimizer=args.optimizer, seed=args.seed
        )
    elif args.kind == "random":
        g = gen_random_dag(args.n, density=args.density, seed=args.seed)
    else:
        g = gen_greedy_trap(seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(graph_to_doc(g), fh, sort_keys=True)
        fh.write("\n")
    print(f"wrote {g.n_ops} ops / {g.n_tensors} tensors to {args.out}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    g = _load_graph_file(args.graph)
    names = [n.strip() for n in args.baselines.split(",") if n.strip()]
    report = compare_baselines(g, _config(args), names)
    s = report.plan.stats
    print(f"{'method':20s} {'peak':>14s} {'capacity':>14s} {'frag%':>8s} {'peak save%':>11s}")
    print(f"{'plan':20s} {s.theoretical_peak:14d} {s.capacity:14d} {s.fragmentation_pct:8.3f} {0.0:11.2f}")
    for row in report.rows:
        print(
            f"{row.name:20s} {row.theoretical_peak:14d} {row.capacity:14d} "
            f"{row.fragmentation:8.3f} {row.peak_saving_pct:11.2f}"
        )
    return 0


_CATEGORY_FILL = {
    "activation": "#4c72b0",
    "temporary_buffer": "#55a868",
    "gradient": "#c44e52",
    "weight": "#937860",
    "optimizer_state": "#8172b2",
}


def render_layout_svg(g: Graph, schedule, layout) -> str:
    """One rectangle per tensor: x spans its lifetime, y spans its extent."""
    spans = tensor_lifetimes(g, schedule)
    cats = classify_tensors(g)
    steps = max(schedule.n_steps, 1)
    cap = max(layout.capacity, 1)
    width, height, margin = 900.0, 500.0, 40.0
    sx = width / steps
    sy = height / cap
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width + 2 * margin:.0f}" '
        f'height="{height + 2 * margin:.0f}" viewBox="0 0 {width + 2 * margin:.0f} {height + 2 * margin:.0f}">',
        f'<rect x="{margin}" y="{margin}" width="{width}" height="{height}" fill="#f7f7f7" stroke="#333"/>',
    ]
    for t in g.tensors:
        if t.id not in layout.offsets:
            continue
        birth, death = spans[t.id]
        off = layout.offsets[t.id]
        x = margin + birth * sx
        w = (death - birth + 1) * sx
        y = margin + height - (off + t.size) * sy
        h = t.size * sy
        fill = _CATEGORY_FILL[cats[t.id].value]
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" '
            f'fill="{fill}" fill-opacity="0.8" stroke="#222" stroke-width="0.5">'
            f"<title>{escape(f'tensor {t.id} ({t.size} B) @ {off}')}</title></rect>"
        )
    parts.append(
        f'<text x="{margin}" y="{margin - 10}" font-size="13" font-family="monospace">'
        f"timesteps 0..{steps - 1}, capacity {layout.capacity} bytes</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _cmd_viz(args: argparse.Namespace) -> int:
    g = _load_graph_file(args.graph)
    try:
        with open(args.plan, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise GraphFormatError(f"cannot read plan {args.plan}: {exc}")
    schedule = schedule_from_doc(doc, g)
    layout = layout_from_doc(doc)
    validate_schedule(g, schedule)
    svg = render_layout_svg(g, schedule, layout)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(svg)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "plan": _cmd_plan,
    "eval": _cmd_eval,
    "gen": _cmd_gen,
    "compare": _cmd_compare,
    "viz": _cmd_viz,
}


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (GraphFormatError, ConfigError, ScheduleError, StructuralError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # internal invariant failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
