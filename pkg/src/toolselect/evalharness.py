"""Evaluation harness: paired-panel routing over a split, per-task metrics,
and Random->Oracle gap-closure analysis."""

from dataclasses import dataclass, field

import numpy as np

from .domain import TaskFamily
from .simworld import sample_panel


@dataclass
class TaskMetrics:
    mean_cost: float
    metrics: dict
    count: int


@dataclass
class MetricsReport:
    router: str
    seed: int
    query_count: int
    mean_cost: float
    per_task: dict = field(default_factory=dict)   # task -> TaskMetrics
    histogram: dict = field(default_factory=dict)  # tool id -> selections
    gap_closure: float = None
    gap_closure_per_task: dict = field(default_factory=dict)


def eval_panels(world, split, m, seed):
    """Per-query panels keyed by the query uid; identical for every router
    evaluated with the same (world, split, m, seed)."""
    panels = []
    for lq in world.splits[split]:
        rng = np.random.default_rng([seed, 50331653, lq.query.uid])
        panels.append(sample_panel(
            world.populations[lq.query.task], lq.query, m, rng))
    return panels


def panel_digest(panels):
    import hashlib
    h = hashlib.sha256()
    for p in panels:
        h.update(repr([t.index for t in p.tools]).encode())
    return h.hexdigest()


def _macro_classification(confusion):
    """Macro accuracy/precision/recall/F1 from one confusion matrix."""
    k = confusion.shape[0]
    total = confusion.sum()
    accs, precs, recs, f1s = [], [], [], []
    for c in range(k):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        tn = total - tp - fp - fn
        accs.append((tp + tn) / total if total else 0.0)
        p = tp / (tp + fp) if (tp + fp) else 0.0
        r = tp / (tp + fn) if (tp + fn) else 0.0
        precs.append(p)
        recs.append(r)
        f1s.append(2 * p * r / (p + r) if (p + r) else 0.0)
    return {"accuracy": float(np.mean(accs)), "precision": float(np.mean(precs)),
            "recall": float(np.mean(recs)), "f1": float(np.mean(f1s))}


def evaluate(router, world, split, m, seed, panels=None):
    """Route every query of a split once and aggregate costs and metrics."""
    records = world.splits[split]
    if not records:
        raise ValueError(f"empty split {split!r}")
    if panels is None:
        panels = eval_panels(world, split, m, seed)
    rng = np.random.default_rng([seed, 86028121])
    by_task = {}
    histogram = {}
    for lq, panel in zip(records, panels):
        slot = router.route(lq, panel, rng)
        tool = panel.tools[slot]
        cost = world.tool_cost(tool, lq)
        pred = world.tool_prediction(tool, lq.query)
        histogram[tool.tool_id] = histogram.get(tool.tool_id, 0) + 1
        bucket = by_task.setdefault(lq.query.task, {"costs": [], "extra": []})
        bucket["costs"].append(cost)
        bucket["extra"].append((pred, lq.gt))

    per_task = {}
    all_costs = []
    for task in sorted(by_task):
        spec = world.task_spec(task)
        costs = by_task[task]["costs"]
        all_costs.extend(costs)
        extra = by_task[task]["extra"]
        if spec.family in (TaskFamily.CLASSIFICATION, TaskFamily.MULTIPLE_CHOICE):
            k = len(spec.space.labels)
            conf = np.zeros((k, k), dtype=np.int64)
            for pred, gt in extra:
                truth = gt.label if spec.family is TaskFamily.CLASSIFICATION else gt.option
                conf[truth, int(np.argmax(pred.probs))] += 1
            metrics = _macro_classification(conf)
            if spec.family is TaskFamily.MULTIPLE_CHOICE:
                metrics = {"accuracy": float(np.trace(conf) / conf.sum())}
        elif spec.family is TaskFamily.GROUNDING:
            metrics = {"mean_iou": float(np.mean([1.0 - c for c in costs]))}
        else:
            metrics = {"findings_f1": float(np.mean([1.0 - c for c in costs]))}
        per_task[task] = TaskMetrics(mean_cost=float(np.mean(costs)),
                                     metrics=metrics, count=len(costs))
    return MetricsReport(router=router.name, seed=seed, query_count=len(records),
                         mean_cost=float(np.mean(all_costs)), per_task=per_task,
                         histogram=histogram)


def gap_closure(c_method, c_random, c_oracle):
    """(random - method) / (random - oracle); None when the gap is empty."""
    if c_random <= c_oracle:
        return None
    return (c_random - c_method) / (c_random - c_oracle)


def compare(routers, world, split, m, seed):
    """Evaluate routers on shared panels; attach gap closures when both
    Random and Oracle are present."""
    panels = eval_panels(world, split, m, seed)
    reports = {}
    for router in routers:
        reports[router.name] = evaluate(router, world, split, m, seed, panels=panels)
    rnd = reports.get("Random")
    orc = reports.get("Oracle")
    if rnd is not None and orc is not None:
        for rep in reports.values():
            rep.gap_closure = gap_closure(rep.mean_cost, rnd.mean_cost, orc.mean_cost)
            for task, tm in rep.per_task.items():
                rep.gap_closure_per_task[task] = gap_closure(
                    tm.mean_cost, rnd.per_task[task].mean_cost,
                    orc.per_task[task].mean_cost)
    return reports


def machine_records(reports):
    """One machine-readable line per (router, task); round-trips exactly."""
    lines = []
    for name in sorted(reports):
        rep = reports[name]
        for task in sorted(rep.per_task):
            tm = rep.per_task[task]
            parts = [f"router={name}", f"task={task}",
                     f"count={tm.count}", f"mean_cost={tm.mean_cost!r}"]
            for key in sorted(tm.metrics):
                parts.append(f"metric_{key}={tm.metrics[key]!r}")
            gc = rep.gap_closure_per_task.get(task)
            if gc is not None:
                parts.append(f"gap_closure={gc!r}")
            lines.append(" ".join(parts))
    return lines


def parse_machine_record(line):
    out = {}
    for token in line.split():
        key, value = token.split("=", 1)
        if key in ("router",):
            out[key] = value
        elif key in ("task", "count"):
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out


def render_report(reports):
    """Fixed-width table: one row per router, columns per task."""
    names = list(reports)
    tasks = sorted(next(iter(reports.values())).per_task)
    header = ["router".ljust(12), "cost".rjust(8), "gapcl".rjust(8)]
    for t in tasks:
        header.append(f"t{t}:cost".rjust(10))
        header.append(f"t{t}:metric".rjust(11))
    lines = ["  ".join(header)]
    for name in names:
        rep = reports[name]
        gc = "-" if rep.gap_closure is None else f"{rep.gap_closure:.3f}"
        row = [name.ljust(12), f"{rep.mean_cost:.4f}".rjust(8), gc.rjust(8)]
        for t in tasks:
            tm = rep.per_task[t]
            primary = sorted(tm.metrics)[0]
            row.append(f"{tm.mean_cost:.4f}".rjust(10))
            row.append(f"{tm.metrics[primary]:.4f}".rjust(11))
        lines.append("  ".join(row))
    return "\n".join(lines) + "\n"
