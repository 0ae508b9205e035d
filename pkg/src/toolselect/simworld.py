"""Synthetic agentic tool-zoo environment.

Generates task families with canonical label spaces, tool populations with
region-dependent competence and partial task support, labeled query splits,
frozen per-tool reference sets, and deterministic tool predictions.

Tool competence is a radial function of the distance between the query's
image features and the tool's expertise centroid, which makes the identity
of the per-query best tool vary across the feature space.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .domain import (
    AlignedPrediction,
    CanonicalLabelSpace,
    GroundTruth,
    LabeledQuery,
    Panel,
    Query,
    TaskFamily,
    Tool,
    align,
    cost,
    iou,
    null_prediction,
    validity,
)
from .errors import NoValidPanelError

FAMILY_CYCLE = (
    TaskFamily.CLASSIFICATION,
    TaskFamily.GROUNDING,
    TaskFamily.REPORT_GENERATION,
    TaskFamily.MULTIPLE_CHOICE,
)


@dataclass
class WorldConfig:
    n_tasks_per_family: int = 1
    d_x: int = 16
    d_q: int = 8
    tools_per_task: int = 12
    labels_per_task: int = 5
    mcq_options: int = 4
    n_findings: int = 6
    n_locations: int = 4
    p_max: float = 0.95
    p_floor: float = -1.0  # <0 means per-task default (1/|Y_t|, or 0.05)
    sharpness: float = 4.0
    support_prob: float = 0.8
    n_train: int = 5000
    n_val: int = 500
    n_test: int = 1000
    n_ref_pool: int = 2000
    feature_noise: float = 0.3
    hint_noise: float = 0.3
    ref_size: int = 16
    clipped_xent: bool = False
    n_tasks_total: int = 0  # 0 -> one task per family cycle entry

    def n_tasks(self):
        if self.n_tasks_total > 0:
            return self.n_tasks_total
        return 4 * self.n_tasks_per_family


@dataclass
class TaskSpec:
    task: int
    family: TaskFamily
    space: CanonicalLabelSpace
    centroids: np.ndarray          # (K, d_x) query-class centroids
    hint_codes: np.ndarray = None  # codes mixed into the instruction features
    box_center_map: np.ndarray = None
    box_size_map: np.ndarray = None
    centroid_pairs: tuple = ()     # report: canonical pair per centroid
    p_floor: float = 0.05
    # grounding noise calibration: kappa grid -> perturbation scale
    calib_kappa: np.ndarray = None
    calib_scale: np.ndarray = None


@dataclass
class SimTool(Tool):
    mu: np.ndarray = None
    beta: float = 4.0
    pmax: float = 0.95
    home_task: int = 0


@dataclass
class SimWorld:
    cfg: WorldConfig
    seed: int
    tasks: list
    populations: dict              # task -> list[SimTool]
    all_tools: list
    splits: dict                   # name -> list[LabeledQuery]
    ref_pools: dict                # task -> list[LabeledQuery]
    _pred_cache: dict = field(default_factory=dict)

    def task_spec(self, task):
        return self.tasks[task]

    def split_by_task(self, split):
        out = {spec.task: [] for spec in self.tasks}
        for lq in self.splits[split]:
            out[lq.query.task].append(lq)
        return out

    def tool_prediction(self, tool, query):
        """Deterministic aligned prediction of a tool on a query (cached)."""
        key = (tool.index, query.uid)
        hit = self._pred_cache.get(key)
        if hit is None:
            rng = np.random.default_rng([self.seed, 104729, tool.index, query.uid])
            hit = tool_predict(self, tool, query, rng)
            self._pred_cache[key] = hit
        return hit

    def tool_cost(self, tool, lq):
        """Realized cost of a tool on a labeled query; None when invalid."""
        if not validity(tool, lq.query):
            return None
        pred = self.tool_prediction(tool, lq.query)
        spec = self.task_spec(lq.query.task)
        return cost(spec.family, pred, lq.gt, clipped_xent=self.cfg.clipped_xent)


def _box_from_x(spec, x):
    cx, cy = 0.5 + 0.45 * np.tanh(spec.box_center_map @ x)
    w, h = 0.2 + 0.1 * np.tanh(spec.box_size_map @ x)
    x1 = max(0.0, cx - w / 2.0)
    y1 = max(0.0, cy - h / 2.0)
    x2 = min(1.0, cx + w / 2.0)
    y2 = min(1.0, cy + h / 2.0)
    return (float(x1), float(y1), float(x2), float(y2))


def _perturb_boxes(boxes, scale, rng=None, normals=None):
    """Vectorized box perturbation used both for calibration and prediction."""
    n = boxes.shape[0]
    if normals is None:
        normals = rng.standard_normal((n, 4))
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0 + scale * 0.25 * normals[:, 0]
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0 + scale * 0.25 * normals[:, 1]
    w = (boxes[:, 2] - boxes[:, 0]) * np.exp(scale * normals[:, 2])
    h = (boxes[:, 3] - boxes[:, 1]) * np.exp(scale * normals[:, 3])
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return np.clip(out, 0.0, 1.0)


def _iou_vec(a, b):
    iw = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0.0, None) * np.clip(a[:, 3] - a[:, 1], 0.0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0.0, None) * np.clip(b[:, 3] - b[:, 1], 0.0, None)
    union = area_a + area_b - inter
    out = np.zeros(a.shape[0])
    ok = union > 0
    out[ok] = inter[ok] / union[ok]
    out[(area_a <= 0) | (area_b <= 0)] = 0.0
    return out


def _calibrate_box_noise(spec, cfg, rng, n_probe=256, n_draws=4):
    """Bisect a perturbation scale per kappa so mean IoU tracks kappa."""
    probes = np.empty((n_probe, 4))
    for i in range(n_probe):
        k = rng.integers(len(spec.centroids))
        x = spec.centroids[k] + cfg.feature_noise * rng.standard_normal(cfg.d_x)
        probes[i] = _box_from_x(spec, x)
    tiled = np.repeat(probes, n_draws, axis=0)
    normals = rng.standard_normal((tiled.shape[0], 4))
    kappas = np.linspace(spec.p_floor, cfg.p_max, 9)
    scales = np.empty_like(kappas)
    for gi, kappa in enumerate(kappas):
        lo, hi = 0.0, 4.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            mean_iou = _iou_vec(tiled, _perturb_boxes(tiled, mid, normals=normals)).mean()
            if mean_iou > kappa:
                lo = mid
            else:
                hi = mid
        scales[gi] = 0.5 * (lo + hi)
    return kappas, scales


def _make_task(cfg, task, family, rng):
    hint_dim = cfg.d_q - cfg.n_tasks()
    if hint_dim < 2:
        raise ValueError("d_q must exceed the task count by at least 2")
    if family is TaskFamily.CLASSIFICATION:
        k = cfg.labels_per_task
        space = CanonicalLabelSpace(task, family, labels=tuple(range(k)))
    elif family is TaskFamily.MULTIPLE_CHOICE:
        k = cfg.mcq_options
        space = CanonicalLabelSpace(task, family, labels=tuple(range(k)))
    elif family is TaskFamily.GROUNDING:
        k = 5
        space = CanonicalLabelSpace(task, family, descriptor="box")
    else:
        vocab = tuple((f, l) for f in range(cfg.n_findings) for l in range(cfg.n_locations))
        k = 5
        space = CanonicalLabelSpace(task, family, pair_vocab=vocab)
    spec = TaskSpec(
        task=task,
        family=family,
        space=space,
        centroids=rng.uniform(-1.0, 1.0, size=(k, cfg.d_x)),
    )
    if family in (TaskFamily.CLASSIFICATION, TaskFamily.MULTIPLE_CHOICE):
        codes = rng.standard_normal((k, hint_dim))
        spec.hint_codes = codes / np.linalg.norm(codes, axis=1, keepdims=True)
        spec.p_floor = 1.0 / k if cfg.p_floor < 0 else cfg.p_floor
    elif family is TaskFamily.GROUNDING:
        spec.box_center_map = rng.standard_normal((2, cfg.d_x)) / math.sqrt(cfg.d_x)
        spec.box_size_map = rng.standard_normal((2, cfg.d_x)) / math.sqrt(cfg.d_x)
        spec.p_floor = 0.05 if cfg.p_floor < 0 else cfg.p_floor
    else:
        pair_idx = rng.choice(len(space.pair_vocab), size=k, replace=False)
        spec.centroid_pairs = tuple(space.pair_vocab[i] for i in pair_idx)
        codes = rng.standard_normal((len(space.pair_vocab), hint_dim))
        spec.hint_codes = codes / np.linalg.norm(codes, axis=1, keepdims=True)
        spec.p_floor = 0.05 if cfg.p_floor < 0 else cfg.p_floor
    return spec


def _make_tool(cfg, tasks, home_task, index, rng):
    n_tasks = len(tasks)
    supported = [t for t in range(n_tasks) if rng.random() < cfg.support_prob]
    if not supported:
        supported = [home_task]
    alignment = {}
    tool_label_count = {}
    for t in supported:
        spec = tasks[t]
        if spec.family in (TaskFamily.CLASSIFICATION, TaskFamily.MULTIPLE_CHOICE):
            k = len(spec.space.labels)
            if rng.random() < 0.5 or k < 3:
                alignment[t] = {i: (i,) for i in range(k)}
                tool_label_count[t] = k
            else:
                # coarsened variant: two canonical labels share one tool label
                a, b = sorted(rng.choice(k, size=2, replace=False).tolist())
                rho = {}
                canon = [lab for lab in range(k) if lab not in (a, b)]
                for i, lab in enumerate(canon):
                    rho[i] = (lab,)
                rho[k - 2] = (a, b)
                alignment[t] = rho
                tool_label_count[t] = k - 1
        else:
            alignment[t] = {}
            tool_label_count[t] = 0
    eta = np.array([len(supported) / n_tasks, rng.uniform()])
    return SimTool(
        tool_id=f"t{home_task}_tool{index % cfg.tools_per_task:02d}",
        index=index,
        supported_tasks=frozenset(supported),
        alignment=alignment,
        tool_label_count=tool_label_count,
        eta=eta,
        mu=rng.uniform(-1.0, 1.0, size=cfg.d_x),
        beta=cfg.sharpness * rng.uniform(0.5, 1.5),
        pmax=cfg.p_max * rng.uniform(0.8, 1.0),
        home_task=home_task,
    )


def _report_pair_set(spec, x):
    """Ground-truth finding pairs for a report query, derivable from x alone."""
    dists = np.linalg.norm(spec.centroids - x, axis=1)
    n_pairs = 1 + int(np.floor(np.clip(1.5 * (np.tanh(x[0]) + 1.0), 0.0, 2.999)))
    nearest = np.argsort(dists)[:n_pairs]
    return frozenset(spec.centroid_pairs[j] for j in nearest)


def _canon_to_tool_label(tool, task, y):
    for tool_label, canon in tool.alignment[task].items():
        if y in canon:
            return tool_label
    raise KeyError(f"label {y} has no pre-image for tool {tool.tool_id} task {task}")


def sample_query(world, task, rng, uid):
    """Draw one labeled query for a task."""
    cfg = world.cfg
    spec = world.task_spec(task)
    hint_dim = cfg.d_q - cfg.n_tasks()
    task_onehot = np.zeros(cfg.n_tasks())
    task_onehot[task] = 1.0
    k = rng.integers(len(spec.centroids))
    x = spec.centroids[k] + cfg.feature_noise * rng.standard_normal(cfg.d_x)
    if spec.family in (TaskFamily.CLASSIFICATION, TaskFamily.MULTIPLE_CHOICE):
        y = int(k)
        hint = spec.hint_codes[y] + cfg.hint_noise * rng.standard_normal(hint_dim)
        if spec.family is TaskFamily.CLASSIFICATION:
            gt = GroundTruth(spec.family, label=y)
        else:
            gt = GroundTruth(spec.family, option=y)
    elif spec.family is TaskFamily.GROUNDING:
        box = _box_from_x(spec, x)
        hint = np.zeros(hint_dim)
        hint[: min(4, hint_dim)] = np.asarray(box)[: min(4, hint_dim)]
        hint = hint + cfg.hint_noise * rng.standard_normal(hint_dim)
        gt = GroundTruth(spec.family, box=box)
    else:
        pairs = _report_pair_set(spec, x)
        codes = [spec.hint_codes[spec.space.pair_vocab.index(p)] for p in sorted(pairs)]
        hint = np.mean(codes, axis=0) + cfg.hint_noise * rng.standard_normal(hint_dim)
        gt = GroundTruth(spec.family, pairs=pairs)
    q = np.concatenate([task_onehot, hint])
    return LabeledQuery(Query(uid=uid, task=task, x=x, q=q), gt)


def competence(world, tool, task, x):
    spec = world.task_spec(task)
    dist2 = float(np.sum((x - tool.mu) ** 2)) / world.cfg.d_x
    return spec.p_floor + (tool.pmax - spec.p_floor) * math.exp(-tool.beta * dist2)


def tool_predict(world, tool, query, rng):
    """Raw tool output aligned into the canonical space; null if unsupported."""
    task = query.task
    spec = world.task_spec(task)
    if task not in tool.supported_tasks:
        return null_prediction(spec.space)
    kappa = competence(world, tool, task, query.x)
    if spec.family in (TaskFamily.CLASSIFICATION, TaskFamily.MULTIPLE_CHOICE):
        # ground truth is recoverable from the query's nearest centroid
        y = int(np.argmin(np.linalg.norm(spec.centroids - query.x, axis=1)))
        k_tool = tool.tool_label_count[task]
        correct = _canon_to_tool_label(tool, task, y)
        if rng.random() < kappa:
            chosen = correct
        else:
            wrong = [i for i in range(k_tool) if i != correct]
            chosen = int(wrong[rng.integers(len(wrong))]) if wrong else correct
        raw = np.full(k_tool, 0.1 / max(1, k_tool - 1))
        raw[chosen] = 0.9
        if k_tool == 1:
            raw[:] = 1.0
        return align(tool, spec.space, raw)
    if spec.family is TaskFamily.GROUNDING:
        gt_box = np.asarray(_box_from_x(spec, query.x))[None, :]
        scale = float(np.interp(kappa, spec.calib_kappa, spec.calib_scale))
        pred = _perturb_boxes(gt_box, scale, rng)[0]
        return align(tool, spec.space, tuple(float(v) for v in pred))
    # report generation: gt pair set is derivable from x
    kept = [p for p in sorted(_report_pair_set(spec, query.x)) if rng.random() < kappa]
    pred_pairs = set(kept)
    if rng.random() < (1.0 - kappa):
        extra = spec.space.pair_vocab[rng.integers(len(spec.space.pair_vocab))]
        pred_pairs.add(extra)
    return align(tool, spec.space, frozenset(pred_pairs))


def sample_panel(population, query, m, rng, max_attempts=100):
    """Sample m i.i.d. tools; redraw whole panel until one is valid."""
    if not population:
        raise NoValidPanelError("empty tool population")
    if m < 2:
        raise ValueError("panel size m must be >= 2")
    for _ in range(max_attempts):
        idx = rng.integers(0, len(population), size=m)
        tools = tuple(population[i] for i in idx)
        if any(validity(t, query) for t in tools):
            return Panel(task=query.task, tools=tools)
    raise NoValidPanelError(
        f"no valid panel for query {query.uid} after {max_attempts} attempts")


def build_reference_sets(world, ref_size, rng):
    """Populate every tool's per-task reference set from the reference pools."""
    if ref_size < 1:
        raise ValueError("ref_size must be >= 1")
    for tool in world.all_tools:
        tool.reference_sets = {}
        for task in sorted(tool.supported_tasks):
            pool = world.ref_pools[task]
            idx = rng.choice(len(pool), size=min(ref_size, len(pool)), replace=False)
            elements = []
            for i in idx:
                lq = pool[i]
                pred = world.tool_prediction(tool, lq.query)
                elements.append((lq.query.x, lq.gt, pred))
            tool.reference_sets[task] = elements


def generate_world(cfg, seed):
    rng = np.random.default_rng([seed, 15485863])
    n_tasks = cfg.n_tasks()
    tasks = []
    for t in range(n_tasks):
        tasks.append(_make_task(cfg, t, FAMILY_CYCLE[t % 4], rng))
    populations = {}
    all_tools = []
    index = 0
    for t in range(n_tasks):
        pop = []
        for _ in range(cfg.tools_per_task):
            tool = _make_tool(cfg, tasks, t, index, rng)
            pop.append(tool)
            all_tools.append(tool)
            index += 1
        populations[t] = pop
    for spec in tasks:
        if spec.family is TaskFamily.GROUNDING:
            spec.calib_kappa, spec.calib_scale = _calibrate_box_noise(spec, cfg, rng)
    world = SimWorld(cfg=cfg, seed=seed, tasks=tasks, populations=populations,
                     all_tools=all_tools, splits={}, ref_pools={})
    uid = 0
    for name, total in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        records = []
        for t in range(n_tasks):
            count = total // n_tasks + (1 if t < total % n_tasks else 0)
            for _ in range(count):
                records.append(sample_query(world, t, rng, uid))
                uid += 1
        world.splits[name] = records
    for t in range(n_tasks):
        count = cfg.n_ref_pool // n_tasks
        pool = []
        for _ in range(count):
            pool.append(sample_query(world, t, rng, uid))
            uid += 1
        world.ref_pools[t] = pool
    build_reference_sets(world, cfg.ref_size, rng)
    return world


def regenerate_test_tools(world, fraction, seed):
    """Return a copy of the world whose populations contain a share of fresh
    tools (new centroids, fresh reference sets); queries/splits are shared."""
    cfg = world.cfg
    rng = np.random.default_rng([seed, 32452843])
    # keep the original seed so surviving tools predict identically
    new_world = SimWorld(cfg=cfg, seed=world.seed, tasks=world.tasks,
                         populations={}, all_tools=[], splits=world.splits,
                         ref_pools=world.ref_pools)
    # surviving tools keep their indices so fitted routers still recognize
    # them; fresh tools get indices past the original range
    next_index = max(t.index for t in world.all_tools) + 1
    for t in range(cfg.n_tasks()):
        pop = []
        n_replace = int(round(fraction * len(world.populations[t])))
        for i, tool in enumerate(world.populations[t]):
            if i < n_replace:
                made = _make_tool(cfg, world.tasks, t, next_index, rng)
                fresh = SimTool(
                    tool_id=f"t{t}_fresh{i:02d}", index=next_index,
                    supported_tasks=made.supported_tasks, alignment=made.alignment,
                    tool_label_count=made.tool_label_count, eta=made.eta,
                    mu=made.mu, beta=made.beta, pmax=made.pmax, home_task=t)
                next_index += 1
                pop.append(fresh)
            else:
                pop.append(tool)
        new_world.populations[t] = pop
        new_world.all_tools.extend(pop)
    fresh_tools = [tool for tool in new_world.all_tools if not tool.reference_sets]
    for tool in fresh_tools:
        for task in sorted(tool.supported_tasks):
            pool = new_world.ref_pools[task]
            idx = rng.choice(len(pool), size=min(cfg.ref_size, len(pool)), replace=False)
            tool.reference_sets[task] = [
                (pool[i].query.x, pool[i].gt, new_world.tool_prediction(tool, pool[i].query))
                for i in idx]
    return new_world


def world_digest(world):
    """Stable hash of every generated array, for determinism checks."""
    import hashlib
    h = hashlib.sha256()
    for spec in world.tasks:
        h.update(spec.centroids.tobytes())
        if spec.hint_codes is not None:
            h.update(spec.hint_codes.tobytes())
    for tool in world.all_tools:
        h.update(tool.mu.tobytes())
        h.update(np.float64(tool.beta).tobytes())
        h.update(repr(sorted(tool.supported_tasks)).encode())
    for name in ("train", "val", "test"):
        for lq in world.splits[name]:
            h.update(lq.query.x.tobytes())
            h.update(lq.query.q.tobytes())
    return h.hexdigest()
