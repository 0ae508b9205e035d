"""Core vocabulary of the routing problem.

Queries, tools, panels, task families, ground truths, label alignment,
partial support, and the per-family cost functions. Everything here is
immutable after construction and freely shareable.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidPredictionError, UnknownTaskError


class TaskFamily(enum.Enum):
    CLASSIFICATION = "classification"
    GROUNDING = "grounding"
    REPORT_GENERATION = "report_generation"
    MULTIPLE_CHOICE = "multiple_choice"


CATEGORICAL_FAMILIES = (TaskFamily.CLASSIFICATION, TaskFamily.MULTIPLE_CHOICE)


@dataclass(frozen=True)
class CanonicalLabelSpace:
    """Shared output vocabulary of one task.

    ``labels`` is the ordered canonical label list for categorical tasks.
    For grounding it is empty and ``descriptor`` is "box"; for report
    generation ``pair_vocab`` enumerates the (finding, location) vocabulary.
    """
    task: int
    family: TaskFamily
    labels: tuple = ()
    descriptor: str = ""
    pair_vocab: tuple = ()

    def size(self):
        if self.family in CATEGORICAL_FAMILIES:
            return len(self.labels)
        if self.family is TaskFamily.GROUNDING:
            return 4  # box corners
        return len(self.pair_vocab)


@dataclass(frozen=True)
class Query:
    uid: int
    task: int
    x: np.ndarray  # image features, length d_x
    q: np.ndarray  # instruction features, length d_q


@dataclass(frozen=True)
class GroundTruth:
    family: TaskFamily
    # exactly one payload is populated, matching the family
    label: int = -1
    box: tuple = ()
    pairs: frozenset = frozenset()
    option: int = -1


@dataclass(frozen=True)
class LabeledQuery:
    query: Query
    gt: GroundTruth


@dataclass
class Tool:
    """A frozen specialist with partial task support and a label alignment map.

    ``alignment[task]`` maps each tool-label index to the tuple of canonical
    label indices it covers (non-empty). ``reference_sets[task]`` is filled in
    by the simulator once and never mutated afterwards.
    """
    tool_id: str
    index: int
    supported_tasks: frozenset
    alignment: dict
    tool_label_count: dict
    eta: np.ndarray
    reference_sets: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Panel:
    task: int
    tools: tuple  # ordered, m >= 2, duplicates allowed

    def __post_init__(self):
        if len(self.tools) < 2:
            raise ValueError(f"Panel requires m >= 2 tools, got {len(self.tools)}")


@dataclass(frozen=True)
class AlignedPrediction:
    """Tool output mapped into the canonical task space."""
    family: TaskFamily
    probs: np.ndarray = None   # canonical simplex (categorical families)
    box: tuple = ()
    pairs: frozenset = frozenset()
    is_null: bool = False


_FAMILY_TAGS = {f.value: f for f in TaskFamily}


def assign_task(descriptor):
    """Deterministically map a prompt descriptor to its task id."""
    family = descriptor.get("family")
    if family not in _FAMILY_TAGS:
        raise UnknownTaskError(f"unknown task family tag: {family!r}")
    return int(descriptor["task"])


def validity(tool, query):
    """True iff the tool supports the query's task."""
    return query.task in tool.supported_tasks


def null_prediction(space):
    """Uniform, uninformative output signalling abstention."""
    if space.family in CATEGORICAL_FAMILIES:
        n = space.size()
        return AlignedPrediction(space.family, probs=np.full(n, 1.0 / n), is_null=True)
    if space.family is TaskFamily.GROUNDING:
        return AlignedPrediction(space.family, box=(0.0, 0.0, 1.0, 1.0), is_null=True)
    return AlignedPrediction(space.family, pairs=frozenset(), is_null=True)


def align(tool, space, raw):
    """Map a raw tool prediction into the canonical task space.

    Categorical: canonical score of label y is the summed probability of
    tool labels whose pre-image contains y, renormalized onto the simplex.
    Grounding/report payloads pass through unchanged.
    """
    task = space.task
    if task not in tool.supported_tasks:
        return null_prediction(space)
    if space.family not in CATEGORICAL_FAMILIES:
        if space.family is TaskFamily.GROUNDING:
            return AlignedPrediction(space.family, box=tuple(raw))
        return AlignedPrediction(space.family, pairs=frozenset(raw))
    probs = np.asarray(raw, dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-6 or (probs < -1e-12).any():
        raise InvalidPredictionError(
            f"tool {tool.tool_id}: raw probabilities off the simplex (sum={probs.sum():.8f})")
    rho = tool.alignment[task]
    summed = np.zeros(space.size())
    for tool_label, canon_labels in rho.items():
        for y in canon_labels:
            summed[y] += probs[tool_label]
    total = summed.sum()
    if total <= 0.0:
        return null_prediction(space)
    return AlignedPrediction(space.family, probs=summed / total)


def iou(box_a, box_b):
    """Intersection-over-union of two (x1, y1, x2, y2) boxes in [0, 1]^2.

    Degenerate (zero-area) boxes score 0.
    """
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def pair_f1(pred_pairs, gt_pairs):
    """Exact-match F1 over (finding, location) pairs; two empty sets score 1."""
    if not pred_pairs and not gt_pairs:
        return 1.0
    if not pred_pairs or not gt_pairs:
        return 0.0
    hits = len(set(pred_pairs) & set(gt_pairs))
    precision = hits / len(pred_pairs)
    recall = hits / len(gt_pairs)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def cost(family, pred, gt, clipped_xent=False):
    """Bounded per-query cost of an aligned, non-null prediction."""
    if pred.is_null:
        raise ValueError("cost requested for a null prediction")
    if pred.family is not family or gt.family is not family:
        raise ValueError(f"cost: family mismatch ({pred.family} / {gt.family} vs {family})")
    if family is TaskFamily.CLASSIFICATION:
        if clipped_xent:
            p = float(np.clip(pred.probs[gt.label], 1e-12, 1.0))
            return min(1.0, -np.log(p))
        chosen = int(np.argmax(pred.probs))  # argmax ties -> lowest index
        return 0.0 if chosen == gt.label else 1.0
    if family is TaskFamily.MULTIPLE_CHOICE:
        chosen = int(np.argmax(pred.probs))
        return 0.0 if chosen == gt.option else 1.0
    if family is TaskFamily.GROUNDING:
        return 1.0 - iou(pred.box, gt.box)
    if family is TaskFamily.REPORT_GENERATION:
        return 1.0 - pair_f1(pred.pairs, gt.pairs)
    raise ValueError(f"unknown family {family}")
