"""Training losses: hard selection loss, comp-sum surrogate, entropy and
score regularizers, coverage BCE, and the combined task-marginalized batch
objective."""

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc


@dataclass
class PanelCosts:
    costs: np.ndarray   # per slot; meaningful only where valid
    valid: np.ndarray   # boolean per slot

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not self.valid.any():
            raise ValueError("PanelCosts requires at least one valid slot")


@dataclass
class ObjectiveConfig:
    task_weights: np.ndarray = None  # simplex over tasks; None -> uniform
    lambda_h: float = 0.05
    lambda_r: float = 1e-4
    lambda_cov: float = 1.0
    eps: float = 1e-12

    def weight_for(self, task, n_tasks):
        if self.task_weights is None:
            return 1.0 / n_tasks
        return float(self.task_weights[task])


def selection_loss(pc, dist):
    """Realized cost of the selected tool (the hard routing loss)."""
    j = dist.selected
    if not pc.valid[j]:
        raise ValueError(f"selected slot {j} is invalid")
    return float(pc.costs[j])


def compsum_weights(pc):
    """w_j = (sum of the other valid slots' costs) - m_valid + 2.

    Invalid slots contribute neither cost nor count. Weights can go
    negative once more than two slots are valid.
    """
    m_valid = int(pc.valid.sum())
    total = float(pc.costs[pc.valid].sum())
    w = np.zeros_like(pc.costs)
    w[pc.valid] = total - pc.costs[pc.valid] - m_valid + 2.0
    return w


def compsum_loss(dist, weights, eps=1e-12):
    """Logistic comp-sum surrogate: sum over valid slots of w_j * -log(pi_j)."""
    logp = dc.log_clamped(dist.probs_t, eps)
    w = np.where(dist.mask, -np.asarray(weights, dtype=np.float64), 0.0)
    return dc.wsum(logp, w)


def entropy_reg(dist, eps=1e-12):
    """Shannon entropy of the selection distribution over valid slots."""
    logp = dc.log_clamped(dist.probs_t, eps)
    plogp = dc.mul(dist.probs_t, logp)
    return dc.wsum(plogp, np.where(dist.mask, -1.0, 0.0))


def coverage_loss_value(s, c):
    """Scalar BCE of a coverage score against the success target 1 - c."""
    s = min(max(float(s), 1e-12), 1.0 - 1e-12)
    return -(1.0 - c) * np.log(s) - c * np.log(1.0 - s)


def coverage_loss(s_t, costs, eps=1e-12):
    """Mean BCE of coverage scores (Tensor, 1-D) against targets 1 - cost."""
    costs = np.asarray(costs, dtype=np.float64)
    n = costs.size
    log_s = dc.log_clamped(s_t, eps)
    log_1ms = dc.log_clamped(dc.affine(s_t, -1.0, 1.0), eps)
    return dc.add(dc.wsum(log_s, -(1.0 - costs) / n), dc.wsum(log_1ms, -costs / n))


@dataclass
class BatchExample:
    dist: object            # SelectionDistribution with probs_t/scores_t
    pc: PanelCosts
    task: int
    coverage_t: object = None   # Tensor of coverage scores over valid slots
    coverage_costs: np.ndarray = None


def batch_objective(cfg, examples, n_tasks):
    """Mean task-weighted training loss over a batch; differentiable scalar.

    Per example: compsum - lambda_h * entropy + lambda_r * mean(r^2 over
    valid slots) + lambda_cov * mean coverage BCE, scaled by
    task_weight * n_tasks so uniform weights are neutral.
    """
    if not examples:
        raise ValueError("batch_objective: empty batch")
    terms = []
    for ex in examples:
        w = compsum_weights(ex.pc)
        loss = compsum_loss(ex.dist, w, cfg.eps)
        if cfg.lambda_h != 0.0:
            loss = dc.add(loss, dc.scale(entropy_reg(ex.dist, cfg.eps), -cfg.lambda_h))
        if cfg.lambda_r != 0.0:
            valid = ex.dist.mask
            sq = dc.mul(ex.dist.scores_t, ex.dist.scores_t)
            l2 = dc.wsum(sq, np.where(valid, 1.0 / valid.sum(), 0.0))
            loss = dc.add(loss, dc.scale(l2, cfg.lambda_r))
        if cfg.lambda_cov != 0.0 and ex.coverage_t is not None:
            loss = dc.add(loss, dc.scale(
                coverage_loss(ex.coverage_t, ex.coverage_costs, cfg.eps), cfg.lambda_cov))
        scale = cfg.weight_for(ex.task, n_tasks) * n_tasks
        terms.append(dc.scale(loss, scale))
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return dc.scale(total, 1.0 / len(terms))
