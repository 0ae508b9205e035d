"""Attentive-Neural-Process selector.

Encodes the fused query, conditions on each tool's frozen reference set via
self- and cross-attention, scores every panel member with a shared MLP head,
and produces the masked selection distribution. A sibling coverage head
predicts each tool's per-query success probability.
"""

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .domain import CATEGORICAL_FAMILIES, TaskFamily, validity
from .errors import EmptyReferenceSetError, NoValidCandidateError, ShapeMismatchError


@dataclass
class SelectorConfig:
    d_x: int = 16
    d_q: int = 8
    d_xp: int = 16
    d_qp: int = 8
    d_u: int = 24
    d: int = 16
    d_k: int = 16
    d_v: int = 16
    hidden: int = 512
    dropout: float = 0.1
    ref_size: int = 16
    label_embed_dim: int = 8
    rho_dim: int = 8
    slot_width: int = 5
    eta_dim: int = 2
    n_tasks: int = 4
    # |Y_t| per task; 0 for non-categorical tasks (no learned label table)
    task_label_counts: tuple = (5, 0, 0, 4)

    def __post_init__(self):
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")
        if not (1 <= self.ref_size):
            raise ValueError("ref_size must be positive")
        for name in ("d_x", "d_q", "d_xp", "d_qp", "d_u", "d", "d_k", "d_v",
                     "hidden", "label_embed_dim", "rho_dim", "slot_width", "eta_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SelectionDistribution:
    scores: np.ndarray
    mask: np.ndarray
    probs: np.ndarray
    selected: int
    probs_t: object = None   # Tensor when built on a differentiable path
    scores_t: object = None


def _xavier(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(cfg, seed):
    """Xavier-uniform weights, zero biases; deterministic in the seed."""
    rng = np.random.default_rng([seed, 2147483629])
    p = {}

    def linear(name, fan_in, fan_out, bias=True):
        p[f"{name}_W"] = dc.Tensor(_xavier(rng, fan_in, fan_out), requires_grad=True)
        if bias:
            p[f"{name}_b"] = dc.Tensor(np.zeros(fan_out), requires_grad=True)

    linear("phi_x", cfg.d_x, cfg.d_xp)
    linear("phi_q", cfg.d_q, cfg.d_qp)
    linear("fuse", cfg.d_xp + cfg.d_qp, cfg.d_u)
    for t, count in enumerate(cfg.task_label_counts):
        if count > 0:
            p[f"label_embed_t{t}"] = dc.Tensor(
                _xavier(rng, count, cfg.label_embed_dim), requires_grad=True)
    linear("rho_m", cfg.slot_width, cfg.rho_dim)
    linear("ref", cfg.d_xp + cfg.label_embed_dim + cfg.rho_dim, cfg.d)
    linear("self_q", cfg.d, cfg.d, bias=False)
    linear("self_k", cfg.d, cfg.d, bias=False)
    linear("self_v", cfg.d, cfg.d, bias=False)
    linear("cross_q", cfg.d_u, cfg.d_k, bias=False)
    linear("cross_k", cfg.d_xp, cfg.d_k, bias=False)
    linear("cross_v", cfg.d, cfg.d_v, bias=False)
    score_in = cfg.d_u + cfg.d_v + cfg.slot_width + cfg.eta_dim
    linear("head1", score_in, cfg.hidden)
    linear("head2", cfg.hidden, 1)
    linear("cov1", cfg.d_u + cfg.d_v, cfg.hidden)
    linear("cov2", cfg.hidden, 1)
    return p


def encode_slot(space, aligned, slot_width):
    """Fixed-width numeric encoding of an aligned prediction."""
    out = np.zeros(slot_width)
    if space.family in CATEGORICAL_FAMILIES:
        probs = aligned.probs
        if len(probs) > slot_width:
            raise ShapeMismatchError(
                f"canonical space of size {len(probs)} exceeds slot width {slot_width}")
        out[: len(probs)] = probs
    elif space.family is TaskFamily.GROUNDING:
        out[: min(4, slot_width)] = np.asarray(aligned.box)[: min(4, slot_width)]
    else:
        for pair in aligned.pairs:
            out[space.pair_vocab.index(pair) % slot_width] += 1.0
        out = np.clip(out, 0.0, 1.0)
    return out


def encode_label(space, gt, label_embed_dim):
    """Fixed numeric ground-truth encoding for non-categorical tasks."""
    out = np.zeros(label_embed_dim)
    if space.family is TaskFamily.GROUNDING:
        out[: min(4, label_embed_dim)] = np.asarray(gt.box)[: min(4, label_embed_dim)]
    else:
        for pair in gt.pairs:
            out[space.pair_vocab.index(pair) % label_embed_dim] += 1.0
        out = np.clip(out, 0.0, 1.0)
    return out


def encode_query(params, cfg, x_rows, q_rows):
    """u = U [phi_x(x) || phi_q(q)] for a stack of queries (n rows)."""
    x_rows = np.atleast_2d(np.asarray(x_rows, dtype=np.float64))
    q_rows = np.atleast_2d(np.asarray(q_rows, dtype=np.float64))
    if x_rows.shape[1] != cfg.d_x or q_rows.shape[1] != cfg.d_q:
        raise ShapeMismatchError(
            f"encode_query: feature dims {x_rows.shape[1]}/{q_rows.shape[1]} "
            f"do not match config {cfg.d_x}/{cfg.d_q}")
    px = dc.add(dc.matmul(dc.constant(x_rows), params["phi_x_W"]), params["phi_x_b"])
    pq = dc.add(dc.matmul(dc.constant(q_rows), params["phi_q_W"]), params["phi_q_b"])
    return dc.add(dc.matmul(dc.concat_cols([px, pq]), params["fuse_W"]), params["fuse_b"])


def encode_reference_set(params, cfg, space, refs):
    """Embed a reference set into (T, keys); keys are phi_x(x_b) rows."""
    if not refs:
        raise EmptyReferenceSetError("encode_reference_set: empty reference set")
    xs = np.stack([r[0] for r in refs])
    px = dc.add(dc.matmul(dc.constant(xs), params["phi_x_W"]), params["phi_x_b"])
    if space.family in CATEGORICAL_FAMILIES:
        labels = []
        for r in refs:
            y = r[1].label if space.family is TaskFamily.CLASSIFICATION else r[1].option
            if not (0 <= y < len(space.labels)):
                raise ValueError(f"label {y} outside canonical space of task {space.task}")
            labels.append(y)
        emb = dc.take_rows(params[f"label_embed_t{space.task}"], labels)
    else:
        emb = dc.constant(np.stack(
            [encode_label(space, r[1], cfg.label_embed_dim) for r in refs]))
    slots = dc.constant(np.stack(
        [encode_slot(space, r[2], cfg.slot_width) for r in refs]))
    m_emb = dc.add(dc.matmul(slots, params["rho_m_W"]), params["rho_m_b"])
    t = dc.add(dc.matmul(dc.concat_cols([px, emb, m_emb]), params["ref_W"]),
               params["ref_b"])
    return t, px


def self_attend_refs(params, cfg, t, training=False, rng=None):
    """Single-head self-attention over reference rows; dropout on output rows."""
    q = dc.matmul(t, params["self_q_W"])
    k = dc.matmul(t, params["self_k_W"])
    v = dc.matmul(t, params["self_v_W"])
    out = dc.attend(q, k, v)
    if training and cfg.dropout > 0.0:
        out = dc.dropout(out, cfg.dropout, rng)
    return out


def cross_attend(params, cfg, u_rows, keys, t_tilde):
    """Query-conditioned tool descriptor psi for each query row."""
    q = dc.matmul(u_rows, params["cross_q_W"])
    k = dc.matmul(keys, params["cross_k_W"])
    v = dc.matmul(t_tilde, params["cross_v_W"])
    return dc.attend(q, k, v)


def score_rows(params, cfg, features, training=False, rng=None):
    """Selector head: two-layer GELU MLP mapping feature rows to scores."""
    h = dc.gelu(dc.add(dc.matmul(features, params["head1_W"]), params["head1_b"]))
    if training and cfg.dropout > 0.0:
        h = dc.dropout(h, cfg.dropout, rng)
    return dc.add(dc.matmul(h, params["head2_W"]), params["head2_b"])


def coverage_rows(params, cfg, features):
    """Coverage head: sigmoid MLP estimating per-tool success probability."""
    h = dc.gelu(dc.add(dc.matmul(features, params["cov1_W"]), params["cov1_b"]))
    return dc.sigmoid(dc.add(dc.matmul(h, params["cov2_W"]), params["cov2_b"]))


@dataclass
class BatchForward:
    """Differentiable outputs of one training batch."""
    dists: list
    coverage_t: object          # Tensor, one sigmoid output per (example, slot) pair
    coverage_pairs: list        # (example index, slot index) per coverage row
    score_col: object           # Tensor (n_pairs, 1) of raw scores
    pair_index: list            # (example index, slot index) per score row


class SelectorModel:
    """Bundles params + config with the reference-set machinery.

    ``predict_fn(tool, query) -> (slot_vec, aligned)`` supplies the aligned
    prediction of a tool on the routed query; the model itself never runs
    tools.
    """

    def __init__(self, cfg, params, spaces, predict_fn):
        self.cfg = cfg
        self.params = params
        self.spaces = spaces
        self.predict_fn = predict_fn

    def detached(self):
        """Forward-only view: params shared, gradients disabled."""
        detached = {}
        for name, p in self.params.items():
            detached[name] = dc.Tensor(p.data, requires_grad=False)
        return SelectorModel(self.cfg, detached, self.spaces, self.predict_fn)

    def trainables(self):
        return [self.params[k] for k in sorted(self.params)]

    def encode_tool(self, tool, task, training=False, rng=None, cache=None):
        key = (tool.index, task)
        if cache is not None and key in cache:
            return cache[key]
        refs = tool.reference_sets[task]
        t, keys = encode_reference_set(self.params, self.cfg, self.spaces[task], refs)
        t_tilde = self_attend_refs(self.params, self.cfg, t, training=training, rng=rng)
        out = (t_tilde, keys)
        if cache is not None:
            cache[key] = out
        return out

    def select(self, query, panel, training=False, rng=None, cache=None):
        """Score a panel and produce the masked selection distribution."""
        m = len(panel.tools)
        mask = np.array([validity(tool, query) for tool in panel.tools])
        if not mask.any():
            raise NoValidCandidateError(
                f"no valid tool in panel for query {query.uid}")
        u = encode_query(self.params, self.cfg, query.x[None, :], query.q[None, :])
        rows = []
        slot_of_row = []
        for j, tool in enumerate(panel.tools):
            if not mask[j]:
                continue
            t_tilde, keys = self.encode_tool(tool, query.task, training, rng, cache)
            psi = cross_attend(self.params, self.cfg, u, keys, t_tilde)
            slot_vec, _ = self.predict_fn(tool, query)
            rows.append(dc.concat_cols([
                u, psi, dc.constant(slot_vec[None, :]), dc.constant(tool.eta[None, :])]))
            slot_of_row.append(j)
        features = dc.stack_rows(rows)
        score_col = score_rows(self.params, self.cfg, features, training=training, rng=rng)
        scores_t = dc.scatter_1d(dc.reshape(score_col, (len(rows),)), slot_of_row, m)
        probs_t = dc.masked_softmax(scores_t, mask)
        probs = probs_t.data
        selected = int(np.argmax(probs))  # ties -> lowest index
        return SelectionDistribution(scores=scores_t.data.copy(), mask=mask,
                                     probs=probs.copy(), selected=selected,
                                     probs_t=probs_t, scores_t=scores_t)

    def coverage(self, query, tool, cache=None):
        """Per-tool coverage score s in (0, 1)."""
        u = encode_query(self.params, self.cfg, query.x[None, :], query.q[None, :])
        t_tilde, keys = self.encode_tool(tool, query.task, cache=cache)
        psi = cross_attend(self.params, self.cfg, u, keys, t_tilde)
        s = coverage_rows(self.params, self.cfg, dc.concat_cols([u, psi]))
        return s

    def batch_forward(self, items, training=False, rng=None, with_coverage=True):
        """Vectorized forward over (labeled query, panel) items.

        Groups (tool, task) pairs so each reference set is encoded once and
        the score/coverage heads each run as a single matrix product.
        """
        queries = [lq.query for lq, _ in items]
        xs = np.stack([q.x for q in queries])
        qs = np.stack([q.q for q in queries])
        u_all = encode_query(self.params, self.cfg, xs, qs)

        pair_index = []   # (example, slot)
        pair_group = []   # (tool, task, example) in group order
        groups = {}
        masks = []
        for i, (lq, panel) in enumerate(items):
            mask = np.array([validity(tool, lq.query) for tool in panel.tools])
            if not mask.any():
                raise NoValidCandidateError(
                    f"no valid tool in panel for query {lq.query.uid}")
            masks.append(mask)
            for j, tool in enumerate(panel.tools):
                if not mask[j]:
                    continue
                groups.setdefault((tool.index, lq.query.task), (tool, []))[1].append(
                    (i, j, len(pair_index)))
                pair_index.append((i, j))

        n_pairs = len(pair_index)
        feat_blocks = []
        cov_blocks = []
        row_order = []
        cache = {}
        for (tool_index, task), (tool, members) in groups.items():
            t_tilde, keys = self.encode_tool(tool, task, training, rng, cache)
            ex_ids = [m[0] for m in members]
            u_sub = dc.take_rows(u_all, ex_ids)
            psi = cross_attend(self.params, self.cfg, u_sub, keys, t_tilde)
            slot_vecs = np.stack([
                self.predict_fn(tool, items[i][0].query)[0] for i in ex_ids])
            eta = np.repeat(tool.eta[None, :], len(members), axis=0)
            feat_blocks.append(dc.concat_cols(
                [u_sub, psi, dc.constant(slot_vecs), dc.constant(eta)]))
            if with_coverage:
                cov_blocks.append(dc.concat_cols([u_sub, psi]))
            row_order.extend(m[2] for m in members)

        features = dc.stack_rows(feat_blocks)
        score_col = score_rows(self.params, self.cfg, features, training=training, rng=rng)
        # rows of score_col follow group order; invert to pair order
        inv = np.empty(n_pairs, dtype=np.intp)
        inv[np.asarray(row_order, dtype=np.intp)] = np.arange(n_pairs)
        score_col = dc.take_rows(score_col, inv)
        flat_scores = dc.reshape(score_col, (n_pairs,))

        coverage_t = None
        coverage_pairs = None
        if with_coverage:
            cov_feats = dc.take_rows(dc.stack_rows(cov_blocks), inv)
            coverage_t = dc.reshape(
                coverage_rows(self.params, self.cfg, cov_feats), (n_pairs,))
            coverage_pairs = pair_index

        dists = []
        cursor = 0
        for i, (lq, panel) in enumerate(items):
            m = len(panel.tools)
            k = int(masks[i].sum())
            rows = list(range(cursor, cursor + k))
            slots = [pair_index[r][1] for r in rows]
            scores_t = dc.scatter_1d(dc.take_rows(flat_scores, rows), slots, m)
            probs_t = dc.masked_softmax(scores_t, masks[i])
            dists.append(SelectionDistribution(
                scores=scores_t.data.copy(), mask=masks[i],
                probs=probs_t.data.copy(), selected=int(np.argmax(probs_t.data)),
                probs_t=probs_t, scores_t=scores_t))
            cursor += k
        return BatchForward(dists=dists, coverage_t=coverage_t,
                            coverage_pairs=coverage_pairs,
                            score_col=score_col, pair_index=pair_index)
