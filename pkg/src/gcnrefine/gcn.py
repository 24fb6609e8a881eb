"""GCN edge classifier with hand-derived gradients, subgraph sampling and pruning."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .cluster import ScoringMethod, cluster_by_threshold, select_reliable_classes
from .data import UNASSIGNED, EmbeddingSet, LabelAssignment
from .graph import SimilarityGraph, build_graph, normalized_adjacency

logger = logging.getLogger(__name__)

_F32_MAX = float(np.finfo(np.float32).max)
_CKPT_MAGIC = {"symmetric": b"GCN1", "concat": b"GCNC"}
PAIR_MODES = ("symmetric", "concat")


@dataclass
class GcnModel:
    """Stacked layers ``relu(A_hat H W + X W_in)`` followed by a logistic edge head.

    ``dims`` is ``[input_dim, hidden_1, ..., final_dim]``. The head is one
    logistic unit over a 2 * final_dim pair representation: ``[h_i, h_j]`` in
    ``"concat"`` mode, ``[h_i * h_j, (h_i - h_j) ** 2]`` in ``"symmetric"`` mode.
    """

    dims: list
    weights: list
    input_weights: list
    head_w: np.ndarray
    head_b: float = 0.0
    pair_mode: str = "symmetric"

    def __post_init__(self):
        if self.pair_mode not in PAIR_MODES:
            raise ValueError(f"pair_mode must be one of {PAIR_MODES}")
        if len(self.dims) < 2:
            raise ValueError("need at least one layer")
        if not (len(self.weights) == len(self.input_weights) == len(self.dims) - 1):
            raise ValueError("one (W, W_in) pair per layer required")
        for l, (w, w_in) in enumerate(zip(self.weights, self.input_weights)):
            if w.shape != (self.dims[l], self.dims[l + 1]):
                raise ValueError(f"layer {l}: W has shape {w.shape}")
            if w_in.shape != (self.dims[0], self.dims[l + 1]):
                raise ValueError(f"layer {l}: W_in has shape {w_in.shape}")
        if self.head_w.shape != (2 * self.dims[-1],):
            raise ValueError(f"edge head needs {2 * self.dims[-1]} weights")

    @classmethod
    def init(cls, dims, seed=0, pair_mode="symmetric") -> "GcnModel":
        """Glorot-uniform layers and a zero-mean small edge head."""
        rng = np.random.default_rng(seed)
        dims = [int(d) for d in dims]

        def glorot(a, b):
            lim = np.sqrt(6.0 / (a + b))
            return rng.uniform(-lim, lim, size=(a, b))

        weights = [glorot(dims[l], dims[l + 1]) for l in range(len(dims) - 1)]
        input_weights = [glorot(dims[0], dims[l + 1]) for l in range(len(dims) - 1)]
        head_w = rng.uniform(-1, 1, size=2 * dims[-1]) / np.sqrt(2 * dims[-1])
        return cls(dims, weights, input_weights, head_w, 0.0, pair_mode)

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def params(self) -> list:
        """Parameter arrays in checkpoint order; the bias comes last as a 1-vector."""
        out = []
        for w, w_in in zip(self.weights, self.input_weights):
            out += [w, w_in]
        return out + [self.head_w, np.array([self.head_b])]

    def with_params(self, params) -> "GcnModel":
        params = [np.array(p, dtype=np.float64) for p in params]
        L = self.num_layers
        return GcnModel(
            list(self.dims), params[0 : 2 * L : 2], params[1 : 2 * L : 2], params[2 * L],
            float(params[2 * L + 1][0]), self.pair_mode,
        )

    def copy(self) -> "GcnModel":
        return self.with_params(self.params())

    def rounded(self) -> "GcnModel":
        """Same model with every parameter rounded to float32 precision."""
        return self.with_params([p.astype(np.float32).astype(np.float64) for p in self.params()])

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))


def save_model(model: GcnModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC[model.pair_mode])
        fh.write(struct.pack("<I", model.num_layers))
        fh.write(struct.pack(f"<{len(model.dims)}I", *model.dims))
        for p in model.params():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(path) -> GcnModel:
    raw = Path(path).read_bytes()
    modes = {v: k for k, v in _CKPT_MAGIC.items()}
    if raw[:4] not in modes:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (L,) = struct.unpack_from("<I", raw, 4)
    dims = list(struct.unpack_from(f"<{L + 1}I", raw, 8))
    shapes = []
    for l in range(L):
        shapes += [(dims[l], dims[l + 1]), (dims[0], dims[l + 1])]
    shapes += [(2 * dims[-1],), (1,)]
    need = sum(int(np.prod(s)) for s in shapes)
    offset = 8 + 4 * (L + 1)
    if len(raw) != offset + 4 * need:
        raise ValueError(f"{path}: expected {offset + 4 * need} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=offset).astype(np.float64)
    params, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        params.append(flat[pos : pos + size].reshape(s))
        pos += size
    skeleton = GcnModel(dims, [np.zeros(s) for s in shapes[0 : 2 * L : 2]],
                        [np.zeros(s) for s in shapes[1 : 2 * L : 2]], np.zeros(2 * dims[-1]),
                        0.0, modes[raw[:4]])
    return skeleton.with_params(params)


@dataclass(frozen=True)
class TrainConfig:
    n1: int = 5
    n2: int = 40
    k_sub: int = 10
    epochs: int = 50
    learning_rate: float = 1e-2
    # None selects the positive/negative edge ratio of the training batch
    neg_weight: float = None
    prune_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("n1", "n2", "k_sub"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("epochs and learning_rate must be non-negative")
        if self.neg_weight is not None and not self.neg_weight > 0:
            raise ValueError("neg_weight must be positive")


@dataclass(frozen=True, eq=False)
class Subgraph:
    nodes: np.ndarray
    graph: SimilarityGraph
    features: np.ndarray
    node_labels: np.ndarray
    # one entry per graph.edges() row, True when the endpoints share a pseudo-label
    edge_labels: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.edge_labels is None:
            e = self.graph.edges()
            object.__setattr__(self, "edge_labels",
                               self.node_labels[e[:, 0]] == self.node_labels[e[:, 1]])

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.edge_labels))

    @property
    def num_negative(self) -> int:
        return int(len(self.edge_labels) - self.num_positive)


def class_centroids(e: EmbeddingSet, labels: LabelAssignment) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array(sorted(labels.cluster_sizes))
    cents = np.stack([e.rows[labels.labels == c].mean(axis=0) for c in ids])
    norms = np.linalg.norm(cents, axis=1, keepdims=True)
    return ids, cents / np.where(norms > 0, norms, 1.0)


def sample_subgraph(
    g: SimilarityGraph, e: EmbeddingSet, labels: LabelAssignment, cfg: TrainConfig, anchor: int,
    centroids=None,
) -> Subgraph:
    """Anchor class plus its ``n1 - 1`` nearest classes, ``n2`` samples each, re-linked by KNN."""
    if g.n != e.n or labels.n != e.n:
        raise ValueError("graph, embeddings and labels disagree on n")
    if anchor == UNASSIGNED or anchor not in labels.cluster_sizes:
        raise ValueError(f"anchor class {anchor} is not a retained class")
    ids, cents = class_centroids(e, labels) if centroids is None else centroids
    if cfg.n1 > len(ids):
        raise ValueError(f"n1={cfg.n1} exceeds the {len(ids)} retained classes")
    a = int(np.flatnonzero(ids == anchor)[0])
    cos = cents @ cents[a]
    cos[a] = np.inf
    order = np.lexsort((ids, -cos))[: cfg.n1]
    rng = np.random.default_rng([cfg.seed, int(anchor)])
    picked = []
    for c in ids[order]:
        members = np.flatnonzero(labels.labels == c)
        take = min(cfg.n2, len(members))
        picked.append(np.sort(rng.choice(members, size=take, replace=False)))
    nodes = np.concatenate(picked)
    sub = e.subset(nodes)
    if len(nodes) < 2:
        sub_g = SimilarityGraph.from_edges(len(nodes), [], [], [])
    else:
        sub_g = build_graph(sub, min(cfg.k_sub, len(nodes) - 1), cfg.prune_threshold)
    return Subgraph(nodes, sub_g, sub.rows, labels.labels[nodes])


@dataclass
class ForwardCache:
    x: np.ndarray
    a_hat: sp.csr_matrix
    preacts: list
    activations: list

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def gcn_forward(model: GcnModel, a_hat, x) -> ForwardCache:
    """Layer ``l`` computes ``relu(A_hat H_l W_l + X W_in_l)`` with ``H_0 = X``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != model.dims[0]:
        raise ValueError(f"feature dim {x.shape[1]} != model input dim {model.dims[0]}")
    if a_hat.shape != (x.shape[0], x.shape[0]):
        raise ValueError(f"A_hat shape {a_hat.shape} does not match {x.shape[0]} nodes")
    h = x
    preacts, acts = [], [x]
    for w, w_in in zip(model.weights, model.input_weights):
        z = a_hat @ (h @ w) + x @ w_in
        h = np.maximum(z, 0.0)
        preacts.append(z)
        acts.append(h)
    return ForwardCache(x, a_hat, preacts, acts)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def pair_features(model: GcnModel, h: np.ndarray, src, dst) -> np.ndarray:
    hi, hj = h[src], h[dst]
    if model.pair_mode == "concat":
        return np.hstack([hi, hj])
    return np.hstack([hi * hj, (hi - hj) ** 2])


def edge_logits(model: GcnModel, h: np.ndarray, src, dst) -> np.ndarray:
    d = model.dims[-1]
    w1, w2 = model.head_w[:d], model.head_w[d:]
    if model.pair_mode == "concat":
        return h[src] @ w1 + h[dst] @ w2 + model.head_b
    # w1.(hi*hj) + w2.(hi-hj)^2 = (w1 - 2 w2).(hi*hj) + q_i + q_j with q = h^2 . w2
    q = (h * h) @ w2
    cross = np.einsum("ij,ij->i", h[src] * (w1 - 2.0 * w2), h[dst])
    return cross + q[src] + q[dst] + model.head_b


def edge_probability(model: GcnModel, h: np.ndarray, i: int, j: int) -> float:
    """Probability of a same-class edge; the lower id goes first in the concatenation."""
    if i == j:
        raise ValueError("edge endpoints must differ")
    lo, hi = min(i, j), max(i, j)
    return float(_sigmoid(edge_logits(model, h, np.array([lo]), np.array([hi])))[0])


def edge_loss(model, cache: ForwardCache, src, dst, y, weights) -> float:
    z = edge_logits(model, cache.output, src, dst)
    # -log p = softplus(-z), -log(1 - p) = softplus(z)
    per_edge = np.where(y, np.logaddexp(0.0, -z), np.logaddexp(0.0, z))
    return float(np.sum(weights * per_edge) / np.sum(weights))


def backward(model: GcnModel, cache: ForwardCache, src, dst, y, weights) -> list:
    """Gradients of the weighted edge cross-entropy, aligned with ``model.params()``."""
    h = cache.output
    n, d = h.shape
    w1, w2 = model.head_w[:d], model.head_w[d:]
    z = edge_logits(model, h, src, dst)
    dz = weights * (_sigmoid(z) - y) / np.sum(weights)
    g_bias = np.array([dz.sum()])
    # dz scattered onto (src, dst); duplicate pairs are summed
    dmat = sp.csr_matrix((dz, (src, dst)), shape=(n, n))
    by_src = np.bincount(src, weights=dz, minlength=n)
    by_dst = np.bincount(dst, weights=dz, minlength=n)
    if model.pair_mode == "concat":
        g_head = np.concatenate([h.T @ by_src, h.T @ by_dst])
        dh = np.outer(by_src, w1) + np.outer(by_dst, w2)
    else:
        dh_fwd = dmat @ h
        g_prod = np.einsum("ij,ij->j", h, dh_fwd)
        g_sq = (by_src + by_dst) @ (h * h) - 2.0 * g_prod
        g_head = np.concatenate([g_prod, g_sq])
        v = w1 - 2.0 * w2
        dh = (dh_fwd + dmat.T @ h) * v + 2.0 * (by_src + by_dst)[:, None] * h * w2
    grads = []
    for l in reversed(range(model.num_layers)):
        dpre = dh * (cache.preacts[l] > 0)
        agg = cache.a_hat @ cache.activations[l]
        grads.append(cache.x.T @ dpre)
        grads.append(agg.T @ dpre)
        # A_hat is symmetric
        dh = cache.a_hat.T @ (dpre @ model.weights[l].T)
    grads.reverse()
    return grads + [g_head, g_bias]


@dataclass
class _Batch:
    a_hat: sp.csr_matrix
    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    y: np.ndarray
    weights: np.ndarray = None


def _batch(sub: Subgraph, both_orders: bool = True) -> _Batch:
    e = sub.graph.edges()
    y = sub.edge_labels.astype(np.float64)
    if not both_orders:
        return _Batch(normalized_adjacency(sub.graph), sub.features, e[:, 0], e[:, 1], y)
    # both orders so an order-sensitive head does not learn the lower-id convention
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    return _Batch(normalized_adjacency(sub.graph), sub.features, src, dst, np.concatenate([y, y]))


def train(model: GcnModel, subgraphs, cfg: TrainConfig) -> tuple[GcnModel, list]:
    """Full-batch gradient descent on each subgraph in turn, ``cfg.epochs`` passes.

    Subgraphs lacking either edge class are skipped. The returned trace holds the
    mean pre-update loss of every epoch, preceded by the initial loss. Final
    parameters are rounded to float32 so a checkpoint reproduces them exactly.
    """
    usable = [s for s in subgraphs if s.num_positive and s.num_negative]
    if len(usable) < len(subgraphs):
        logger.warning("skipping %d subgraphs without both edge classes",
                       len(subgraphs) - len(usable))
    if not usable:
        raise ValueError("no subgraph has both positive and negative edges")
    batches = [_batch(s, model.pair_mode == "concat") for s in usable]
    neg_weight = cfg.neg_weight
    if neg_weight is None:
        neg_weight = sum(s.num_positive for s in usable) / sum(s.num_negative for s in usable)
    for b in batches:
        b.weights = np.where(b.y > 0, 1.0, neg_weight)
    model = model.copy()
    trace = []

    def mean_loss():
        return float(np.mean([
            edge_loss(model, gcn_forward(model, b.a_hat, b.x), b.src, b.dst, b.y, b.weights)
            for b in batches
        ]))

    trace.append(mean_loss())
    for epoch in range(cfg.epochs):
        for b in batches:
            cache = gcn_forward(model, b.a_hat, b.x)
            grads = backward(model, cache, b.src, b.dst, b.y, b.weights)
            model = model.with_params(
                [p - cfg.learning_rate * gp for p, gp in zip(model.params(), grads)])
        trace.append(mean_loss())
        if not np.isfinite(trace[-1]) or np.abs(model.flat()).max() > _F32_MAX:
            raise FloatingPointError(
                f"non-finite loss or parameters at epoch {epoch} (learning_rate={cfg.learning_rate})")
    return model.rounded(), trace


def _weighted_batch(sub: Subgraph, neg_weight: float = 1.0) -> _Batch:
    b = _batch(sub, both_orders=True)
    b.weights = np.where(b.y > 0, 1.0, neg_weight)
    return b


def gradient_check(model: GcnModel, subgraph: Subgraph, epsilon: float = 1e-4,
                   backward_fn=None, neg_weight: float = 1.0, floor: float = 1e-6):
    """Largest relative gap between analytic and central-difference gradients.

    Parameters whose +/- epsilon probes flip any ReLU gate are excluded, since the
    loss is not differentiable there. Returns ``(max_rel_error, n_checked, n_skipped)``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    backward_fn = backward if backward_fn is None else backward_fn
    b = _weighted_batch(subgraph, neg_weight)
    cache = gcn_forward(model, b.a_hat, b.x)
    analytic = np.concatenate([g.ravel() for g in backward_fn(model, cache, b.src, b.dst, b.y, b.weights)])
    base = model.flat()
    gates = np.concatenate([(z > 0).ravel() for z in cache.preacts])
    sizes = [p.size for p in model.params()]
    shapes = [p.shape for p in model.params()]

    def unflat(v):
        out, pos = [], 0
        for size, shape in zip(sizes, shapes):
            out.append(v[pos : pos + size].reshape(shape))
            pos += size
        return model.with_params(out)

    def probe(v):
        m = unflat(v)
        c = gcn_forward(m, b.a_hat, b.x)
        g = np.concatenate([(z > 0).ravel() for z in c.preacts])
        return edge_loss(m, c, b.src, b.dst, b.y, b.weights), g

    worst, checked, skipped = 0.0, 0, 0
    for p in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[p] += epsilon
        minus[p] -= epsilon
        lp, gp = probe(plus)
        lm, gm = probe(minus)
        if not (np.array_equal(gp, gates) and np.array_equal(gm, gates)):
            skipped += 1
            continue
        numeric = (lp - lm) / (2 * epsilon)
        rel = abs(analytic[p] - numeric) / max(abs(analytic[p]), abs(numeric), floor)
        worst = max(worst, rel)
        checked += 1
    return worst, checked, skipped


def edge_probabilities(model: GcnModel, g: SimilarityGraph, e: EmbeddingSet) -> np.ndarray:
    """Probabilities for ``g.edges()`` from one full-graph forward pass."""
    cache = gcn_forward(model, normalized_adjacency(g), e.rows)
    edges = g.edges()
    return _sigmoid(edge_logits(model, cache.output, edges[:, 0], edges[:, 1]))


def infer_prune(model: GcnModel, g: SimilarityGraph, e: EmbeddingSet, p_cut: float = 0.5):
    """Drop every edge whose predicted probability falls below ``p_cut``.

    Returns the pruned graph and the ``(edges, probabilities)`` report for the input graph.
    """
    if g.n != e.n:
        raise ValueError(f"graph has {g.n} nodes but {e.n} embeddings were given")
    probs = edge_probabilities(model, g, e)
    edges = g.edges()
    keep = probs >= p_cut
    pruned = SimilarityGraph.from_edges(g.n, edges[keep, 0], edges[keep, 1], g.edge_sims()[keep])
    return pruned, (edges, probs)


def save_edge_report(report, path) -> None:
    edges, probs = report
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("src,dst,probability\n")
        for (i, j), p in zip(edges.tolist(), probs.tolist()):
            fh.write(f"{i},{j},{p:.6f}\n")


def training_subgraphs(g, e, reliable: LabelAssignment, cfg: TrainConfig) -> list:
    """One subgraph per retained class, anchors in ascending id order."""
    cents = class_centroids(e, reliable)
    n1 = min(cfg.n1, len(cents[0]))
    cfg = replace(cfg, n1=n1)
    return [sample_subgraph(g, e, reliable, cfg, int(c), cents) for c in cents[0]]


def fit_edge_model(g, e, labels, cfg: TrainConfig, dims, target_fraction=0.25,
                   min_class_size=20, scores=None, pair_mode="symmetric"):
    """Select reliable classes, sample subgraphs and train a fresh model.

    Returns ``(model, loss_trace)``; the model is ``None`` when no usable
    subgraph exists, in which case the graph should be used unpruned.
    """
    reliable = select_reliable_classes(labels, g, target_fraction, min_class_size, scores=scores)
    subs = training_subgraphs(g, e, reliable, cfg)
    if not any(s.num_positive and s.num_negative for s in subs):
        logger.warning("no training subgraph contains negative edges; skipping GCN stage")
        return None, []
    model = GcnModel.init([e.d] + list(dims), seed=cfg.seed, pair_mode=pair_mode)
    return train(model, subs, cfg)


def refine(g, e, labels, model, cfg: TrainConfig, score_threshold: float, p_cut: float = 0.5,
           dims=(256, 256), target_fraction=0.25, min_class_size=20):
    """Prune with the edge model, then re-cluster with common-neighbor weighted scores.

    When ``model`` is None a model is first trained from ``labels``.
    """
    if g.num_edges == 0:
        return cluster_by_threshold(g, ScoringMethod.WEIGHTED, score_threshold)
    if model is None:
        model, _ = fit_edge_model(g, e, labels, cfg, dims, target_fraction, min_class_size)
    pruned = g if model is None else infer_prune(model, g, e, p_cut)[0]
    return cluster_by_threshold(pruned, ScoringMethod.WEIGHTED, score_threshold)
