"""Common-neighbor edge scoring, threshold clustering and reliable-class selection."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .data import UNASSIGNED, LabelAssignment
from .graph import SimilarityGraph


class ScoringMethod(enum.Enum):
    PRODUCT = "product"
    SUM = "sum"
    WEIGHTED = "weighted"
    # WEIGHTED scoring on a graph already pruned by the edge classifier
    GCN_WEIGHTED = "gcn_weighted"

    @classmethod
    def parse(cls, value) -> "ScoringMethod":
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValueError(f"unknown scoring method {value!r}") from None


@dataclass(frozen=True)
class EdgeScore:
    i: int
    j: int
    raw: float
    common_score: float
    alpha_i: float
    alpha_j: float


def common_neighbors(g: SimilarityGraph, i: int, j: int) -> set[int]:
    if i == j:
        raise ValueError("common_neighbors needs two distinct nodes")
    for v in (i, j):
        if not 0 <= v < g.n:
            raise IndexError(f"node {v} out of range for n={g.n}")
    common = np.intersect1d(g.neighbors(i), g.neighbors(j), assume_unique=True)
    return set(common.tolist()) - {i, j}


def score_edge(g: SimilarityGraph, i: int, j: int, m: ScoringMethod) -> EdgeScore:
    """Score one existing edge from its shared neighborhood."""
    m = ScoringMethod.parse(m)
    raw = g.similarity(i, j)
    common = sorted(common_neighbors(g, i, j))
    deg = g.degrees
    alpha_i = len(common) / deg[i]
    alpha_j = len(common) / deg[j]
    s_ik = np.array([g.similarity(i, k) for k in common])
    s_jk = np.array([g.similarity(j, k) for k in common])
    if m is ScoringMethod.PRODUCT:
        score = float(np.sum(s_ik * s_jk))
    elif m is ScoringMethod.SUM:
        score = float(np.sum(s_ik + s_jk))
    else:
        score = float(np.sum(alpha_i * s_ik + alpha_j * s_jk))
    return EdgeScore(i, j, raw, score, float(alpha_i), float(alpha_j))


def _gather(mat: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    if len(rows) == 0:
        return np.zeros(0)
    return np.asarray(mat[rows, cols]).ravel()


def score_edges(g: SimilarityGraph, m: ScoringMethod) -> np.ndarray:
    """Scores for every edge of ``g``, aligned with ``g.edges()``."""
    m = ScoringMethod.parse(m)
    edges = g.edges()
    i, j = edges[:, 0], edges[:, 1]
    s = g.to_csr(weighted=True)
    if m is ScoringMethod.PRODUCT:
        return _gather(s @ s, i, j)
    b = g.to_csr(weighted=False)
    sb = (s @ b).tocsr()
    from_i = _gather(sb, i, j)
    from_j = _gather(sb, j, i)
    if m is ScoringMethod.SUM:
        return from_i + from_j
    common = _gather((b @ b).tocsr(), i, j)
    deg = g.degrees
    return common / deg[i] * from_i + common / deg[j] * from_j


def components(n: int, edges: np.ndarray) -> LabelAssignment:
    """Connected components, ids dense and ordered by smallest member."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    adj = sp.csr_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return LabelAssignment(labels).compact()


def cluster_by_threshold(
    g: SimilarityGraph, m: ScoringMethod, score_threshold: float, scores: np.ndarray = None
) -> LabelAssignment:
    """Keep edges scoring at least ``score_threshold``; label the connected components."""
    if scores is None:
        scores = score_edges(g, m)
    return components(g.n, g.edges()[scores >= score_threshold])


def class_quality(labels: LabelAssignment, g: SimilarityGraph, scores: np.ndarray) -> dict:
    """Mean score of the intra-class edges of each cluster (0 for clusters without any)."""
    edges = g.edges()
    lab = labels.labels
    li, lj = lab[edges[:, 0]], lab[edges[:, 1]]
    intra = (li == lj) & (li != UNASSIGNED)
    total = {}
    count = {}
    for c, s in zip(li[intra].tolist(), scores[intra].tolist()):
        total[c] = total.get(c, 0.0) + s
        count[c] = count.get(c, 0) + 1
    return {c: total[c] / count[c] if c in count else 0.0 for c in labels.cluster_sizes}


def select_reliable_classes(
    labels: LabelAssignment,
    g: SimilarityGraph,
    target_fraction: float = 0.25,
    min_size: int = 20,
    method: ScoringMethod = ScoringMethod.WEIGHTED,
    scores: np.ndarray = None,
    target_count: int = None,
) -> LabelAssignment:
    """Keep the highest-quality classes until they cover ``target_fraction`` of samples.

    ``target_count`` overrides the fraction with an absolute sample count.
    Every other sample becomes UNASSIGNED. Raises if no class reaches ``min_size``.
    """
    if not 0 < target_fraction <= 1:
        raise ValueError(f"target_fraction must lie in (0, 1], got {target_fraction}")
    if scores is None:
        scores = score_edges(g, method)
    quality = class_quality(labels, g, scores)
    eligible = [c for c, size in labels.cluster_sizes.items() if size >= min_size]
    if not eligible:
        raise ValueError(f"no class has at least {min_size} samples; selection is empty")
    eligible.sort(key=lambda c: (-quality[c], c))
    target = target_fraction * labels.n if target_count is None else target_count
    kept, covered = [], 0
    for c in eligible:
        kept.append(c)
        covered += labels.cluster_sizes[c]
        if covered >= target:
            break
    out = np.where(np.isin(labels.labels, kept), labels.labels, UNASSIGNED)
    return LabelAssignment(out).compact()


def save_edge_scores(g: SimilarityGraph, scores: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("src,dst,raw,common_score\n")
        for (i, j), r, c in zip(g.edges().tolist(), g.edge_sims().tolist(), scores.tolist()):
            fh.write(f"{i},{j},{r:.6f},{c:.6f}\n")
