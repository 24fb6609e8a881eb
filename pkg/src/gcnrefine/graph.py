"""Exact KNN search and the sparse symmetric similarity graph."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import EmbeddingSet

_BLOCK_ROWS = 1024


def knn_search(e: EmbeddingSet, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest neighbors by Euclidean distance, self excluded.

    Returns ``(indices, sq_distances)``, both (n, k), each row sorted by
    ascending distance with ties broken by lower id.
    """
    n = e.n
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    x = e.rows
    sq = np.einsum("ij,ij->i", x, x)
    # candidates from the fast expansion; final ordering from the direct difference form
    n_cand = min(n - 1, k + 8)
    out_idx = np.empty((n, k), dtype=np.int64)
    out_dist = np.empty((n, k))
    for start in range(0, n, _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, n)
        rows = np.arange(start, stop)
        block = sq[start:stop, None] - 2.0 * x[start:stop] @ x.T + sq[None, :]
        block[rows - start, rows] = np.inf
        cand = np.argpartition(block, n_cand - 1, axis=1)[:, :n_cand]
        d = np.sum((x[cand] - x[rows, None, :]) ** 2, axis=2)
        order = np.lexsort((cand, d), axis=-1)[:, :k]
        out_idx[rows] = np.take_along_axis(cand, order, axis=1)
        out_dist[rows] = np.take_along_axis(d, order, axis=1)
        # rows whose candidate boundary is tied: redo over every tied column
        bound = np.take_along_axis(block, cand, axis=1).max(axis=1)
        for r in np.flatnonzero((block <= bound[:, None]).sum(axis=1) > n_cand):
            i = start + r
            c = np.flatnonzero(block[r] <= bound[r])
            c = c[c != i]
            dc = np.sum((x[c] - x[i]) ** 2, axis=1)
            o = np.lexsort((c, dc))[:k]
            out_idx[i], out_dist[i] = c[o], dc[o]
    return out_idx, out_dist


@dataclass(frozen=True, eq=False)
class SimilarityGraph:
    """Undirected weighted graph in CSR layout with sorted neighbor lists.

    ``sims[indptr[i]:indptr[i+1]]`` holds S(i, j) for the neighbors
    ``indices[indptr[i]:indptr[i+1]]`` of node i.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    sims: np.ndarray

    @classmethod
    def from_edges(cls, n, src, dst, sims) -> "SimilarityGraph":
        """Build from undirected edges given once each (either orientation)."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        sims = np.asarray(sims, dtype=np.float64)
        if np.any(src == dst):
            raise ValueError("self-loops are not allowed")
        rows = np.concatenate([src, dst])
        cols = np.concatenate([dst, src])
        vals = np.concatenate([sims, sims])
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows) > 1 and np.any((rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])):
            raise ValueError("duplicate edge")
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
        return cls(n, indptr, cols, vals)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def num_edges(self) -> int:
        return len(self.indices) // 2

    @property
    def adjacency(self) -> list[list[tuple[int, float]]]:
        return [
            list(zip(self.neighbors(i).tolist(), self.neighbor_sims(i).tolist()))
            for i in range(self.n)
        ]

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def neighbor_sims(self, i: int) -> np.ndarray:
        return self.sims[self.indptr[i] : self.indptr[i + 1]]

    def similarity(self, i: int, j: int) -> float:
        nb = self.neighbors(i)
        pos = np.searchsorted(nb, j)
        if pos == len(nb) or nb[pos] != j:
            raise KeyError(f"edge ({i}, {j}) not in graph")
        return float(self.sims[self.indptr[i] + pos])

    def has_edge(self, i: int, j: int) -> bool:
        nb = self.neighbors(i)
        pos = np.searchsorted(nb, j)
        return bool(pos < len(nb) and nb[pos] == j)

    def edges(self) -> np.ndarray:
        """Undirected edges as an (m, 2) array with src < dst, lexicographic order."""
        src = np.repeat(np.arange(self.n), self.degrees)
        keep = src < self.indices
        return np.column_stack([src[keep], self.indices[keep]])

    def edge_sims(self) -> np.ndarray:
        src = np.repeat(np.arange(self.n), self.degrees)
        return self.sims[src < self.indices]

    def to_csr(self, weighted: bool = True) -> sp.csr_matrix:
        data = self.sims if weighted else np.ones_like(self.sims)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def __eq__(self, other):
        if not isinstance(other, SimilarityGraph):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.sims, other.sims)
        )

    __hash__ = None


def build_graph(
    e: EmbeddingSet, k: int, prune_threshold: float = 0.5, mutual: bool = False,
    prune_before_symmetrize: bool = False,
) -> SimilarityGraph:
    """KNN graph symmetrized by union (or intersection when ``mutual``).

    Edges with cosine similarity below ``prune_threshold`` are dropped. Rows
    are assumed unit-norm, so S(i, j) is the plain dot product.
    """
    idx, _ = knn_search(e, k)
    n = e.n
    src = np.repeat(np.arange(n), k)
    dst = idx.ravel()
    x = e.rows
    if prune_before_symmetrize:
        s = np.einsum("ij,ij->i", x[src], x[dst])
        keep = s >= prune_threshold
        src, dst = src[keep], dst[keep]
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    pairs, counts = np.unique(lo * n + hi, return_counts=True)
    if mutual:
        pairs = pairs[counts == 2]
    lo, hi = pairs // n, pairs % n
    s = np.clip(np.einsum("ij,ij->i", x[lo], x[hi]), -1.0, 1.0)
    keep = s >= prune_threshold
    return SimilarityGraph.from_edges(n, lo[keep], hi[keep], s[keep])


def normalized_adjacency(
    g: SimilarityGraph, self_loops: bool = False, weighted: bool = False
) -> sp.csr_matrix:
    """D^{-1/2} A D^{-1/2} with d_i the neighbor count (plus one with self-loops)."""
    a = g.to_csr(weighted=weighted)
    deg = g.degrees.astype(np.float64)
    if self_loops:
        a = a + sp.identity(g.n, format="csr")
        deg = deg + 1.0
    inv = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv, where=deg > 0)
    d = sp.diags(inv)
    return sp.csr_matrix(d @ a @ d)


def remove_edges(g: SimilarityGraph, edges) -> SimilarityGraph:
    """New graph without ``edges``; every listed edge must exist."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        return SimilarityGraph(g.n, g.indptr.copy(), g.indices.copy(), g.sims.copy())
    cur = g.edges()
    lo, hi = np.minimum(edges[:, 0], edges[:, 1]), np.maximum(edges[:, 0], edges[:, 1])
    cur_key = cur[:, 0] * g.n + cur[:, 1]
    drop_key = np.unique(lo * g.n + hi)
    present = np.isin(drop_key, cur_key)
    if not present.all():
        missing = drop_key[~present][0]
        raise KeyError(f"edge ({missing // g.n}, {missing % g.n}) not in graph")
    keep = ~np.isin(cur_key, drop_key)
    return SimilarityGraph.from_edges(g.n, cur[keep, 0], cur[keep, 1], g.edge_sims()[keep])


def save_graph(g: SimilarityGraph, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "similarity"])
        for (i, j), s in zip(g.edges().tolist(), g.edge_sims().tolist()):
            w.writerow([i, j, f"{s:.6f}"])


def load_graph(path, n: int) -> SimilarityGraph:
    """Read a ``src,dst,similarity`` edge list; ``n`` sets the node count."""
    src, dst, sims = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["src", "dst", "similarity"]:
            raise ValueError(f"{path}: expected header 'src,dst,similarity'")
        for row in reader:
            i, j, s = int(row[0]), int(row[1]), float(row[2])
            if not (0 <= i < j < n):
                raise ValueError(f"{path}: bad edge ({i}, {j}) for n={n}")
            if not -1.0 <= s <= 1.0:
                raise ValueError(f"{path}: similarity {s} outside [-1, 1]")
            src.append(i)
            dst.append(j)
            sims.append(s)
    return SimilarityGraph.from_edges(n, src, dst, sims)


def quantize_sims(g: SimilarityGraph) -> SimilarityGraph:
    """Round similarities to the 6 decimals kept by the graph file format."""
    sims = np.array([float(f"{s:.6f}") for s in g.sims.tolist()])
    return SimilarityGraph(g.n, g.indptr, g.indices, sims)
