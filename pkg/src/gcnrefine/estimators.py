"""scikit-learn style wrappers around the graph clustering and GCN refinement."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .cluster import ScoringMethod, cluster_by_threshold
from .data import EmbeddingSet, LabelAssignment, normalize
from .graph import build_graph
from .pipeline import PipelineConfig, run_pipeline


def _embeddings(X) -> EmbeddingSet:
    X = check_array(X, dtype=np.float64, ensure_min_samples=2)
    return normalize(EmbeddingSet(X))


class CommonNeighborClustering(ClusterMixin, BaseEstimator):
    """Threshold clustering of a KNN cosine graph on common-neighbor edge scores.

    Parameters
    ----------
    n_neighbors : int
        K of the KNN graph.
    prune_threshold : float
        Edges with cosine similarity below this are dropped before scoring.
    method : {"weighted", "sum", "product"}
        Common-neighbor score used to rank edges.
    score_threshold : float
        Edges scoring below this are cut; clusters are the remaining components.

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
    n_clusters_ : int
    graph_ : SimilarityGraph
    """

    def __init__(self, n_neighbors=50, prune_threshold=0.5, method="weighted", score_threshold=14.0):
        self.n_neighbors = n_neighbors
        self.prune_threshold = prune_threshold
        self.method = method
        self.score_threshold = score_threshold

    def fit(self, X, y=None):
        e = _embeddings(X)
        k = min(self.n_neighbors, e.n - 1)
        self.graph_ = build_graph(e, k, self.prune_threshold)
        labels = cluster_by_threshold(self.graph_, ScoringMethod.parse(self.method), self.score_threshold)
        self.labels_ = labels.labels.copy()
        self.n_clusters_ = labels.num_clusters
        return self


class GCNRefinedClustering(ClusterMixin, BaseEstimator):
    """Common-neighbor clustering refined by a GCN edge classifier.

    Every constructor argument maps onto the pipeline configuration of the
    same name. ``fit`` accepts optional ground-truth labels ``y``, used only
    to add NMI and edge precision figures to ``report_``.

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
        Labels after the last refinement iteration.
    n_clusters_ : int
    report_ : dict
    graph_ : SimilarityGraph
    model_ : GcnModel or None
        Edge classifier from the last iteration.
    """

    def __init__(self, k_graph=50, prune_threshold=0.5, scoring_method="weighted",
                 score_threshold=14.0, target_fraction=0.25, min_class_size=20,
                 gcn_dims=(256, 256), pair_mode="symmetric", n1=5, n2=40, k_sub=30, epochs=30,
                 learning_rate=0.5, neg_weight=None, p_cut=0.5, iterations=3, warm_start=True, seed=0):
        self.k_graph = k_graph
        self.prune_threshold = prune_threshold
        self.scoring_method = scoring_method
        self.score_threshold = score_threshold
        self.target_fraction = target_fraction
        self.min_class_size = min_class_size
        self.gcn_dims = gcn_dims
        self.pair_mode = pair_mode
        self.n1 = n1
        self.n2 = n2
        self.k_sub = k_sub
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.neg_weight = neg_weight
        self.p_cut = p_cut
        self.iterations = iterations
        self.warm_start = warm_start
        self.seed = seed

    def _config(self) -> PipelineConfig:
        return PipelineConfig.from_dict(self.get_params())

    def fit(self, X, y=None):
        config = self._config()
        e = _embeddings(X)
        truth = None if y is None else LabelAssignment(np.asarray(y))
        result = run_pipeline(config, e, truth)
        self.report_ = result.report
        self.graph_ = result.graph
        self.model_ = result.models[-1] if result.models else None
        self.labels_ = result.final_labels.labels.copy()
        self.n_clusters_ = result.final_labels.num_clusters
        return self

    def fit_predict(self, X, y=None, **kwargs):
        return self.fit(X, y).labels_

    @property
    def nmi_trace_(self):
        check_is_fitted(self, "report_")
        return [it.get("nmi") for it in self.report_["iterations"]]
