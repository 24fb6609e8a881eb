"""Graph-based pseudo-label refinement: KNN similarity graphs, common-neighbor
clustering and a GCN edge classifier that prunes wrong links."""

from .cluster import (EdgeScore, ScoringMethod, cluster_by_threshold, common_neighbors,
                      score_edge, score_edges, select_reliable_classes)
from .data import (UNASSIGNED, EmbeddingSet, LabelAssignment, SynthSpec, edge_metrics,
                   generate_synthetic, load_embeddings, load_labels, nmi, normalize,
                   save_embeddings, save_labels)
from .estimators import CommonNeighborClustering, GCNRefinedClustering
from .gcn import (GcnModel, Subgraph, TrainConfig, edge_probability, gcn_forward,
                  gradient_check, infer_prune, refine, sample_subgraph, train)
from .graph import (SimilarityGraph, build_graph, knn_search, normalized_adjacency,
                    remove_edges)
from .pipeline import PipelineConfig, run_ablation, run_pipeline

__version__ = "0.1.0"
