"""End-to-end refinement runs, the similarity ablation and run-directory output."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dino
from .cluster import ScoringMethod, cluster_by_threshold, score_edges, select_reliable_classes
from .data import EmbeddingSet, LabelAssignment, edge_metrics, nmi, normalize, save_labels
from .gcn import GcnModel, TrainConfig, infer_prune, save_model, train, training_subgraphs
from .graph import SimilarityGraph, build_graph, quantize_sims, save_graph

logger = logging.getLogger(__name__)

ITERATION_NOTE = (
    "embeddings are fixed; each iteration retrains the edge classifier on the newest "
    "labels, starting from the previous iteration's weights when warm_start is set, and "
    "re-clusters the full graph (no encoder retraining)"
)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    k_graph: int = 50
    prune_threshold: float = 0.5
    mutual_knn: bool = False
    prune_before_symmetrize: bool = False
    scoring_method: str = "weighted"
    score_threshold: float = 14.0
    target_fraction: float = 0.25
    min_class_size: int = 20
    gcn_dims: tuple = (256, 256)
    pair_mode: str = "symmetric"
    n1: int = 5
    n2: int = 40
    k_sub: int = 30
    epochs: int = 30
    learning_rate: float = 0.5
    neg_weight: float = None
    p_cut: float = 0.5
    iterations: int = 3
    warm_start: bool = True
    seed: int = 0
    ablation_k: tuple = (10, 50, 100)
    sweep_method: str = "gcn_weighted"
    threshold_grid: int = 39
    kmeans_clusters: int = None

    def __post_init__(self):
        object.__setattr__(self, "gcn_dims", tuple(int(d) for d in self.gcn_dims))
        object.__setattr__(self, "ablation_k", tuple(int(k) for k in self.ablation_k))
        checks = [
            (self.k_graph >= 1, "k_graph must be >= 1"),
            (-1.0 <= self.prune_threshold <= 1.0, "prune_threshold must lie in [-1, 1]"),
            (self.score_threshold >= 0, "score_threshold must be >= 0"),
            (0 < self.target_fraction <= 1, "target_fraction must lie in (0, 1]"),
            (self.min_class_size >= 1, "min_class_size must be >= 1"),
            (len(self.gcn_dims) >= 1 and min(self.gcn_dims) >= 1, "gcn_dims must be positive"),
            (self.pair_mode in ("symmetric", "concat"), "pair_mode must be symmetric or concat"),
            (self.n1 >= 1 and self.n2 >= 1 and self.k_sub >= 1, "n1, n2, k_sub must be >= 1"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.learning_rate >= 0, "learning_rate must be >= 0"),
            (self.neg_weight is None or self.neg_weight > 0, "neg_weight must be > 0 or null"),
            (0.0 <= self.p_cut <= 1.0 + 1e-6, "p_cut must lie in [0, 1]"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.seed >= 0, "seed must be >= 0"),
            (len(self.ablation_k) >= 1 and min(self.ablation_k) >= 1, "ablation_k must be positive"),
            (self.threshold_grid >= 2, "threshold_grid must be >= 2"),
            (self.kmeans_clusters is None or self.kmeans_clusters >= 1, "kmeans_clusters must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        for name in ("scoring_method", "sweep_method"):
            method = ScoringMethod.parse(getattr(self, name))
            object.__setattr__(self, name, method.value)
        if ScoringMethod(self.scoring_method) is ScoringMethod.GCN_WEIGHTED:
            raise ValueError("scoring_method sets the initial clustering; use product, sum or weighted")

    @classmethod
    def from_dict(cls, values: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["gcn_dims"] = list(self.gcn_dims)
        out["ablation_k"] = list(self.ablation_k)
        return out

    def with_overrides(self, assignments) -> "PipelineConfig":
        """Apply ``key=value`` strings; values are parsed as JSON, else kept as text."""
        values = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ValueError(f"override {item!r} is not key=value")
            try:
                values[key.strip()] = json.loads(raw)
            except json.JSONDecodeError:
                values[key.strip()] = raw
        return self.from_dict(values)

    def train_config(self, seed=None) -> TrainConfig:
        return TrainConfig(
            n1=self.n1, n2=self.n2, k_sub=self.k_sub, epochs=self.epochs,
            learning_rate=self.learning_rate, neg_weight=self.neg_weight,
            prune_threshold=self.prune_threshold, seed=self.seed if seed is None else seed,
        )


@dataclass
class PipelineResult:
    report: dict
    graph: SimilarityGraph
    labels: list = field(default_factory=list)
    models: list = field(default_factory=list)
    pruned_graphs: list = field(default_factory=list)

    @property
    def final_labels(self) -> LabelAssignment:
        return self.labels[-1]


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def _label_stats(labels: LabelAssignment, truth) -> dict:
    sizes = np.array(list(labels.cluster_sizes.values()))
    out = {
        "num_clusters": labels.num_clusters,
        "num_singletons": int(np.count_nonzero(sizes == 1)),
        "largest_cluster": int(sizes.max()) if sizes.size else 0,
    }
    if truth is not None:
        out["nmi"] = nmi(labels, truth)
    return out


def _edge_stats(g: SimilarityGraph, truth, candidates=None) -> dict:
    out = {"num_edges": g.num_edges}
    if truth is not None:
        p, r = edge_metrics(g.edges(), truth, None if candidates is None else candidates.edges())
        out["edge_precision"] = p
        out["edge_recall"] = r
    return out


def prepare_graph(config: PipelineConfig, e: EmbeddingSet, k=None) -> SimilarityGraph:
    g = build_graph(e, config.k_graph if k is None else k, config.prune_threshold,
                    mutual=config.mutual_knn,
                    prune_before_symmetrize=config.prune_before_symmetrize)
    return quantize_sims(g)


def refine_iteration(config, g, e, labels, seed, scores=None, init=None):
    """Select reliable classes from ``labels``, train, prune ``g`` and re-cluster.

    Training starts from ``init`` when given, else from a fresh model.
    Returns ``(new_labels, model, pruned_graph, stats)``; ``model`` is None
    when no training subgraph holds both edge classes.
    """
    cfg = config.train_config(seed)
    reliable = _stage("select", select_reliable_classes, labels, g, config.target_fraction,
                      config.min_class_size, ScoringMethod.WEIGHTED, scores)
    subs = _stage("sample", training_subgraphs, g, e, reliable, cfg)
    usable = [s for s in subs if s.num_positive and s.num_negative]
    stats = {
        "reliable_classes": reliable.num_clusters,
        "reliable_samples": reliable.n - reliable.num_unassigned,
        "subgraphs": len(subs),
        "usable_subgraphs": len(usable),
    }
    if not usable:
        logger.warning("no subgraph contains both edge classes; keeping the graph unpruned")
        model, pruned, trace = None, g, []
    else:
        model = init if init is not None else GcnModel.init(
            [e.d, *config.gcn_dims], seed=seed, pair_mode=config.pair_mode)
        model, trace = _stage("train", train, model, subs, cfg)
        pruned, _ = _stage("infer", infer_prune, model, g, e, config.p_cut)
    stats["gcn_skipped"] = model is None
    stats["loss_trace"] = trace
    new_labels = _stage("recluster", cluster_by_threshold, pruned, ScoringMethod.WEIGHTED,
                        config.score_threshold)
    return new_labels, model, pruned, stats


def run_pipeline(config: PipelineConfig, embeddings: EmbeddingSet, truth=None) -> PipelineResult:
    """Graph, initial clustering, then ``config.iterations`` rounds of GCN refinement."""
    e = _stage("ingest", normalize, embeddings)
    g = _stage("graph", prepare_graph, config, e)
    method = ScoringMethod(config.scoring_method)
    scores = _stage("score", score_edges, g, method)
    labels = _stage("cluster", cluster_by_threshold, g, method, config.score_threshold, scores)
    report = {
        "note": ITERATION_NOTE,
        "nmi_normalization": "arithmetic mean of entropies",
        "config": config.to_dict(),
        "n": e.n,
        "d": e.d,
        "graph": _edge_stats(g, truth),
        "iterations": [{"iteration": 0, "stage": "initial", **_label_stats(labels, truth)}],
    }
    result = PipelineResult(report, g, [labels])
    weighted = scores if method is ScoringMethod.WEIGHTED else None
    model = None
    for it in range(1, config.iterations + 1):
        init = model if config.warm_start else None
        labels, model, pruned, stats = refine_iteration(
            config, g, e, labels, config.seed + it - 1, weighted if it == 1 else None, init)
        entry = {"iteration": it, "stage": "refine", **_label_stats(labels, truth)}
        entry.update(_edge_stats(pruned, truth, g))
        entry.update(stats)
        report["iterations"].append(entry)
        result.labels.append(labels)
        result.models.append(model)
        result.pruned_graphs.append(pruned)
    return result


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def format_report(report: dict) -> str:
    lines = [f"# {report['note']}", f"n={report['n']} d={report['d']} "
             f"graph_edges={report['graph']['num_edges']}"]
    cols = ["iteration", "num_clusters", "num_singletons", "nmi", "num_edges", "edge_precision",
            "edge_recall"]
    lines.append(_table(cols, report["iterations"]))
    return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _table(cols, rows) -> str:
    cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    out = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    out += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(out)


def write_run(result: PipelineResult, config: PipelineConfig, run_dir) -> Path:
    """Write config, graph, per-iteration labels and checkpoints, and both reports."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    save_graph(result.graph, run_dir / "graph.csv")
    for it, labels in enumerate(result.labels):
        save_labels(labels, run_dir / f"labels_iter{it}.csv")
    for it, model in enumerate(result.models, start=1):
        if model is not None:
            save_model(model, run_dir / f"gcn_iter{it}.bin")
    (run_dir / "report.json").write_text(dumps_report(result.report))
    (run_dir / "report.txt").write_text(format_report(result.report))
    return run_dir


def new_run_dir(base, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(base) / f"{stamp}-{seed}"
    suffix = 1
    while path.exists():
        path = Path(base) / f"{stamp}-{seed}.{suffix}"
        suffix += 1
    return path


# ---- ablation -----------------------------------------------------------------


def threshold_grid(scores: np.ndarray, size: int) -> np.ndarray:
    """Score quantiles from 0 to 0.95, so every scoring scale gets the same sweep."""
    if scores.size == 0:
        return np.array([0.0])
    return np.unique(np.quantile(scores, np.linspace(0.0, 0.95, size)))


def best_threshold(g, scores, truth, size) -> tuple[float, LabelAssignment, float]:
    """Grid threshold with the highest NMI against ``truth``; ties keep the lower threshold."""
    best = None
    for t in threshold_grid(scores, size):
        labels = cluster_by_threshold(g, ScoringMethod.WEIGHTED, t, scores)
        score = nmi(labels, truth)
        if best is None or score > best[2]:
            best = (float(t), labels, score)
    return best


def kmeans_baseline(e: EmbeddingSet, n_clusters: int, seed: int) -> LabelAssignment:
    from sklearn.cluster import KMeans

    km = KMeans(n_clusters=n_clusters, init="k-means++", n_init=1, algorithm="lloyd",
                random_state=seed)
    return LabelAssignment(km.fit_predict(e.rows))


def _gcn_row(config, e, g, truth, initial_threshold, size):
    scores = score_edges(g, ScoringMethod.WEIGHTED)
    labels = cluster_by_threshold(g, ScoringMethod.WEIGHTED, initial_threshold, scores)
    cfg_local = dataclasses.replace(config, score_threshold=initial_threshold)
    _, model, pruned, stats = refine_iteration(cfg_local, g, e, labels, config.seed, scores)
    pruned_scores = score_edges(pruned, ScoringMethod.WEIGHTED)
    t, best_labels, score = best_threshold(pruned, pruned_scores, truth, size)
    extra = _edge_stats(pruned, truth, g)
    extra["edge_precision_before"] = edge_metrics(g.edges(), truth)[0]
    return t, best_labels, score, extra


def run_ablation(config: PipelineConfig, embeddings: EmbeddingSet, truth: LabelAssignment) -> list:
    """NMI per scoring method at ``k_graph`` and per K for ``sweep_method``.

    Each graph-based row reports the best NMI over a quantile threshold grid.
    The GCN rows train on labels from ``score_threshold``; at other K that
    threshold is moved to the same score quantile it occupies at ``k_graph``.
    """
    if truth is None:
        raise ValueError("ablation needs ground-truth labels")
    e = _stage("ingest", normalize, embeddings)
    size = config.threshold_grid
    rows = []

    def row(method, k, t, labels, score, seconds, **extra):
        rows.append({"method": method, "k": k, "threshold": t, "nmi": score,
                     "num_clusters": labels.num_clusters, "seconds": seconds, **extra})

    start = time.perf_counter()
    n_km = config.kmeans_clusters or truth.num_clusters
    km = _stage("kmeans", kmeans_baseline, e, n_km, config.seed)
    row("kmeans", None, None, km, nmi(km, truth), time.perf_counter() - start)

    graphs = {}
    g = _stage("graph", prepare_graph, config, e)
    graphs[config.k_graph] = g
    weighted_scores = None
    for method in (ScoringMethod.PRODUCT, ScoringMethod.SUM, ScoringMethod.WEIGHTED):
        start = time.perf_counter()
        scores = _stage("score", score_edges, g, method)
        t, labels, score = best_threshold(g, scores, truth, size)
        row(method.value, config.k_graph, t, labels, score, time.perf_counter() - start)
        if method is ScoringMethod.WEIGHTED:
            weighted_scores = scores
    quantile = float(np.mean(weighted_scores < config.score_threshold)) if weighted_scores.size else 0.0

    sweep = ScoringMethod(config.sweep_method)
    ks = list(dict.fromkeys([config.k_graph, *config.ablation_k]))
    for k in ks:
        if k >= e.n:
            logger.warning("skipping K=%d: needs more than %d samples", k, e.n)
            continue
        start = time.perf_counter()
        gk = graphs.get(k) or _stage("graph", prepare_graph, config, e, k)
        if sweep is ScoringMethod.GCN_WEIGHTED:
            ws = score_edges(gk, ScoringMethod.WEIGHTED)
            init_t = (config.score_threshold if k == config.k_graph
                      else float(np.quantile(ws, quantile)) if ws.size else 0.0)
            t, labels, score, extra = _gcn_row(config, e, gk, truth, init_t, size)
            extra["initial_threshold"] = init_t
        else:
            scores = score_edges(gk, sweep)
            t, labels, score = best_threshold(gk, scores, truth, size)
            extra = {}
        row(sweep.value, k, t, labels, score, time.perf_counter() - start, **extra)
    return rows


ABLATION_COLUMNS = ["method", "k", "threshold", "nmi", "num_clusters"]


def ablation_csv(rows) -> str:
    lines = [",".join(ABLATION_COLUMNS)]
    for r in rows:
        vals = []
        for c in ABLATION_COLUMNS:
            v = r.get(c)
            vals.append("" if v is None else f"{v:.6f}" if isinstance(v, float) else str(v))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def ablation_table(rows) -> str:
    return _table(ABLATION_COLUMNS, rows) + "\n"


def run_dino_demo(steps=100, learning_rate=0.5, momentum=0.9, seed=0) -> list:
    return dino.run_dino_toy(steps=steps, learning_rate=learning_rate, momentum=momentum, seed=seed)
