"""Command-line entry point: ``gcnrefine <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .cluster import ScoringMethod, cluster_by_threshold, save_edge_scores, score_edges
from .data import (EmbeddingFileError, SynthSpec, edge_metrics, generate_synthetic,
                   load_embeddings, load_labels, nmi, normalize, save_embeddings, save_labels)
from .gcn import infer_prune, load_model, refine, save_edge_report, save_model, fit_edge_model
from .graph import load_graph, save_graph

log = logging.getLogger("gcnrefine")


def _config(args) -> pl.PipelineConfig:
    config = pl.PipelineConfig.from_json(args.config) if args.config else pl.PipelineConfig()
    if args.set:
        config = config.with_overrides(args.set)
    if args.seed is not None:
        config = config.with_overrides([f"seed={args.seed}"])
    return config


def _embeddings(path):
    return normalize(load_embeddings(path))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _graph_for(args, config, e):
    if getattr(args, "graph", None):
        return load_graph(args.graph, e.n)
    return pl.prepare_graph(config, e)


def cmd_synth(args):
    spec = SynthSpec(args.classes, args.per_class, args.dim, args.sigma, args.seed or 0)
    e, truth = generate_synthetic(spec)
    out = _out(args)
    save_embeddings(e, out / "embeddings.emb")
    save_labels(truth, out / "labels.csv")
    print(f"wrote {e.n} x {e.d} embeddings to {out}")


def cmd_graph_build(args):
    config = _config(args)
    e = _embeddings(args.embeddings)
    g = pl.prepare_graph(config, e)
    save_graph(g, _out(args) / "graph.csv")
    print(f"graph: {g.n} nodes, {g.num_edges} edges")


def cmd_cluster(args):
    config = _config(args)
    e = _embeddings(args.embeddings)
    g = _graph_for(args, config, e)
    method = ScoringMethod.parse(args.method or config.scoring_method)
    scores = score_edges(g, method)
    labels = cluster_by_threshold(g, method, config.score_threshold, scores)
    out = _out(args)
    save_labels(labels, out / "labels.csv")
    if args.scores:
        save_edge_scores(g, scores, out / "scores.csv")
    print(f"{labels.num_clusters} clusters")


def cmd_gcn_train(args):
    config = _config(args)
    e = _embeddings(args.embeddings)
    g = load_graph(args.graph, e.n)
    labels = load_labels(args.labels)
    model, trace = fit_edge_model(g, e, labels, config.train_config(), config.gcn_dims,
                                  config.target_fraction, config.min_class_size,
                                  pair_mode=config.pair_mode)
    if model is None:
        raise RuntimeError("no training subgraph contains both edge classes")
    out = _out(args)
    save_model(model, out / "gcn.bin")
    (out / "loss_trace.json").write_text(json.dumps(trace) + "\n")
    print(f"loss {trace[0]:.6f} -> {trace[-1]:.6f}")


def cmd_gcn_infer(args):
    config = _config(args)
    e = _embeddings(args.embeddings)
    g = load_graph(args.graph, e.n)
    model = load_model(args.model)
    p_cut = config.p_cut if args.p_cut is None else args.p_cut
    pruned, report = infer_prune(model, g, e, p_cut)
    out = _out(args)
    save_graph(pruned, out / "graph_pruned.csv")
    save_edge_report(report, out / "edges.csv")
    print(f"kept {pruned.num_edges} of {g.num_edges} edges")


def cmd_refine(args):
    config = _config(args)
    e = _embeddings(args.embeddings)
    g = load_graph(args.graph, e.n)
    labels = load_labels(args.labels)
    model = load_model(args.model) if args.model else None
    refined = refine(g, e, labels, model, config.train_config(), config.score_threshold,
                     config.p_cut, config.gcn_dims, config.target_fraction,
                     config.min_class_size)
    save_labels(refined, _out(args) / "labels_refined.csv")
    print(f"{refined.num_clusters} clusters")


def cmd_pipeline_run(args):
    config = _config(args)
    e = load_embeddings(args.embeddings)
    truth = load_labels(args.truth) if args.truth else None
    result = pl.run_pipeline(config, e, truth)
    run_dir = Path(args.out) / args.run_name if args.run_name else pl.new_run_dir(args.out, config.seed)
    pl.write_run(result, config, run_dir)
    print(pl.format_report(result.report), end="")
    print(f"run directory: {run_dir}")


def cmd_ablation(args):
    config = _config(args)
    e = load_embeddings(args.embeddings)
    truth = load_labels(args.truth)
    rows = pl.run_ablation(config, e, truth)
    out = _out(args)
    (out / "ablation.csv").write_text(pl.ablation_csv(rows))
    (out / "ablation.txt").write_text(pl.ablation_table(rows))
    print(pl.ablation_table(rows), end="")


def cmd_dino_demo(args):
    trace = pl.run_dino_demo(args.steps, args.lr, args.momentum, args.seed or 0)
    for step, loss in enumerate(trace):
        print(f"{step}\t{loss:.6f}")


def cmd_eval_nmi(args):
    print(f"{nmi(load_labels(args.pred), load_labels(args.truth)):.6f}")


def cmd_eval_edges(args):
    truth = load_labels(args.truth)
    g = load_graph(args.graph, truth.n)
    cand = load_graph(args.candidates, truth.n).edges() if args.candidates else None
    p, r = edge_metrics(g.edges(), truth, cand)
    fmt = lambda v: "none" if v is None else f"{v:.6f}"
    print(f"precision {fmt(p)}\nrecall {fmt(r)}")


def _common(p, out_default="."):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcnrefine", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic embeddings and labels")
    p.add_argument("--classes", type=int, default=100)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.16)
    _common(p)
    p.set_defaults(func=cmd_synth, stage="synth")

    graph = sub.add_parser("graph").add_subparsers(dest="action", required=True)
    p = graph.add_parser("build", help="KNN similarity graph as CSV")
    p.add_argument("--embeddings", required=True)
    _common(p)
    p.set_defaults(func=cmd_graph_build, stage="graph")

    p = sub.add_parser("cluster", help="common-neighbor threshold clustering")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--graph", help="graph CSV; built from embeddings when omitted")
    p.add_argument("--method", choices=[m.value for m in ScoringMethod][:3])
    p.add_argument("--scores", action="store_true", help="also write scores.csv")
    _common(p)
    p.set_defaults(func=cmd_cluster, stage="cluster")

    gcn = sub.add_parser("gcn").add_subparsers(dest="action", required=True)
    p = gcn.add_parser("train", help="train the edge classifier from pseudo-labels")
    for name in ("--embeddings", "--graph", "--labels"):
        p.add_argument(name, required=True)
    _common(p)
    p.set_defaults(func=cmd_gcn_train, stage="train")
    p = gcn.add_parser("infer", help="prune a graph with a trained edge classifier")
    for name in ("--embeddings", "--graph", "--model"):
        p.add_argument(name, required=True)
    p.add_argument("--p-cut", type=float)
    _common(p)
    p.set_defaults(func=cmd_gcn_infer, stage="infer")

    p = sub.add_parser("refine", help="prune with the GCN and re-cluster")
    for name in ("--embeddings", "--graph", "--labels"):
        p.add_argument(name, required=True)
    p.add_argument("--model", help="checkpoint; trained from --labels when omitted")
    _common(p)
    p.set_defaults(func=cmd_refine, stage="refine")

    pipe = sub.add_parser("pipeline").add_subparsers(dest="action", required=True)
    p = pipe.add_parser("run", help="full refinement run into a run directory")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--truth", help="ground-truth labels CSV for evaluation")
    p.add_argument("--run-name", help="fixed run directory name under --out")
    _common(p, out_default="run")
    p.set_defaults(func=cmd_pipeline_run, stage="pipeline")

    p = sub.add_parser("ablation", help="NMI per scoring method and per K")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--truth", required=True)
    _common(p)
    p.set_defaults(func=cmd_ablation, stage="ablation")

    p = sub.add_parser("dino-demo", help="toy distillation loop, prints the loss trace")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--momentum", type=float, default=0.9)
    _common(p)
    p.set_defaults(func=cmd_dino_demo, stage="dino")

    ev = sub.add_parser("eval").add_subparsers(dest="action", required=True)
    p = ev.add_parser("nmi", help="NMI between two label files")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_eval_nmi, stage="eval")
    p = ev.add_parser("edges", help="edge precision/recall of a graph against labels")
    p.add_argument("--graph", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--candidates", help="reference graph for recall")
    p.set_defaults(func=cmd_eval_edges, stage="eval")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except pl.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EmbeddingFileError as exc:
        print(f"error: [{args.stage}] {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: [{args.stage}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
