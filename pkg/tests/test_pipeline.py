import json

import numpy as np
import pytest

from gcnrefine.cluster import ScoringMethod, score_edges
from gcnrefine.data import SynthSpec, generate_synthetic, load_embeddings, load_labels, normalize, save_embeddings
from gcnrefine.gcn import load_model
from gcnrefine.graph import load_graph
from gcnrefine.pipeline import (PipelineConfig, PipelineError, ablation_csv, ablation_table,
                                dumps_report, new_run_dir, refine_iteration, run_ablation,
                                run_dino_demo, run_pipeline, threshold_grid, write_run)

SMALL = dict(k_graph=15, score_threshold=4.0, gcn_dims=(8, 8), epochs=20, min_class_size=10,
             k_sub=10, n2=20, n1=3, iterations=2)


def _small(sigma=0.2, seed=1):
    return generate_synthetic(SynthSpec(8, 30, 16, sigma, seed))


# ---- config ------------------------------------------------------------------


def test_config_defaults_round_trip():
    cfg = PipelineConfig()
    assert cfg.k_graph == 50 and cfg.min_class_size == 20 and cfg.iterations == 3
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    json.dumps(cfg.to_dict())


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ValueError, match="unknown config keys: bogus"):
        PipelineConfig.from_dict({"bogus": 1})
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"k_graph": 7}))
    assert PipelineConfig.from_json(path).k_graph == 7


@pytest.mark.parametrize("key,value", [
    ("k_graph", 0), ("prune_threshold", 1.5), ("target_fraction", 0.0), ("target_fraction", 1.2),
    ("min_class_size", 0), ("gcn_dims", [0]), ("pair_mode", "sum"), ("epochs", -1),
    ("learning_rate", -0.1), ("neg_weight", 0.0), ("p_cut", 1.5), ("iterations", -1),
    ("seed", -3), ("ablation_k", []), ("threshold_grid", 1), ("scoring_method", "nope"),
    ("scoring_method", "gcn_weighted"), ("kmeans_clusters", 0), ("score_threshold", -1.0),
])
def test_config_rejects_out_of_range(key, value):
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({key: value})


def test_config_overrides():
    cfg = PipelineConfig().with_overrides(["k_graph=12", "gcn_dims=[4, 4]", "scoring_method=SUM",
                                           "neg_weight=null"])
    assert cfg.k_graph == 12 and cfg.gcn_dims == (4, 4) and cfg.scoring_method == "sum"
    assert cfg.neg_weight is None
    with pytest.raises(ValueError):
        PipelineConfig().with_overrides(["k_graph"])
    with pytest.raises(ValueError):
        PipelineConfig().with_overrides(["nothing=1"])


# ---- pipeline ----------------------------------------------------------------


def test_pipeline_zero_noise_is_perfect():
    e, truth = _small(sigma=0.0)
    result = run_pipeline(PipelineConfig(**SMALL), e, truth)
    its = result.report["iterations"]
    assert [it["nmi"] for it in its] == [1.0, 1.0, 1.0]
    assert its[1]["gcn_skipped"] is True
    assert its[0]["stage"] == "initial" and len(result.labels) == 3


def test_pipeline_zero_iterations():
    e, truth = _small()
    result = run_pipeline(PipelineConfig(**{**SMALL, "iterations": 0}), e, truth)
    assert len(result.report["iterations"]) == 1
    assert result.models == [] and len(result.labels) == 1


def test_pipeline_without_truth_has_no_metrics():
    e, _ = _small()
    report = run_pipeline(PipelineConfig(**SMALL), e).report
    assert "nmi" not in report["iterations"][0]
    assert "edge_precision" not in report["graph"]


def test_pipeline_report_contents():
    e, truth = _small()
    report = run_pipeline(PipelineConfig(**SMALL), e, truth).report
    assert "no encoder retraining" in report["note"]
    assert report["n"] == 240 and report["d"] == 16
    it1 = report["iterations"][1]
    for key in ("nmi", "num_clusters", "edge_precision", "edge_recall", "loss_trace",
                "reliable_classes", "usable_subgraphs"):
        assert key in it1
    assert len(it1["loss_trace"]) == SMALL["epochs"] + 1
    assert it1["loss_trace"][-1] < it1["loss_trace"][0]


def test_pipeline_warm_start_toggle():
    e, truth = _small()
    warm = run_pipeline(PipelineConfig(**SMALL), e, truth)
    cold = run_pipeline(PipelineConfig(**{**SMALL, "warm_start": False}), e, truth)
    np.testing.assert_array_equal(warm.models[0].flat(), cold.models[0].flat())
    assert not np.array_equal(warm.models[1].flat(), cold.models[1].flat())


def test_pipeline_deterministic():
    e, truth = _small()
    a = dumps_report(run_pipeline(PipelineConfig(**SMALL), e, truth).report)
    b = dumps_report(run_pipeline(PipelineConfig(**SMALL), e, truth).report)
    assert a == b


def test_pipeline_stage_error():
    e, _ = _small()
    bad = e.__class__(np.vstack([e.rows[:-1], np.zeros(16)]), e.ids)
    with pytest.raises(PipelineError) as info:
        run_pipeline(PipelineConfig(**SMALL), bad)
    assert info.value.stage == "ingest"
    assert str(info.value).startswith("[ingest]")


def test_write_run_and_resume(tmp_path):
    e, truth = _small()
    cfg = PipelineConfig(**SMALL)
    save_embeddings(e, tmp_path / "emb.bin")
    result = run_pipeline(cfg, load_embeddings(tmp_path / "emb.bin"), truth)
    run_dir = write_run(result, cfg, tmp_path / "run")
    names = {p.name for p in run_dir.iterdir()}
    assert {"config.json", "graph.csv", "labels_iter0.csv", "labels_iter2.csv", "gcn_iter1.bin",
            "report.json", "report.txt"} <= names

    cfg2 = PipelineConfig.from_json(run_dir / "config.json")
    assert cfg2 == cfg
    g = load_graph(run_dir / "graph.csv", e.n)
    assert g == result.graph
    e2 = normalize(load_embeddings(tmp_path / "emb.bin"))
    for it in (1, 2):
        prev = load_labels(run_dir / f"labels_iter{it - 1}.csv")
        scores = score_edges(g, ScoringMethod.WEIGHTED) if it == 1 else None
        init = load_model(run_dir / f"gcn_iter{it - 1}.bin") if it > 1 else None
        labels, model, _, _ = refine_iteration(cfg2, g, e2, prev, cfg2.seed + it - 1, scores, init)
        np.testing.assert_array_equal(labels.labels, load_labels(run_dir / f"labels_iter{it}.csv").labels)
        saved = load_model(run_dir / f"gcn_iter{it}.bin")
        np.testing.assert_array_equal(model.flat(), saved.flat())


def test_new_run_dir_is_unique(tmp_path):
    a = new_run_dir(tmp_path, 3)
    a.mkdir()
    b = new_run_dir(tmp_path, 3)
    assert a != b and a.name.endswith("-3")


# ---- ablation ----------------------------------------------------------------


def test_threshold_grid():
    assert threshold_grid(np.array([]), 5).tolist() == [0.0]
    grid = threshold_grid(np.arange(101.0), 20)
    assert grid[0] == 0.0 and grid[-1] == pytest.approx(95.0)
    assert np.all(np.diff(grid) > 0)


def test_ablation_zero_noise_all_perfect():
    e, truth = _small(sigma=0.0)
    cfg = PipelineConfig(**{**SMALL, "ablation_k": (5, 15, 25)})
    rows = run_ablation(cfg, e, truth)
    methods = [(r["method"], r["k"]) for r in rows]
    assert methods == [("kmeans", None), ("product", 15), ("sum", 15), ("weighted", 15),
                       ("gcn_weighted", 15), ("gcn_weighted", 5), ("gcn_weighted", 25)]
    assert all(r["nmi"] == 1.0 for r in rows)
    csv = ablation_csv(rows)
    assert csv.splitlines()[0] == "method,k,threshold,nmi,num_clusters"
    assert len(csv.splitlines()) == 8
    assert "gcn_weighted" in ablation_table(rows)


def test_ablation_plain_sweep_and_oversized_k():
    e, truth = _small()
    cfg = PipelineConfig(**{**SMALL, "ablation_k": (10, 500), "sweep_method": "sum"})
    rows = run_ablation(cfg, e, truth)
    assert [r["k"] for r in rows if r["method"] == "sum"] == [15, 15, 10]


def test_ablation_requires_truth():
    e, _ = _small()
    with pytest.raises(ValueError):
        run_ablation(PipelineConfig(**SMALL), e, None)


def test_dino_demo():
    trace = run_dino_demo(steps=20)
    assert len(trace) == 21 and trace[-1] < trace[0]


@pytest.mark.slow
def test_benchmark_nmi_non_decreasing_across_iterations():
    traces = []
    for seed in range(5):
        e, truth = generate_synthetic(SynthSpec(100, 50, 32, 0.16, seed))
        report = run_pipeline(PipelineConfig(seed=seed), e, truth).report
        traces.append([it["nmi"] for it in report["iterations"]])
    mean = np.mean(traces, axis=0)
    assert len(mean) == 4
    assert np.all(np.diff(mean) >= -0.003), mean
