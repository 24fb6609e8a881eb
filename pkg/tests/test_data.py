import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gcnrefine.data import (UNASSIGNED, EmbeddingFormatError, EmbeddingSet, EmbeddingTruncatedError,
                            LabelAssignment, NonFiniteEmbeddingError, SynthSpec, edge_metrics,
                            generate_synthetic, load_embeddings, load_labels, nmi, normalize,
                            save_embeddings, save_labels)


def _write_raw(path, magic=b"EMB1", version=1, n=2, d=2, values=(1, 0, 0, 1)):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQI", magic, version, n, d))
        fh.write(np.asarray(values, dtype="<f4").tobytes())


def test_load_simple_file(tmp_path):
    path = tmp_path / "a.emb"
    _write_raw(path)
    e = load_embeddings(path)
    assert (e.n, e.d) == (2, 2)
    np.testing.assert_array_equal(e.rows, [[1, 0], [0, 1]])


def test_save_layout_is_packed(tmp_path):
    path = tmp_path / "a.emb"
    save_embeddings(EmbeddingSet([[1.0, 0.0], [0.0, 1.0]]), path)
    raw = path.read_bytes()
    assert raw[:4] == b"EMB1"
    assert len(raw) == 4 + 4 + 8 + 4 + 4 * 4
    assert struct.unpack_from("<IQI", raw, 4) == (1, 2, 2)


def test_bad_magic(tmp_path):
    path = tmp_path / "a.emb"
    _write_raw(path, magic=b"XXXX")
    with pytest.raises(EmbeddingFormatError):
        load_embeddings(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "a.emb"
    _write_raw(path, n=3)
    with pytest.raises(EmbeddingTruncatedError):
        load_embeddings(path)


def test_non_finite_payload(tmp_path):
    path = tmp_path / "a.emb"
    _write_raw(path, values=(1, np.nan, 0, 1))
    with pytest.raises(NonFiniteEmbeddingError):
        load_embeddings(path)


def test_failure_codes_distinct():
    codes = {EmbeddingFormatError.code, EmbeddingTruncatedError.code, NonFiniteEmbeddingError.code}
    assert len(codes) == 3


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_bitwise(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("emb") / "x.emb"
    e = EmbeddingSet(rows.astype(np.float64))
    save_embeddings(e, path)
    back = load_embeddings(path)
    assert back.rows.tobytes() == e.rows.tobytes()
    again = path.with_suffix(".2")
    save_embeddings(back, again)
    assert again.read_bytes() == path.read_bytes()


def test_normalize_examples():
    np.testing.assert_allclose(normalize(EmbeddingSet([[3.0, 4.0]])).rows, [[0.6, 0.8]])
    np.testing.assert_allclose(normalize(EmbeddingSet([[1.0, 0.0], [0.0, 2.0]])).rows,
                               [[1, 0], [0, 1]])
    with pytest.raises(ValueError, match="index 1"):
        normalize(EmbeddingSet([[1.0, 1.0], [0.0, 0.0]]))


def test_normalize_unit_norm():
    rng = np.random.default_rng(3)
    e = normalize(EmbeddingSet(rng.standard_normal((50, 7)) * 100))
    np.testing.assert_allclose(np.linalg.norm(e.rows, axis=1), 1.0, atol=1e-6)


def test_embedding_set_rejects_bad_shapes():
    with pytest.raises(ValueError):
        EmbeddingSet(np.zeros((0, 3)))
    with pytest.raises(NonFiniteEmbeddingError):
        EmbeddingSet([[np.inf, 1.0]])


def test_synthetic_zero_noise():
    e, truth = generate_synthetic(SynthSpec(2, 3, 8, 0.0, 7))
    assert e.n == 6
    for c in range(2):
        rows = e.rows[truth.labels == c]
        assert np.all(rows == rows[0])
        sims = rows @ rows.T
        np.testing.assert_allclose(sims, 1.0, atol=1e-6)


def test_synthetic_deterministic():
    a = generate_synthetic(SynthSpec(2, 3, 8, 0.3, 7))
    b = generate_synthetic(SynthSpec(2, 3, 8, 0.3, 7))
    assert a[0] == b[0] and a[1] == b[1]
    c = generate_synthetic(SynthSpec(2, 3, 8, 0.3, 8))
    assert not np.array_equal(a[0].rows, c[0].rows)


def test_synthetic_truth_nmi():
    _, truth = generate_synthetic(SynthSpec(100, 50, 32, 0.35, 1))
    assert nmi(truth, truth) == 1.0


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(0, 3, 8, 0.1)
    with pytest.raises(ValueError):
        SynthSpec(2, 3, 8, -0.1)


# ---- NMI ---------------------------------------------------------------------


def nmi_oracle(a, b):
    """Direct contingency-table evaluation with plain Python counting."""
    n = len(a)
    pairs = {}
    for x, y in zip(a, b):
        pairs[(x, y)] = pairs.get((x, y), 0) + 1
    ca, cb = {}, {}
    for x in a:
        ca[x] = ca.get(x, 0) + 1
    for y in b:
        cb[y] = cb.get(y, 0) + 1
    mi = sum(c / n * math.log(c * n / (ca[x] * cb[y])) for (x, y), c in pairs.items())
    ha = -sum(c / n * math.log(c / n) for c in ca.values())
    hb = -sum(c / n * math.log(c / n) for c in cb.values())
    if ha == 0 and hb == 0:
        return 1.0
    return mi / ((ha + hb) / 2)


def test_nmi_examples():
    assert nmi(LabelAssignment([0, 0, 1, 1]), LabelAssignment([1, 1, 0, 0])) == 1.0
    assert nmi(LabelAssignment([0, 0, 1, 1]), LabelAssignment([0, 1, 0, 1])) == pytest.approx(0.0, abs=1e-12)
    a, b = [0, 0, 1, 1, 2, 2], [0, 0, 1, 1, 1, 1]
    expected = nmi_oracle(a, b)
    assert expected == pytest.approx(0.7336804366512111, abs=1e-12)
    assert nmi(LabelAssignment(a), LabelAssignment(b)) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 5)), min_size=2, max_size=60))
def test_nmi_matches_oracle_and_symmetric(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    la, lb = LabelAssignment(a), LabelAssignment(b)
    assert nmi(la, lb) == pytest.approx(nmi_oracle(a, b), abs=1e-9)
    assert nmi(la, lb) == pytest.approx(nmi(lb, la), abs=1e-12)
    assert 0.0 <= nmi(la, lb) <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=2, max_size=50), st.randoms(use_true_random=False))
def test_nmi_permutation_invariant(labels, rnd):
    perm = list(range(7))
    rnd.shuffle(perm)
    relabeled = [perm[x] + 10 for x in labels]
    a = LabelAssignment(labels)
    if a.num_clusters >= 2:
        assert nmi(a, a) == pytest.approx(1.0, abs=1e-12)
    assert nmi(a, LabelAssignment(relabeled)) == pytest.approx(nmi(a, a), abs=1e-12)


def test_nmi_rejects_bad_inputs():
    with pytest.raises(ValueError, match="length"):
        nmi(LabelAssignment([0, 1]), LabelAssignment([0, 1, 1]))
    with pytest.raises(ValueError, match="UNASSIGNED"):
        nmi(LabelAssignment([0, UNASSIGNED]), LabelAssignment([0, 1]))


# ---- labels ------------------------------------------------------------------


def test_label_assignment_invariants():
    lab = LabelAssignment([5, 5, UNASSIGNED, 9, 2])
    assert lab.cluster_sizes == {2: 1, 5: 2, 9: 1}
    assert sum(lab.cluster_sizes.values()) + lab.num_unassigned == lab.n
    c = lab.compact()
    assert c.labels.tolist() == [0, 0, UNASSIGNED, 1, 2]
    assert sorted(c.cluster_sizes) == list(range(c.num_clusters))


def test_labels_csv_round_trip(tmp_path):
    lab = LabelAssignment([0, 1, UNASSIGNED, 1])
    save_labels(lab, tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines() == ["index,label", "0,0", "1,1", "2,-1", "3,1"]
    assert load_labels(tmp_path / "l.csv") == lab


# ---- edge metrics ------------------------------------------------------------


def test_edge_metrics_examples():
    assert edge_metrics([(0, 1)], LabelAssignment([0, 0]), [(0, 1)]) == (1.0, 1.0)
    assert edge_metrics([(0, 1)], LabelAssignment([0, 1]))[0] == 0.0
    assert edge_metrics([], LabelAssignment([0, 1]), [(0, 1)])[0] is None


def test_edge_metrics_random_vs_double_loop():
    rng = np.random.default_rng(11)
    n = 20
    truth = rng.integers(0, 3, n)
    cand = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4]
    pred = [e for e in cand if rng.random() < 0.6]
    tp = 0
    for i, j in pred:
        tp += truth[i] == truth[j]
    positives = 0
    for i, j in cand:
        positives += truth[i] == truth[j]
    p, r = edge_metrics(pred, LabelAssignment(truth), cand)
    assert p == pytest.approx(tp / len(pred))
    assert r == pytest.approx(tp / positives)
    assert 0 <= p <= 1 and 0 <= r <= 1
