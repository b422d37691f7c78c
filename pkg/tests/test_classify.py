import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxyid import numerics
from proxyid.classify import (
    EmbeddingCollection,
    KNNClassifier,
    SolvedLayerClassifier,
    knn_predict,
    load_collection,
    make_classifier,
    save_collection,
    sl_predict,
    solve_layer,
)
from proxyid.errors import CorruptArtifactError, DegenerateInputError, UserError


def onehot(labels, classes):
    y = np.zeros((len(labels), len(classes)))
    for i, lab in enumerate(labels):
        y[i, classes.index(lab)] = 1.0
    return y


def clustered(seed, classes=4, per=6, dim=8, spread=0.1):
    rng = numerics.make_rng(seed)
    centers = rng.normal(size=(classes, dim))
    e = np.vstack([centers[c] + spread * rng.normal(size=(per, dim)) for c in range(classes)])
    return e, np.repeat(np.arange(classes), per)


def test_solved_layer_matches_normal_equations():
    for seed in range(10):
        e, y = clustered(seed)
        layer = solve_layer(e, y)
        classes = list(layer.classes)
        oracle = np.linalg.solve(e.T @ e, e.T @ onehot(y, classes))
        assert np.allclose(layer.weights, oracle, atol=1e-8)


def test_solved_layer_is_a_least_squares_minimum():
    e, y = clustered(3)
    layer = solve_layer(e, y)
    target = onehot(y, list(layer.classes))
    base = np.linalg.norm(e @ layer.weights - target)
    rng = numerics.make_rng(99)
    for _ in range(20):
        bumped = layer.weights + 1e-3 * rng.normal(size=layer.weights.shape)
        assert np.linalg.norm(e @ bumped - target) >= base


def test_solved_layer_rank_deficient_matches_numpy_pinv():
    e = np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]])
    layer = solve_layer(e, [0, 0, 1])
    assert np.allclose(layer.weights, np.linalg.pinv(e) @ onehot([0, 0, 1], [0, 1]), atol=1e-10)


def test_solved_layer_all_zero_embeddings():
    with pytest.raises(DegenerateInputError):
        solve_layer(np.zeros((3, 2)), [0, 1, 0])


def test_sl_predicts_training_classes_and_confidence_is_cosine_to_mean():
    e, y = clustered(5)
    col = EmbeddingCollection(e, y)
    clf = SolvedLayerClassifier(col)
    preds = clf.predict(col.embeddings)
    assert [p.label for p in preds] == list(y)
    for row, p in zip(col.embeddings, preds):
        mean = col.embeddings[col.labels == p.label].mean(axis=0)
        assert p.confidence == pytest.approx(row @ mean / np.linalg.norm(mean), abs=1e-12)
        assert -1.0 <= p.confidence <= 1.0


def test_sl_single_class_predicts_it():
    col = EmbeddingCollection([[1.0, 0.0], [0.9, 0.1]], [7, 7])
    rec = sl_predict(SolvedLayerClassifier(col).layer, [0.0, 1.0], col)
    assert rec.label == 7


def test_sl_rejects_dim_mismatch():
    col = EmbeddingCollection(*clustered(0))
    with pytest.raises(UserError):
        SolvedLayerClassifier(col).predict(np.ones((1, 3)))


def brute_knn(emb, labels, q, k):
    qn = q / np.linalg.norm(q)
    sims = [float(row @ qn) for row in emb]
    idx = sorted(range(len(sims)), key=lambda i: (-sims[i], i))[:k]
    counts, best = {}, {}
    for i in idx:
        lab = int(labels[i])
        counts[lab] = counts.get(lab, 0) + 1
        best[lab] = max(best.get(lab, -2.0), sims[i])
    top = max(counts.values())
    tied = [c for c in counts if counts[c] == top]
    top_best = max(best[c] for c in tied)
    winner = min(c for c in tied if best[c] == top_best)
    return winner, best[winner]


def test_knn_matches_brute_force():
    rng = numerics.make_rng(17)
    for trial in range(30):
        e, y = clustered(trial, spread=1.0)
        col = EmbeddingCollection(e, y)
        k = int(rng.integers(1, 8))
        q = rng.normal(size=e.shape[1])
        rec = knn_predict(col, q, k)
        assert (rec.label, rec.confidence) == pytest.approx(brute_knn(col.embeddings, col.labels, q, k))


def test_knn_exact_tie_goes_to_lower_label():
    col = EmbeddingCollection([[1.0, 1.0], [1.0, -1.0]], [3, 1])
    assert knn_predict(col, [1.0, 0.0], 2).label == 1


def test_knn_rejects_bad_k_and_empty():
    col = EmbeddingCollection([[1.0, 0.0]], [0])
    with pytest.raises(UserError):
        knn_predict(col, [1.0, 0.0], 2)
    with pytest.raises(UserError):
        knn_predict(EmbeddingCollection(np.zeros((0, 2)), []), [1.0, 0.0])
    with pytest.raises(DegenerateInputError):
        knn_predict(col, [0.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["sl", "knn"]))
def test_duplicating_collection_keeps_confidence(seed, kind):
    e, y = clustered(seed % 50, spread=0.5)
    col = EmbeddingCollection(e, y)
    doubled = col.merge(col)
    q = numerics.make_rng(seed).normal(size=(3, e.shape[1]))
    a = make_classifier(kind, col).predict(q)
    b = make_classifier(kind, doubled).predict(q)
    for ra, rb in zip(a, b):
        assert ra.label == rb.label
        assert ra.confidence == pytest.approx(rb.confidence, abs=1e-9)


def test_collection_validates_and_merges():
    with pytest.raises(UserError):
        EmbeddingCollection(np.ones((2, 3)), [0])
    with pytest.raises(UserError):
        EmbeddingCollection([[np.inf, 0.0]], [0])
    a = EmbeddingCollection([[3.0, 4.0]], [0])
    assert np.allclose(a.embeddings, [[0.6, 0.8]])
    with pytest.raises(UserError):
        a.merge(EmbeddingCollection([[1.0, 0.0, 0.0]], [1]))
    merged = a.merge(EmbeddingCollection([[0.0, 2.0]], [1]))
    assert len(merged) == 2 and merged.classes == (0, 1)
    assert merged.subset([1]).labels.tolist() == [1]
    with pytest.raises(ValueError):
        a.embeddings[0, 0] = 1.0


def test_zero_class_mean_is_degenerate():
    col = EmbeddingCollection([[1.0, 0.0], [-1.0, 0.0]], [0, 0])
    with pytest.raises(DegenerateInputError):
        col.class_means()


def test_collection_file_round_trip(tmp_path):
    e, y = clustered(2)
    col = EmbeddingCollection(e, y, {0: "a", 1: "b"})
    save_collection(tmp_path / "c.bin", col, {"seed": 3})
    back = load_collection(tmp_path / "c.bin")
    assert np.allclose(back.embeddings, col.embeddings, atol=1e-6)
    assert back.labels.tolist() == col.labels.tolist()
    assert back.label_names == {0: "a", 1: "b"}
    # float32 storage is a fixed point after one trip
    save_collection(tmp_path / "d.bin", back, {"seed": 3})
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()


def test_collection_file_corruption(tmp_path):
    col = EmbeddingCollection(*clustered(1))
    path = tmp_path / "c.bin"
    save_collection(path, col)
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    with pytest.raises(CorruptArtifactError):
        load_collection(path)
    path.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(CorruptArtifactError):
        load_collection(path)


def test_make_classifier_kinds():
    col = EmbeddingCollection(*clustered(0))
    assert isinstance(make_classifier("knn", col, 3), KNNClassifier)
    with pytest.raises(UserError):
        make_classifier("svm", col)
