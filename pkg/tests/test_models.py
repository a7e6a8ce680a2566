import numpy as np
import pytest

from graphshift import autodiff as ad
from graphshift.graphs import Graph, SyntheticSpec, generate_synthetic, split_train_test
from graphshift.models import (Architecture, GraphBatch, classify, dataset_loss, encode,
                               evaluate_accuracy, forward, gat_attention, init_params, load_params,
                               predict, save_params, train_local)
from gradcheck import model_grad_error
from oracles import random_graph


def random_features(g: Graph, d: int, seed: int) -> Graph:
    return g.with_features(np.random.default_rng(seed).normal(size=(g.num_nodes, d)))


def permuted(g: Graph, perm: np.ndarray) -> Graph:
    x = np.empty_like(g.features)
    x[perm] = g.features
    return Graph.build(g.num_nodes, [(perm[u], perm[v]) for u, v in g.edges.tolist()], x, g.label)


@pytest.mark.parametrize("kind", ["gcn", "gat"])
@pytest.mark.parametrize("seed", range(20))
def test_end_to_end_gradient(kind, seed):
    assert model_grad_error(kind, seed) < 1e-3


def test_isolated_node_identity_gcn():
    arch = Architecture("gcn", 3, (3,), 2)
    params = init_params(arch, 0)
    params.tensors["W0"] = np.eye(3)
    x = np.array([[0.5, -2.0, 1.0]])
    emb = encode(params, Graph.build(1, [], x, 0))
    np.testing.assert_allclose(emb, [[0.5, -0.02, 1.0]], rtol=0, atol=1e-15)


@pytest.mark.parametrize("kind", ["gcn", "gat"])
def test_forward_is_permutation_invariant(kind):
    rng = np.random.default_rng(2)
    params = init_params(Architecture(kind, 4, (8, 8), 3), 1)
    for i in range(10):
        g = random_features(random_graph(rng, max_nodes=12), 4, i)
        _, a = forward(params, g)
        _, b = forward(params, permuted(g, rng.permutation(g.num_nodes)))
        assert np.max(np.abs(a - b)) < 1e-9


def test_gat_attention_sums_to_one_per_node():
    rng = np.random.default_rng(5)
    params = init_params(Architecture("gat", 3, (6, 6), 2), 3)
    for i in range(10):
        g = random_features(random_graph(rng, max_nodes=15), 3, i)
        for layer in (0, 1):
            src, dst, alpha = gat_attention(params, g, layer)
            totals = np.bincount(dst, weights=alpha, minlength=g.num_nodes)
            np.testing.assert_allclose(totals, 1.0, atol=1e-12)
            assert len(src) == 2 * g.num_edges + g.num_nodes


def test_encode_then_classify_matches_forward(small_dataset):
    params = init_params(Architecture("gat", small_dataset.feature_dim, (16, 16), 2), 0)
    g = small_dataset.graphs[0]
    emb, logits = forward(params, g)
    np.testing.assert_array_equal(encode(params, g), emb)
    np.testing.assert_allclose(classify(params, emb), logits, atol=1e-14)
    assert emb.shape == (1, 16)


def test_isomorphic_graphs_have_equal_embeddings(small_dataset):
    params = init_params(Architecture("gcn", small_dataset.feature_dim, (16, 16), 2), 0)
    g = small_dataset.graphs[3]
    h = permuted(g, np.random.default_rng(0).permutation(g.num_nodes))
    assert np.max(np.abs(encode(params, g) - encode(params, h))) < 1e-9


def test_batched_forward_matches_single(small_dataset):
    params = init_params(Architecture("gat", small_dataset.feature_dim, (8, 8), 2), 0)
    graphs = list(small_dataset.graphs[:7])
    _, batched = forward(params, GraphBatch.of(graphs))
    single = np.concatenate([forward(params, g)[1] for g in graphs])
    np.testing.assert_allclose(batched, single, atol=1e-12)


def test_dimension_mismatch_is_rejected():
    params = init_params(Architecture("gcn", 3, (4,), 2), 0)
    with pytest.raises(ad.ShapeError):
        forward(params, Graph.build(2, [(0, 1)], np.ones((2, 5)), 0))


def test_zero_epochs_leave_params_unchanged(small_dataset):
    params = init_params(Architecture("gcn", small_dataset.feature_dim, (8,), 2), 0)
    out = train_local(params, list(small_dataset.graphs), 0, 0.1, seed=0)
    assert out.digest() == params.digest() and out is not params


def test_train_local_rejects_empty_data():
    params = init_params(Architecture("gcn", 3, (4,), 2), 0)
    with pytest.raises(ValueError):
        train_local(params, [], 1, 0.1, 0)


def test_training_loss_is_non_increasing():
    ds = generate_synthetic(SyntheticSpec(graphs_per_class=5, feature_sep=2.0, heavy_dims=0, seed=1))
    graphs = list(ds.graphs)
    params = init_params(Architecture("gcn", ds.feature_dim, (16, 16), 2), 0)
    losses = [dataset_loss(params, graphs)]
    for epoch in range(30):
        params = train_local(params, graphs, 1, 0.05, seed=epoch)
        losses.append(dataset_loss(params, graphs))
    assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:])), losses
    assert losses[-1] < losses[0]


def test_training_is_deterministic(small_dataset):
    params = init_params(Architecture("gat", small_dataset.feature_dim, (8, 8), 2), 0)
    a = train_local(params, list(small_dataset.graphs), 2, 0.1, seed=3, batch_size=8)
    b = train_local(params, list(small_dataset.graphs), 2, 0.1, seed=3, batch_size=8)
    assert a.digest() == b.digest()


def test_central_gcn_separates_synthetic_corpus():
    ds = generate_synthetic(SyntheticSpec(graphs_per_class=100, feature_sep=0.25, seed=0))
    train, test = split_train_test(len(ds), 0.8, seed=0)
    params = init_params(Architecture("gcn", ds.feature_dim, (16, 16), 2), 0)
    params = train_local(params, ds.subset(train), 60, 0.1, seed=0)
    assert evaluate_accuracy(params, ds.subset(test)) >= 0.85


def test_accuracy_examples(small_dataset):
    graphs = list(small_dataset.graphs)
    params = init_params(Architecture("gcn", small_dataset.feature_dim, (4,), 2), 0)
    preds = predict(params, graphs)
    relabeled = [g if g.label == p else Graph(g.num_nodes, g.edges, g.features, int(p)) for g, p in zip(graphs, preds)]
    assert evaluate_accuracy(params, relabeled) == 1.0
    wrong = graphs[0]
    flipped = Graph(wrong.num_nodes, wrong.edges, wrong.features, 1 - int(preds[0]))
    assert evaluate_accuracy(params, [flipped]) == 0.0
    with pytest.raises(ValueError):
        evaluate_accuracy(params, [])


def test_argmax_ties_go_to_lowest_class():
    params = init_params(Architecture("gcn", 2, (3,), 3), 0)
    params.tensors["Wc"][:] = 0.0
    g = Graph.build(2, [(0, 1)], np.ones((2, 2)), 2)
    assert predict(params, [g]).tolist() == [0]


def test_untrained_accuracy_near_chance(small_dataset):
    graphs = list(small_dataset.graphs)
    accs = [evaluate_accuracy(init_params(Architecture("gat", small_dataset.feature_dim, (16, 16), 2), s),
                              graphs) for s in range(20)]
    assert abs(np.mean(accs) - 0.5) <= 0.1


def test_checkpoint_round_trip(tmp_path):
    params = init_params(Architecture("gat", 5, (16, 8), 3), 4)
    path = save_params(params, tmp_path / "m.txt")
    back = load_params(path)
    assert back.arch == params.arch and back.digest() == params.digest()
    assert path.read_text().startswith("graphshift-record 1\n")


def test_checkpoint_rejects_foreign_files(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("something else\n")
    with pytest.raises(ValueError):
        load_params(bad)
    bad.write_text("graphshift-record 99\ndescriptor {}\nend\n")
    with pytest.raises(ValueError, match="version"):
        load_params(bad)


def test_flatten_round_trip():
    params = init_params(Architecture("gat", 5, (6, 6), 2), 0)
    back = params.from_flat(params.flatten())
    assert back.digest() == params.digest()
    with pytest.raises(ValueError):
        params.from_flat(np.zeros(3))
