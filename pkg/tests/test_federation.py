import csv

import numpy as np
import pytest

from graphshift.attack import monitor
from graphshift.config import ExperimentConfig
from graphshift.experiments import train_federation
from graphshift.federation import (AggregationError, BenignClient, RoundRecord, Server, bulyan, bulyan_vectors,
                                   fedavg, fedavg_vectors, foolsgold_vectors, foolsgold_weights, krum,
                                   krum_select, run_training, write_rounds)
from graphshift.models import Architecture, init_params
from oracles import krum_oracle

TINY = ExperimentConfig(graphs_per_class=20, num_clients=4, num_malicious=1, rounds=2, model="gcn",
                        hidden=8, pretrain_epochs=30, stage1_epochs=2, stage2_epochs=2, repeats=1)


# ---------------------------------------------------------------- FedAvg

def test_fedavg_examples():
    x = np.array([1.0, -2.0, 3.5])
    assert np.array_equal(fedavg_vectors([x]), x)
    assert np.array_equal(fedavg_vectors([x, -x]), np.zeros(3))
    assert np.array_equal(fedavg_vectors([x] * 7), x)


def test_fedavg_is_the_elementwise_mean():
    rng = np.random.default_rng(0)
    for _ in range(20):
        xs = rng.normal(size=(int(rng.integers(1, 9)), 11))
        assert np.array_equal(fedavg_vectors(list(xs)), xs.mean(axis=0))


def test_fedavg_weighted_and_errors():
    out = fedavg_vectors([np.zeros(2), np.ones(2)], weights=[1, 3])
    np.testing.assert_allclose(out, [0.75, 0.75])
    with pytest.raises(AggregationError):
        fedavg_vectors([np.zeros(2), np.zeros(3)])
    with pytest.raises(AggregationError):
        fedavg_vectors([])
    with pytest.raises(AggregationError):
        fedavg_vectors([np.zeros(2)], weights=[-1])


def test_parameter_level_fedavg():
    a = init_params(Architecture("gcn", 3, (4,), 2), 0)
    b = init_params(Architecture("gcn", 3, (4,), 2), 1)
    out = fedavg([a, b])
    np.testing.assert_array_equal(out.flatten(), (a.flatten() + b.flatten()) / 2)


# ---------------------------------------------------------------- Krum

def test_krum_skips_the_outlier():
    rng = np.random.default_rng(1)
    honest = list(1e-3 * rng.normal(size=(4, 6)))
    outlier = rng.normal(size=6)
    outlier *= 1e3 / np.linalg.norm(outlier)
    updates = honest[:2] + [outlier] + honest[2:]
    chosen = krum_select(updates, 1)
    assert chosen != 2 and chosen == krum_oracle(np.array(updates), 1)


def test_krum_identical_updates_pick_lowest_id():
    x = np.array([0.5, 0.5])
    assert krum_select([x.copy() for _ in range(5)], 1) == 0


def test_krum_matches_oracle_on_random_inputs():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(4, 10))
        f = int(rng.integers(0, n - 2))
        x = rng.normal(size=(n, 5))
        assert krum_select(list(x), f) == krum_oracle(x, f)


def test_krum_precondition():
    with pytest.raises(AggregationError, match="N >= f\\+3"):
        krum_select([np.zeros(2)] * 3, 1)


def test_fedavg_of_krum_selection_is_the_selection():
    params = [init_params(Architecture("gcn", 3, (4,), 2), s) for s in range(5)]
    chosen = krum(params, 1)
    assert np.array_equal(fedavg([chosen]).flatten(), chosen.flatten())
    assert any(np.array_equal(chosen.flatten(), p.flatten()) for p in params)


# ---------------------------------------------------------------- Bulyan

def test_bulyan_examples():
    x = np.array([1.0, 2.0, -3.0])
    out, _ = bulyan_vectors([x.copy() for _ in range(7)], 1)
    np.testing.assert_allclose(out, x)
    xs = np.random.default_rng(0).normal(size=(5, 4))
    out, selected = bulyan_vectors(list(xs), 0)
    np.testing.assert_allclose(out, xs.mean(axis=0), atol=1e-15)
    assert sorted(selected) == list(range(5))
    with pytest.raises(AggregationError, match="4f\\+3"):
        bulyan_vectors([np.zeros(2)] * 6, 1)


def test_bulyan_stays_within_honest_ranges():
    rng = np.random.default_rng(4)
    for _ in range(100):
        f = int(rng.integers(1, 3))
        n = 4 * f + 3 + int(rng.integers(0, 3))
        honest = rng.normal(size=(n - f, 6))
        bad = rng.normal(size=(f, 6)) * rng.choice([1e2, 1e4]) + rng.choice([-50.0, 50.0])
        ids = rng.permutation(n)
        updates = np.empty((n, 6))
        updates[ids[:n - f]] = honest
        updates[ids[n - f:]] = bad
        out, _ = bulyan_vectors(list(updates), f)
        assert np.all(out >= honest.min(axis=0) - 1e-12) and np.all(out <= honest.max(axis=0) + 1e-12)


# ---------------------------------------------------------------- FoolsGold

def test_foolsgold_downweights_colluders():
    hist = [np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    w = foolsgold_weights(hist)
    assert w[0] < w[2] and w[1] < w[2]
    np.testing.assert_allclose(w, [0.0, 0.0, 1.0])


def test_foolsgold_orthogonal_histories_equal_fedavg():
    hist = list(np.eye(4)[:3] * np.array([[1.0], [2.0], [5.0]]))
    updates = list(np.random.default_rng(0).normal(size=(3, 4)))
    w = foolsgold_weights(hist)
    assert np.all(w == w[0])
    out, _ = foolsgold_vectors(updates, hist)
    np.testing.assert_allclose(out, np.mean(updates, axis=0), atol=1e-15)


def test_foolsgold_zero_history_is_fedavg():
    updates = list(np.random.default_rng(1).normal(size=(3, 4)))
    out, _ = foolsgold_vectors(updates, [np.zeros(4)] * 3)
    np.testing.assert_allclose(out, np.mean(updates, axis=0), atol=1e-15)


def test_foolsgold_all_zero_weights_fall_back(caplog):
    same = [np.array([1.0, 0.0])] * 3   # exact similarity 1 between every pair
    updates = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([2.0, 2.0])]
    out, w = foolsgold_vectors(updates, same)
    assert not w.any()
    np.testing.assert_allclose(out, np.mean(updates, axis=0))
    assert "falling back" in caplog.text


def test_foolsgold_shape_check():
    with pytest.raises(AggregationError):
        foolsgold_vectors([np.zeros(2)] * 2, [np.zeros(3)] * 2)


# ---------------------------------------------------------------- permutation equivariance

@pytest.mark.parametrize("rule", ["fedavg", "krum", "bulyan", "foolsgold"])
def test_aggregation_is_permutation_equivariant(rule):
    rng = np.random.default_rng(5)
    xs = rng.normal(size=(7, 5))
    hist = rng.normal(size=(7, 5))
    run = {
        "fedavg": lambda x, h: fedavg_vectors(list(x)),
        "krum": lambda x, h: x[krum_select(list(x), 1)],
        "bulyan": lambda x, h: bulyan_vectors(list(x), 0)[0],
        "foolsgold": lambda x, h: foolsgold_vectors(list(x), list(h))[0],
    }[rule]
    base = run(xs, hist)
    for _ in range(10):
        perm = rng.permutation(7)
        np.testing.assert_allclose(run(xs[perm], hist[perm]), base, rtol=0, atol=1e-12)


def test_bulyan_tie_goes_to_the_lower_id():
    # With one Byzantine client the last Krum pass scores each candidate by
    # its single nearest neighbour, so a mutually-nearest pair always ties;
    # the lower client id is selected, which makes Bulyan order-sensitive.
    xs = [np.array([0.0]), np.array([1.0]), np.array([10.0]), np.array([11.0]),
          np.array([30.0]), np.array([31.0]), np.array([100.0])]
    _, selected = bulyan_vectors(xs, 1)
    assert selected == [2, 3, 1, 4, 0]      # 4 beats its tied partner 5
    swapped = xs[:4] + [xs[5], xs[4], xs[6]]
    _, selected = bulyan_vectors(swapped, 1)
    assert selected == [2, 3, 1, 4, 0]      # id 4 now holds the value 31


def test_server_decisions():
    params = [init_params(Architecture("gcn", 3, (4,), 2), s) for s in range(7)]
    current = params[0]
    for kind in ("fedavg", "krum", "bulyan", "foolsgold"):
        out, decision = Server(kind, 1).aggregate(current, params, [1] * 7)
        assert out.is_finite()
        if kind == "krum":
            assert 0 <= int(decision) < 7
        if kind in ("bulyan", "foolsgold"):
            assert len(decision.split(";")) == (5 if kind == "bulyan" else 7)
    with pytest.raises(AggregationError):
        Server("median").aggregate(current, params, [1] * 7)


def test_bulyan_parameter_wrapper():
    params = [init_params(Architecture("gcn", 3, (4,), 2), s) for s in range(7)]
    assert bulyan(params, 1).flatten().shape == params[0].flatten().shape


# ---------------------------------------------------------------- training loop

def _clients(ds, n=3):
    graphs = list(ds.graphs)
    return [BenignClient(i, graphs[i::n]) for i in range(n)]


def test_zero_rounds_return_the_initialization(small_dataset):
    init = init_params(Architecture("gcn", small_dataset.feature_dim, (8,), 2), 0)
    model, records = run_training(TINY, _clients(small_dataset), init, list(small_dataset.graphs), 0, rounds=0)
    assert model.digest() == init.digest() and records == []


def test_consumption_order_is_by_client_id(small_dataset):
    init = init_params(Architecture("gcn", small_dataset.feature_dim, (8,), 2), 0)
    clients = _clients(small_dataset, 4)
    a, ra = run_training(TINY, clients, init, list(small_dataset.graphs), 0, rounds=2)
    b, rb = run_training(TINY, clients[::-1], init, list(small_dataset.graphs), 0, rounds=2)
    assert a.digest() == b.digest()
    assert [r.round for r in ra] == [1, 2] and ra[0].participants == (0, 1, 2, 3)
    assert ra == rb


def test_aggregator_failure_names_the_round(small_dataset):
    init = init_params(Architecture("gcn", small_dataset.feature_dim, (8,), 2), 0)
    cfg = TINY.replace(aggregator="krum")
    with pytest.raises(AggregationError, match="round 1"):
        run_training(cfg, _clients(small_dataset, 2), init, [], 0, rounds=1)


def test_all_benign_run_never_touches_shifters():
    monitor.reset()
    res = train_federation(TINY.replace(num_malicious=0), 0, "shifter")
    assert monitor.shifter_calls == 0 and monitor.violations == []
    assert all(c.role == "benign" for c in res.clients)


def test_no_malicious_clients_match_the_no_attack_run():
    a = train_federation(TINY.replace(num_malicious=0), 3, "shifter")
    b = train_federation(TINY, 3, "none")
    assert a.model.digest() == b.model.digest()
    assert [r.oa for r in a.records] == [r.oa for r in b.records]


def test_training_is_reproducible():
    a = train_federation(TINY, 1, "shifter")
    b = train_federation(TINY, 1, "shifter")
    assert a.model.digest() == b.model.digest()
    assert a.records == b.records


def test_round_csv(tmp_path):
    recs = [RoundRecord(1, 0.5, "krum", "2", (1.0, 2.5)), RoundRecord(2, 0.75, "krum", "0", (0.5, 0.25))]
    path = write_rounds(recs, tmp_path / "rounds.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["round", "oa", "aggregator", "selected_or_weights", "update_norms"]
    assert rows[1] == ["1", "0.5", "krum", "2", "1.0;2.5"]
    assert len(rows) == 3


def test_forty_rounds_reach_high_accuracy():
    cfg = ExperimentConfig(num_clients=10, rounds=40, model="gcn")
    res = train_federation(cfg, 0, "none")
    assert len(res.records) == 40 and res.oa >= 0.85
