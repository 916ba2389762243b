from dataclasses import replace

import numpy as np
import pytest

from fedseq.centers import ClientDataset, partition_cohort
from fedseq.federation import (ClientUpdate, FederationConfig, aggregate, best_round, local_update, num_selected,
                               pool, run_centralized, run_fedavg, run_local_baseline, select_clients,
                               weighted_average, write_round_log)
from fedseq.model import Head, init_params
from fedseq.tasks import split_validation


@pytest.fixture(scope="module")
def clients(small_synth):
    cohort, transfers = small_synth
    return partition_cohort(cohort, transfers).clients


def test_num_selected():
    assert num_selected(39, 0.1) == 4
    assert num_selected(5, 1.0) == 5
    assert num_selected(3, 0.01) == 1
    assert num_selected(10, 0.25) == 3  # 2.5 rounds half up


def test_select_clients_sorted_unique():
    ids = [f"c{i}" for i in range(39)]
    picked = select_clients(ids, 0.1, np.random.default_rng(0))
    assert len(picked) == 4 and picked == sorted(set(picked))
    assert select_clients(ids, 1.0, np.random.default_rng(0)) == ids


def test_aggregate_example():
    ups = [ClientUpdate({"w": np.array([1.0])}, 10, "a"), ClientUpdate({"w": np.array([4.0])}, 30, "b")]
    assert aggregate(ups)["w"][0] == 3.25


def test_aggregate_single_is_copy():
    w = {"w": np.array([1.5, 2.5], dtype=np.float32)}
    out = aggregate([ClientUpdate(w, 3, "a")])
    assert out["w"].tobytes() == w["w"].tobytes() and out["w"] is not w["w"]


def test_aggregate_rejects_mismatch():
    with pytest.raises(ValueError, match="'w'"):
        aggregate([ClientUpdate({"w": np.zeros(2)}, 1, "a"), ClientUpdate({"w": np.zeros(3)}, 1, "b")])
    with pytest.raises(ValueError):
        aggregate([ClientUpdate({"w": np.zeros(2)}, 0, "a")])
    with pytest.raises(ValueError):
        aggregate([])


def test_weighted_average():
    assert weighted_average([0.5, 0.7], [10, 30]) == pytest.approx(0.65, abs=1e-15)
    assert weighted_average([0.3, 0.3, 0.3], [1, 5, 9]) == pytest.approx(0.3, abs=1e-15)
    assert weighted_average([0.42], [7]) == 0.42


def test_local_update_lr_zero_returns_global(clients, small_vocab, small_hyper):
    cfg = FederationConfig(replace(small_hyper, learning_rate=0.0), local_epochs=2)
    g = init_params(small_hyper, 0)
    up = local_update(g, clients[0], cfg, 1, small_vocab)
    for k in g:
        np.testing.assert_array_equal(up.params[k], g[k])


def test_local_update_order_independent(clients, small_vocab, small_hyper):
    cfg = FederationConfig(small_hyper, task=Head.MLM)
    g = init_params(small_hyper, 0)
    a1 = local_update(g, clients[0], cfg, 2, small_vocab)
    b1 = local_update(g, clients[1], cfg, 2, small_vocab)
    b2 = local_update(g, clients[1], cfg, 2, small_vocab)
    a2 = local_update(g, clients[0], cfg, 2, small_vocab)
    for k in g:
        assert a1.params[k].tobytes() == a2.params[k].tobytes()
        assert b1.params[k].tobytes() == b2.params[k].tobytes()


def test_fedavg_logs_and_lr_zero(clients, small_vocab, small_hyper):
    cfg = FederationConfig(replace(small_hyper, learning_rate=0.0), client_fraction=0.67, rounds=2)
    val = pool(clients)[:30]
    params, rounds = run_fedavg(clients, cfg, val, small_vocab)
    init = init_params(small_hyper, cfg.seed)
    for k in init:
        np.testing.assert_array_equal(params[k], init[k])
    assert [len(r.selected) for r in rounds] == [2, 2]


def test_fedavg_deterministic_and_round_csv(tmp_path, clients, small_vocab, small_hyper):
    cfg = FederationConfig(small_hyper, client_fraction=0.67, rounds=3, seed=2)
    val = pool(clients)[:30]
    p1, r1 = run_fedavg(clients, cfg, val, small_vocab)
    p2, r2 = run_fedavg(clients, cfg, val, small_vocab)
    assert all(p1[k].tobytes() == p2[k].tobytes() for k in p1)
    assert [r.val_metric for r in r1] == [r.val_metric for r in r2]
    assert best_round(r1) == 1 + int(np.argmax([r.val_metric for r in r1]))
    write_round_log(r1, tmp_path / "rounds.csv")
    lines = (tmp_path / "rounds.csv").read_text().splitlines()
    assert lines[0] == "round,client_id,n_examples,local_loss,global_val_metric"
    assert len(lines) == 1 + sum(len(r.selected) for r in r1)


def test_pool_size(clients):
    assert len(pool(clients)) == sum(len(c) for c in clients)


def test_centralized_deterministic(clients, small_vocab, small_hyper):
    train, val = split_validation(pool(clients), 0)
    cfg = FederationConfig(small_hyper, rounds=2)
    a, _ = run_centralized(train, val, cfg, small_vocab)
    b, _ = run_centralized(train, val, cfg, small_vocab)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_local_baseline_weights_and_skips(clients, small_vocab, small_hyper):
    from fedseq.data import build_eval_examples
    cfg = FederationConfig(small_hyper)
    tests = {c.center_id: build_eval_examples(c.patients[:10], small_vocab, small_hyper.max_len, 0)
             for c in clients}
    tests[clients[-1].center_id] = []
    res = run_local_baseline(clients, cfg, tests, small_vocab, mlm_epochs=1, nextvisit_epochs=2)
    assert clients[-1].center_id in res.skipped
    ids = sorted(res.ap)
    assert res.weighted_ap == weighted_average([res.ap[i] for i in ids], [res.num_examples[i] for i in ids])


def test_config_validation(small_hyper):
    with pytest.raises(ValueError):
        FederationConfig(small_hyper, client_fraction=0)
    with pytest.raises(ValueError):
        FederationConfig(small_hyper, rounds=0)


def test_empty_client_is_left_out(clients, small_vocab, small_hyper):
    empty = ClientDataset("zz", [])
    cfg = FederationConfig(small_hyper, client_fraction=1.0, rounds=1)
    _, rounds = run_fedavg(list(clients) + [empty], cfg, pool(clients)[:20], small_vocab)
    assert "zz" not in rounds[0].selected
