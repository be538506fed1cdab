import math

import numpy as np
import pytest
from scipy import stats

from sketchfed import (
    ClientShard,
    FedAvgConfig,
    FetchConfig,
    LeastSquares,
    LocalTopKConfig,
    ParameterError,
    PartitionError,
    RoundConfig,
    SketchConfig,
    run_round,
    simulate,
)
from sketchfed.rng import substream
from sketchfed.sim import (
    Federation,
    account_bytes,
    compression_ratio,
    evaluate_risk,
    init_state,
    make_blobs,
    make_least_squares_clients,
    metrics_csv,
    partition_iid,
    partition_noniid,
    sample_clients,
)


def balanced(n, classes, f=2):
    y = np.arange(n) % classes
    X = np.column_stack([np.arange(n), y]).astype(float)[:, :f]
    return X, y


# -- partitioning --------------------------------------------------------------


def test_single_client_gets_everything():
    X, y = balanced(30, 3)
    (s,) = partition_noniid(X, y, 1, 3, seed=0)
    assert sorted(s.X[:, 0]) == list(range(30))


def test_ten_thousand_clients_five_same_class_examples():
    X, y = balanced(50_000, 10)
    shards = partition_noniid(X, y, 10_000, 1, seed=1)
    assert len(shards) == 10_000
    assert all(len(s) == 5 and len(set(s.y.tolist())) == 1 for s in shards)


@pytest.mark.parametrize("clients, cpc", [(7, 1), (10, 2), (4, 3), (25, 1)])
def test_partition_is_disjoint_cover_with_class_limit(clients, cpc):
    X, y = balanced(300, 5)
    y = np.where(np.arange(300) < 40, 0, y)  # unbalanced classes
    X[:, 1] = y
    shards = partition_noniid(X, y, clients, cpc, seed=3)
    ids = np.concatenate([s.X[:, 0] for s in shards])
    assert sorted(ids.tolist()) == list(range(300))
    assert all(len(set(s.y.tolist())) <= cpc for s in shards)
    assert all(len(s) > 0 for s in shards)


def test_partition_deterministic_and_seed_dependent():
    X, y = balanced(100, 4)
    a = partition_noniid(X, y, 10, 1, seed=5)
    b = partition_noniid(X, y, 10, 1, seed=5)
    c = partition_noniid(X, y, 10, 1, seed=6)
    assert all(np.array_equal(s.X, t.X) for s, t in zip(a, b))
    assert any(not np.array_equal(s.X, t.X) for s, t in zip(a, c))


def test_partition_errors():
    X, y = balanced(10, 2)
    with pytest.raises(PartitionError):
        partition_noniid(X, y, 11, 1, seed=0)
    with pytest.raises(PartitionError):
        partition_noniid(X[:0], y[:0], 1, 1, seed=0)
    with pytest.raises(PartitionError):
        partition_iid(X, y, 11, seed=0)


def test_partition_iid_cover():
    X, y = balanced(50, 5)
    shards = partition_iid(X, y, 7, seed=0)
    assert sorted(np.concatenate([s.X[:, 0] for s in shards]).tolist()) == list(range(50))


# -- sampling --------------------------------------------------------------------


def test_sample_all_clients():
    assert sorted(sample_clients(5, 5, np.random.default_rng(0)).tolist()) == [0, 1, 2, 3, 4]
    with pytest.raises(ParameterError):
        sample_clients(3, 4, np.random.default_rng(0))


def test_sample_two_clients_binomial():
    n = 10_000
    hits = sum(int(sample_clients(2, 1, substream(42, "sampling", t))[0]) for t in range(n))
    assert abs(hits - n / 2) <= 3 * math.sqrt(n / 4)


def test_sampling_uniform_chi_square():
    counts = np.zeros(100)
    for t in range(100_000):
        counts[sample_clients(100, 1, substream(7, "sampling", t))] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_sampling_deterministic():
    a = [sample_clients(20, 5, substream(1, "sampling", t)).tolist() for t in range(5)]
    b = [sample_clients(20, 5, substream(1, "sampling", t)).tolist() for t in range(5)]
    assert a == b
    assert all(len(set(x)) == 5 for x in a)


# -- bytes -----------------------------------------------------------------------


def test_account_bytes_examples():
    d = 124_500_000
    ratio = compression_ratio(account_bytes(("dense", d)), account_bytes(("sparse", 50_000)))
    assert ratio == pytest.approx(2490, rel=0.01)
    assert account_bytes(("sparse", 0)) == 0
    assert account_bytes(("sketch", 5, 10_000)) == 200_000
    assert account_bytes(("sparse", 10), "index_value") == 80
    assert account_bytes(("sketch", 5, 10_000), sketch_encoding="cols") == 40_000
    with pytest.raises(ParameterError):
        account_bytes(("ragged", 3))
    assert compression_ratio(10, 0) == math.inf


# -- risk ------------------------------------------------------------------------


def test_evaluate_risk_examples():
    spec = LeastSquares(1)
    w = np.array([1.0])

    def shard_with_loss(cid, loss, n):
        # 0.5 * (x - y)^2 = loss with x = 1, y = 1 - sqrt(2 loss)
        return ClientShard(cid, np.ones((n, 1)), np.full(n, 1 - math.sqrt(2 * loss)))

    assert evaluate_risk(w, [shard_with_loss(0, 1.5, 4)], spec) == pytest.approx(1.5)
    assert evaluate_risk(w, [shard_with_loss(0, 1.0, 2), shard_with_loss(1, 3.0, 2)], spec) == pytest.approx(2.0)
    assert evaluate_risk(w, [shard_with_loss(0, 4.0, 1), shard_with_loss(1, 0.0, 3)], spec) == pytest.approx(1.0)


# -- rounds ----------------------------------------------------------------------


def ls_fed(C=6, n=5, f=4, seed=0):
    shards, _ = make_least_squares_clients(C, n, f, np.random.default_rng(seed))
    return Federation(shards), LeastSquares(f)


OPTIMIZERS = {
    "fetchsgd": lambda d: FetchConfig(eta=0.1, k=2, sketch=SketchConfig(3, 8, d, 1)),
    "localtopk": lambda d: LocalTopKConfig(k=2, lr=0.1, local_error=True, global_momentum=0.5),
    "fedavg": lambda d: FedAvgConfig(local_epochs=1, local_batch=2, local_lr=0.1),
}


@pytest.mark.parametrize("name", OPTIMIZERS)
def test_zero_gradients_leave_weights(name):
    fed, spec = ls_fed()
    w_true = np.linalg.lstsq(*fed.pooled, rcond=None)[0]
    # labels fit exactly, so every gradient at w_true is zero
    exact = Federation([ClientShard(s.client_id, s.X, s.X @ w_true) for s in fed])
    state = init_state(w_true, OPTIMIZERS[name](spec.dim), len(exact))
    for _ in range(3):
        state, m = run_round(state, OPTIMIZERS[name](spec.dim), exact, spec, RoundConfig(3), seed=0)
        assert m.update_nnz == 0
    np.testing.assert_array_equal(state.weights, w_true)


def test_fetchsgd_full_participation_matches_centralized_sgd():
    fed, spec = ls_fed(C=4, n=5, f=6)
    d = spec.dim
    free = SketchConfig(5, 4096, d, 3)
    opt = FetchConfig(eta=0.2, k=d, sketch=free, rho=0.0)
    w0 = np.random.default_rng(1).normal(size=d)
    state = init_state(w0, opt, len(fed))
    state, _ = run_round(state, opt, fed, spec, RoundConfig(participants=4, weighting="size"), seed=0)
    from sketchfed.models import loss_and_grad

    _, g = loss_and_grad(spec, w0, fed.pooled)
    ref = w0 - 0.2 * g
    assert np.linalg.norm(state.weights - ref) <= 1e-6 * np.linalg.norm(ref)


@pytest.mark.parametrize("name", OPTIMIZERS)
def test_runs_are_reproducible(name):
    fed, spec = ls_fed()
    opt = OPTIMIZERS[name](spec.dim)
    rc = RoundConfig(participants=3, batch_size=2)
    _, h1 = simulate(np.zeros(spec.dim), opt, fed, spec, rc, 8, seed=11)
    _, h2 = simulate(np.zeros(spec.dim), opt, fed, spec, rc, 8, seed=11)
    assert metrics_csv(h1) == metrics_csv(h2)
    _, h3 = simulate(np.zeros(spec.dim), opt, fed, spec, rc, 8, seed=12)
    assert metrics_csv(h1) != metrics_csv(h3)


def test_upload_bytes_closed_form():
    fed, spec = ls_fed(C=6, f=8)
    d, T, W = spec.dim, 5, 3
    sk = SketchConfig(3, 16, d, 0)
    state, hist = simulate(np.zeros(d), FetchConfig(eta=0.1, k=2, sketch=sk), fed, spec, RoundConfig(W), T, 0)
    assert state.bytes_up == T * W * 4 * 3 * 16
    assert all(m.bytes_up == W * 4 * 3 * 16 for m in hist)

    state, hist = simulate(np.zeros(d), FedAvgConfig(local_batch=5), fed, spec, RoundConfig(W), T, 0)
    assert state.bytes_up == T * W * 4 * d
    assert state.bytes_down == T * W * 4 * d

    state, hist = simulate(np.zeros(d), LocalTopKConfig(k=3), fed, spec, RoundConfig(W), T, 0)
    assert state.bytes_up == T * W * 4 * 3
    state, hist = simulate(
        np.zeros(d), LocalTopKConfig(k=3), fed, spec, RoundConfig(W, sparse_encoding="index_value"), T, 0
    )
    assert state.bytes_up == T * W * 8 * 3


def test_last_sync_download_counts_changed_coordinates():
    fed, spec = ls_fed(C=2, f=8)
    opt = LocalTopKConfig(k=1)
    rc = RoundConfig(participants=2)
    state = init_state(np.zeros(spec.dim), opt, 2)
    state, m1 = run_round(state, opt, fed, spec, rc, seed=0)
    assert m1.bytes_down == 0  # initial weights are shared
    state, m2 = run_round(state, opt, fed, spec, rc, seed=0)
    # both clients fetch exactly the coordinates round 1 changed
    assert m2.bytes_down == 2 * 4 * m1.update_nnz
    dense = RoundConfig(participants=2, download="dense")
    state, m3 = run_round(state, opt, fed, spec, dense, seed=0)
    assert m3.bytes_down == 2 * 4 * spec.dim


def test_metrics_csv_format():
    fed, spec = ls_fed()
    _, hist = simulate(np.zeros(spec.dim), LocalTopKConfig(k=2), fed, spec, RoundConfig(2), 3, 0)
    text = metrics_csv(hist)
    lines = text.split("\n")
    assert lines[0] == "round,train_loss,grad_norm_sq,bytes_up,bytes_down,update_nnz"
    assert text.endswith("\n") and "\r" not in text
    assert len(lines) == 5
    first = lines[1].split(",")
    assert first[0] == "1"
    assert float(first[1]) == pytest.approx(hist[0].train_loss, rel=1e-8)
    assert metrics_csv([]) == "round,train_loss,grad_norm_sq,bytes_up,bytes_down,update_nnz\n"


def test_round_config_validation():
    for kwargs in ({"participants": 0}, {"participants": 1, "weighting": "x"}, {"participants": 1, "download": "x"}):
        with pytest.raises(ParameterError):
            RoundConfig(**kwargs)


def test_make_blobs_balanced():
    X, y = make_blobs(100, 5, 10, np.random.default_rng(0))
    assert X.shape == (100, 5)
    assert np.all(np.bincount(y) == 10)
