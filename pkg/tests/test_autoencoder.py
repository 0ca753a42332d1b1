import numpy as np
import pytest

from nnmrom import autoencoder as ae
from nnmrom import nn
from nnmrom.errors import ContractViolation, MissingArtifactError

FAST = ae.AeConfig(lr=1e-2, max_epochs=3000, patience=300, batch_size=64)


def low_rank(n, k, T, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, k)) @ rng.standard_normal((k, T))


def ae_grads(model, X):
    def f():
        return ae._batch_loss_grads(model, X)

    return f


@pytest.mark.parametrize("n,k", [(20, 8), (20, 9), (108, 6)])
def test_five_layer_topology(n, k):
    m = ae.build_paper_ae(n, k)
    dims = [m.encoder[0].n_in] + [l.n_out for l in m.layers]
    assert dims == [n, n, k, n, n]
    assert [l.activation for l in m.layers] == ["tanh", "tanh", "tanh", "linear"]
    assert m.bottleneck_dim == k and m.n_dof == n


def test_invalid_bottleneck():
    for k in (0, 21):
        with pytest.raises(ContractViolation):
            ae.build_paper_ae(20, k)


def test_model_invariants():
    m = ae.build_paper_ae(4, 2)
    with pytest.raises(ContractViolation):
        ae.AutoencoderModel(m.encoder, m.decoder, np.zeros(4), np.array([1.0, 0.0, 1.0, 1.0]))
    with pytest.raises(ContractViolation):
        ae.AutoencoderModel(m.encoder, m.decoder[1:], np.zeros(4), np.ones(4))


def test_grad_check_ae_stack():
    rng = np.random.default_rng(1)
    m = ae.build_paper_ae(6, 3, seed=2)
    X = rng.standard_normal((6, 15))
    assert nn.grad_check(ae_grads(m, X), m.params()) < 1e-5


def test_normalization_round_trip():
    rng = np.random.default_rng(2)
    m = ae.build_paper_ae(5, 2)
    m.mean, m.std = rng.standard_normal(5), rng.uniform(0.1, 3, 5)
    X = rng.standard_normal((5, 40))
    np.testing.assert_allclose(m.denormalize(m.normalize(X)), X, rtol=1e-12, atol=1e-12)


def test_subspace_recovered_with_linear_activations():
    X = low_rank(6, 2, 600)
    for k in (2, 3):
        m, _ = ae.train_ae(ae.build_paper_ae(6, k, seed=1, activation="linear"), X, FAST)
        assert ae.normalized_mse(m, X) < 1e-6


def test_full_bottleneck_is_identity():
    X = np.random.default_rng(3).standard_normal((6, 600))
    m, _ = ae.train_ae(ae.build_paper_ae(6, 6, seed=1, activation="linear"), X, FAST)
    assert ae.normalized_mse(m, X) < 1e-8


def test_linear_ae_matches_pca():
    # noisy rank-3 data: the linear AE optimum is the PCA subspace
    rng = np.random.default_rng(4)
    X = low_rank(8, 3, 800, seed=4) + 0.3 * rng.standard_normal((8, 800))
    cfg = ae.AeConfig(lr=1e-2, max_epochs=2000, patience=200, batch_size=64, val_fraction=0.0)
    for k in (1, 2, 3):
        best = min(
            ae.normalized_mse(ae.train_ae(ae.build_paper_ae(8, k, seed=s, activation="linear"), X, cfg)[0], X)
            for s in range(3)
        )
        m = ae.build_paper_ae(8, k, activation="linear")
        m, _ = ae.train_ae(m, X, ae.AeConfig(max_epochs=1))
        pca = ae.pca_reconstruction_mse(m.normalize(X), k)
        assert best <= 1.05 * pca
        assert best >= pca * (1 - 1e-6)


def test_pca_oracle():
    # direct eigen-decomposition of the covariance as an independent oracle
    rng = np.random.default_rng(5)
    X = rng.standard_normal((5, 300)) * np.arange(1, 6)[:, None]
    mu = X.mean(axis=1, keepdims=True)
    w, V = np.linalg.eigh(np.cov(X, bias=True))
    for k in range(1, 6):
        P = V[:, ::-1][:, :k]
        R = mu + P @ P.T @ (X - mu)
        assert ae.pca_reconstruction_mse(X, k) == pytest.approx(np.mean((R - X) ** 2), rel=1e-9, abs=1e-20)


def test_training_normalizes_and_restores_best():
    X = low_rank(5, 2, 300) * 40 + 7
    m, hist = ae.train_ae(ae.build_paper_ae(5, 2, seed=0), X, ae.AeConfig(max_epochs=30))
    np.testing.assert_allclose(m.mean, X.mean(axis=1))
    np.testing.assert_allclose(m.std, X.std(axis=1))
    assert len(hist.train) == len(hist.val) <= 30
    assert 0 <= hist.best_epoch < len(hist.train)
    assert np.all(np.diff(hist.smoothed) <= 0)
    # the restored parameters are the ones that scored best on validation
    assert hist.val[hist.best_epoch] == pytest.approx(min(hist.val))


def test_encode_decode_contracts():
    X = low_rank(5, 2, 200)
    m, _ = ae.train_ae(ae.build_paper_ae(5, 2, seed=0), X, ae.AeConfig(max_epochs=20))
    Z = ae.encode(m, X)
    assert Z.shape == (2, 200)
    assert np.all(np.abs(Z) < 1)
    assert ae.encode(m, X).tobytes() == Z.tobytes()
    np.testing.assert_array_equal(ae.reconstruct(m, X), ae.decode(m, Z))
    with pytest.raises(ContractViolation):
        ae.encode(m, X[:4])
    with pytest.raises(ContractViolation):
        ae.decode(m, Z[:1])


def test_round_trip_bounded_by_training_loss():
    X = low_rank(6, 3, 400, seed=6) + 0.1 * np.random.default_rng(6).standard_normal((6, 400))
    cfg = ae.AeConfig(max_epochs=200, val_fraction=0.0)
    m, hist = ae.train_ae(ae.build_paper_ae(6, 2, seed=0), X, cfg)
    # full-data reconstruction after the last update vs the running average
    # over the final epoch's mini-batches
    assert ae.normalized_mse(m, X) <= hist.train[hist.best_epoch] * 1.05


def test_determinism():
    X = low_rank(5, 2, 200)
    a, _ = ae.train_ae(ae.build_paper_ae(5, 2, seed=3), X, ae.AeConfig(max_epochs=10, seed=3))
    b, _ = ae.train_ae(ae.build_paper_ae(5, 2, seed=3), X, ae.AeConfig(max_epochs=10, seed=3))
    for p, q in zip(a.params(), b.params()):
        assert p.tobytes() == q.tobytes()


def test_fine_tune_keeps_scaling():
    X = low_rank(5, 2, 200) + 3
    m, _ = ae.train_ae(ae.build_paper_ae(5, 2, seed=0), X, ae.AeConfig(max_epochs=20))
    before = ae.normalized_mse(m, X)
    mean = m.mean.copy()
    m, _ = ae.fine_tune(m, X + 1.0, ae.AeConfig(max_epochs=5))
    np.testing.assert_array_equal(m.mean, mean)
    assert np.isfinite(before)


def test_pooling_multiple_trajectories():
    X1, X2 = low_rank(4, 1, 100, 1), low_rank(4, 1, 50, 2)
    assert ae._pool([X1, X2]).shape == (4, 150)
    with pytest.raises(ContractViolation):
        ae._pool([X1, X2[:3]])


def test_save_load(tmp_path):
    X = low_rank(5, 2, 200)
    m, _ = ae.train_ae(ae.build_paper_ae(5, 2, seed=0), X, ae.AeConfig(max_epochs=5))
    m.save(tmp_path / "a.nnm", meta={"note": 1})
    back = ae.AutoencoderModel.load(tmp_path / "a.nnm")
    np.testing.assert_array_equal(ae.reconstruct(back, X), ae.reconstruct(m, X))
    nn.save_container(tmp_path / "b.nnm", {"kind": "other"}, [])
    with pytest.raises(ContractViolation):
        ae.AutoencoderModel.load(tmp_path / "b.nnm")


def test_bottleneck_sweep_table(tmp_path):
    X = low_rank(6, 3, 400, seed=7) + 0.05 * np.random.default_rng(7).standard_normal((6, 400))
    train, test = X[:, :300], X[:, 300:]
    cfg = ae.AeConfig(lr=1e-2, max_epochs=1500, patience=200)
    res = ae.bottleneck_sweep(6, [train], [test], [1, 2, 3, 6], restarts=2, config=cfg, activation="linear")
    assert len(res.rows) == 8 and not res.errors
    assert sorted({r[1] for r in res.rows}) == [0, 1]
    best = res.best()
    assert list(best) == [1, 2, 3, 6]
    for a, b in zip([1, 2, 3], [2, 3, 6]):
        assert best[b] <= 1.05 * best[a]
    assert best[6] < 1e-4
    res.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "bottleneck,restart,train_mse,test_mse" and len(lines) == 9
    assert res.model(3).bottleneck_dim == 3
    with pytest.raises(MissingArtifactError):
        res.model(4)
    with pytest.raises(ContractViolation):
        ae.bottleneck_sweep(6, [train], [test], [], restarts=1)


def test_sweep_records_failures():
    X = low_rank(4, 1, 100)
    cfg = ae.AeConfig(max_epochs=2)
    res = ae.bottleneck_sweep(4, [X], [X], [1, 9], restarts=1, config=cfg)
    assert len(res.errors) == 1 and res.errors[0][0] == 9
    assert np.isnan(res.rows[-1][3])
    assert list(res.best()) == [1]
