import json

import numpy as np
import pytest

from nnmrom import autoencoder as ae
from nnmrom import lstm, rom
from nnmrom.errors import ContractViolation, MissingArtifactError
from nnmrom.simulation import ForcingSignal, Trajectory, integrate_rk4, make_filtered_noise
from nnmrom.systems import SystemState, chain_system, linear_spring_force

AE_CFG = ae.AeConfig(lr=5e-3, max_epochs=300, patience=50, batch_size=64)
LSTM_CFG = lstm.LstmConfig(cells=(6,), lookback=10, epochs=150, lr=5e-3, segment_length=200, residual=True)


def small_system(k_cubic=500.0):
    return chain_system(4, 0.1, 100.0, 0.5, k_cubic, force_map=[3])


def simulate(sys, steps, seed, variance=4.0):
    f = make_filtered_noise(1, steps, 0.01, 5.0, variance, seed)
    return integrate_rk4(sys, SystemState(np.zeros(4), np.zeros(4)), f)


@pytest.fixture(scope="module")
def data():
    sys = small_system()
    full = simulate(sys, 1200, seed=1)
    return sys, full.window(0, 1000), full.window(1000, 1200)


@pytest.fixture(scope="module")
def model(data):
    _, train, _ = data
    return rom.build_rom([train], 2, AE_CFG, LSTM_CFG)


def trajectory(U, dt=0.01):
    U = np.atleast_2d(U)
    return Trajectory(dt, U, ForcingSignal(dt, np.zeros((1, U.shape[1]))))


# ---------------------------------------------------------------- evaluate


def test_identical_gives_zero():
    U = np.random.default_rng(0).standard_normal((3, 50))
    r = rom.evaluate(trajectory(U), trajectory(U))
    assert r.mean_mse == 0.0 and r.nmse == 0.0


def test_zero_prediction_gives_one():
    U = np.random.default_rng(1).standard_normal((3, 50))
    assert rom.nmse(np.zeros_like(U), U) == pytest.approx(1.0, rel=1e-14)


def test_evaluate_matches_two_loop_oracle():
    rng = np.random.default_rng(2)
    P, T = rng.standard_normal((5, 80)), 3 * rng.standard_normal((5, 80))
    mse, power = np.zeros(5), np.zeros(5)
    for i in range(5):
        for j in range(80):
            mse[i] += (P[i, j] - T[i, j]) ** 2 / 80
            power[i] += T[i, j] ** 2 / 80
    r = rom.evaluate(P, T)
    np.testing.assert_allclose(r.per_dof_mse, mse, rtol=1e-12)
    assert r.mean_mse == pytest.approx(mse.mean(), rel=1e-12)
    assert r.nmse == pytest.approx(mse.mean() / power.mean(), rel=1e-12)


def test_evaluate_contracts():
    with pytest.raises(ContractViolation):
        rom.evaluate(np.zeros((2, 5)), np.zeros((2, 6)))
    with pytest.raises(ContractViolation):
        rom.evaluate(np.ones((2, 5)), np.zeros((2, 5)))
    with pytest.raises(ContractViolation):
        rom.EvalReport(np.zeros(2), np.ones(2), np.zeros(3))


def test_report_outputs(tmp_path):
    r = rom.EvalReport(np.array([0.1, 0.3]), np.array([1.0, 1.0]), np.array([0.2, 0.25]))
    r.write_json(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["nmse"] == pytest.approx(0.2) and d["n_dof"] == 2
    r.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "dof,mse,signal_power,nonlinearity_ratio" and len(lines) == 3
    assert float(lines[2].split(",")[1]) == 0.3


# ---------------------------------------------------------------- nonlinearity ratio


def test_ratio_zero_for_linear_system(data):
    _, train, _ = data
    sys = chain_system(4, 0.1, 100.0, 0.5, force_map=[3])
    np.testing.assert_array_equal(rom.rms_nonlinearity_ratio(sys, train), 0.0)


def test_ratio_linear_in_cubic_stiffness(data):
    _, train, _ = data
    a = rom.rms_nonlinearity_ratio(small_system(500.0), train)
    b = rom.rms_nonlinearity_ratio(small_system(1000.0), train)
    np.testing.assert_allclose(b, 2 * a, rtol=1e-12)
    assert np.all(a > 0)


def test_ratio_matches_direct_computation(data):
    sys, train, _ = data
    U = train.displacements
    ext = np.vstack([np.zeros((1, U.shape[1])), U, np.zeros((1, U.shape[1]))])
    d = np.diff(ext, axis=0)  # elongations of the 5 connections, wall to wall
    cubic = 500.0 * d**3
    f_nl = cubic[1:] - cubic[:-1]
    f_l = 100.0 * (d[1:] - d[:-1])
    expected = np.sqrt(np.mean(f_nl**2, axis=1)) / np.sqrt(np.mean(f_l**2, axis=1))
    np.testing.assert_allclose(rom.rms_nonlinearity_ratio(sys, train), expected, rtol=1e-10)
    np.testing.assert_allclose(np.abs(linear_spring_force(sys, U)), np.abs(f_l), rtol=1e-10)


def test_ratio_contracts(data):
    sys, train, _ = data
    with pytest.raises(ContractViolation):
        rom.rms_nonlinearity_ratio(chain_system(3, 0.1, 100.0), train)
    with pytest.raises(ContractViolation):
        rom.rms_nonlinearity_ratio(sys, trajectory(np.zeros((4, 10))))


# ---------------------------------------------------------------- pipeline


def test_rom_shapes_and_provenance(model, data):
    _, train, test = data
    assert model.n_dof == 4 and model.n_forcing == 1 and model.regressor.latent_dim == 2
    assert set(model.provenance) >= {"ae_config", "lstm_config", "ae_seed", "lstm_seed", "train_data"}
    pred = rom.rom_predict(model, test.forcing, prefix=train)
    assert pred.displacements.shape == test.displacements.shape
    assert np.all(np.isfinite(pred.displacements))


def test_rom_error_floor(model, data):
    # the decoder can do no better than decoding the true latents
    _, train, test = data
    for prefix, truth in ((train, test), (None, train)):
        forcing = truth.forcing
        pred = rom.rom_predict(model, forcing, prefix=prefix)
        floor = rom.nmse(ae.reconstruct(model.autoencoder, truth.displacements), truth)
        assert rom.nmse(pred, truth) >= floor


def test_zero_forcing_from_rest(model, data):
    _, train, _ = data
    pred = rom.rom_predict(model, ForcingSignal(0.01, np.zeros((1, 300))))
    rest = ae.decode(model.autoencoder, model.regressor.rest_latent[:, None])
    drift = np.max(np.abs(pred.displacements - rest))
    assert drift < 0.1 * np.max(np.abs(train.displacements))


def test_continue_mode_options(model, data):
    _, train, test = data
    base = rom.predict_latents(model, test.forcing, prefix=train)
    assert base.shape == (2, test.steps)
    rest = rom.predict_latents(model, test.forcing, prefix=train, seed_latent="rest")
    assert not np.array_equal(base, rest)
    whole = rom.predict_latents(model, test.forcing, prefix=train.window(0, 10), warmup=10)
    assert np.all(np.isfinite(whole))
    with pytest.raises(ContractViolation):
        rom.predict_latents(model, test.forcing, prefix=train.window(0, 5), warmup=10)
    with pytest.raises(ContractViolation):
        rom.predict_latents(model, test.forcing, prefix=train, seed_latent="zero")
    with pytest.raises(ContractViolation):
        rom.predict_latents(model, np.zeros((2, 5)))


def test_pipeline_determinism(model, data):
    _, train, test = data
    again = rom.build_rom([train], 2, AE_CFG, LSTM_CFG)
    a = rom.evaluate(rom.rom_predict(model, test.forcing, prefix=train), test)
    b = rom.evaluate(rom.rom_predict(again, test.forcing, prefix=train), test)
    assert a.to_json() == b.to_json()
    assert again.provenance == model.provenance


def test_build_rom_contracts(data, model):
    _, train, _ = data
    with pytest.raises(ContractViolation):
        rom.build_rom([], 2)
    other = trajectory(np.zeros((3, 50)))
    with pytest.raises(ContractViolation):
        rom.build_rom([train, other], 2)
    with pytest.raises(ContractViolation):
        rom.build_rom([train], 3, autoencoder=model.autoencoder)
    with pytest.raises(ContractViolation):
        rom.RomModel(model.autoencoder, lstm.build_regressor(1, 3))


def test_pretrained_autoencoder_reused(data, model):
    _, train, _ = data
    cfg = lstm.LstmConfig(cells=(4,), lookback=10, epochs=1, segment_length=200)
    r = rom.build_rom([train], 2, lstm_config=cfg, autoencoder=model.autoencoder)
    assert r.autoencoder is model.autoencoder


def test_save_load(tmp_path, model, data):
    _, train, test = data
    paths = model.save(tmp_path / "m")
    assert [p.name for p in paths] == ["autoencoder.nnm", "regressor.nnm", "rom.json"]
    back = rom.RomModel.load(tmp_path / "m")
    a = rom.rom_predict(model, test.forcing, prefix=train).displacements
    b = rom.rom_predict(back, test.forcing, prefix=train).displacements
    np.testing.assert_array_equal(a, b)
    assert back.provenance == model.provenance
    with pytest.raises(MissingArtifactError):
        rom.RomModel.load(tmp_path / "missing")


def test_digests_sensitive():
    x = np.arange(6.0)
    assert rom.digest_arrays(x) == rom.digest_arrays(x.copy())
    assert rom.digest_arrays(x) != rom.digest_arrays(x.reshape(2, 3))
    assert rom.config_digest(LSTM_CFG) != rom.config_digest(lstm.LstmConfig())


# ---------------------------------------------------------------- interpretation


def test_interpretation_export(tmp_path, data):
    _, train, test = data
    cfg = ae.AeConfig(lr=1e-2, max_epochs=400, patience=100)
    sweep = ae.bottleneck_sweep(4, [train], [test], [1, 4], restarts=1, config=cfg, activation="linear")
    rows = rom.interpretation_export(sweep, train, [1, 4], [0, 3], [(0.0, 1.0), (5.0, 6.0)], tmp_path / "i.csv")
    assert len(rows) == 2 * 2 * 2 * 100
    lines = (tmp_path / "i.csv").read_text().splitlines()
    assert lines[0] == "size,window_start,window_stop,t,dof,truth,reconstructed" and len(lines) == len(rows) + 1
    ts = sorted({r[3] for r in rows if r[1] == 5.0})
    assert ts[0] == pytest.approx(5.0) and ts[-1] == pytest.approx(5.99)
    # the full-size reconstruction overlays the truth within the full-rank AE error
    full = np.array([(r[5], r[6]) for r in rows if r[0] == 4])
    limit = ae.normalized_mse(sweep.model(4), train.displacements) * np.max(train.displacements.std(axis=1)) ** 2
    assert np.mean((full[:, 0] - full[:, 1]) ** 2) <= 10 * limit + 1e-12
    with pytest.raises(MissingArtifactError):
        rom.interpretation_export(sweep, train, [2], [0], [(0.0, 1.0)])
    with pytest.raises(ContractViolation):
        rom.interpretation_export(sweep, train, [1], [4], [(0.0, 1.0)])
