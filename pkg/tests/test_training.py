import numpy as np
import pytest

from envtrack import dataio, model, synthgen, training
from envtrack.model import NetworkConfig
from envtrack.training import AdamState, TrainConfig

NET = NetworkConfig(window_samples=128, eeg_channels=8, conv_filters=4, dense1_units=8,
                    embed_dim=8, lstm_hidden=8, seed=0)
FAST = TrainConfig(max_epochs=3, batch_size=32, learning_rate=3e-3)


def small_subject(k, minutes=2.0, snr=float("inf")):
    rec = synthgen.synth_subjects(synthgen.SynthConfig(minutes=minutes, snr_db=snr, seed=40 + k))[0]
    rec = dataio.Recording(f"S{k}", f"S{k}-R01", rec.eeg[:8], rec.envelope).normalized()
    return dataio.build_dataset([rec], window_s=2.0, rng=k)


@pytest.fixture(scope="module")
def subjects():
    return {f"S{k}": small_subject(k) for k in range(3)}


def test_config_validation():
    for bad in ({"max_epochs": 0}, {"patience": -1}, {"learning_rate": -1e-3},
                {"batch_size": 0}, {"scenario": "XX"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    TrainConfig(learning_rate=0.0).validate()


def test_adam_step_matches_formula():
    cfg = TrainConfig(learning_rate=0.1)
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.25])}
    out, state = training.adam_step(p, g, AdamState(), cfg)
    # after one step the bias-corrected update is lr * sign(g) (up to eps)
    np.testing.assert_allclose(out["w"], p["w"] - 0.1 * np.sign(g["w"]), atol=1e-7)
    assert state.step == 1
    out2, state2 = training.adam_step(out, g, state, cfg)
    m = 0.9 * state.m["w"] + 0.1 * g["w"]
    v = 0.999 * state.v["w"] + 0.001 * g["w"] ** 2
    expected = out["w"] - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(out2["w"], expected)


def test_adam_passes_through_missing_gradients():
    p = {"a": np.ones(2), "b": np.ones(3)}
    out, _ = training.adam_step(p, {"a": np.ones(2)}, AdamState(), TrainConfig())
    assert out["b"] is p["b"]
    with pytest.raises(ValueError, match="shape"):
        training.adam_step(p, {"a": np.ones(3)}, AdamState(), TrainConfig())


def test_training_learns_noiseless_subject(subjects):
    data = subjects["S0"]
    init = model.build_network(NET)
    before = training.evaluate_loss(init, NET, data, data.pairs("val"))[0]
    params, hist = training.train(init, data, FAST, NET)
    assert len(hist.val_loss) <= FAST.max_epochs
    assert 0 <= hist.best_epoch < len(hist.val_loss)
    assert min(hist.val_loss) < before
    assert hist.val_loss[hist.best_epoch] == min(hist.val_loss)
    assert training.evaluate_loss(params, NET, data, data.pairs("val"))[0] == pytest.approx(
        min(hist.val_loss), rel=1e-12)


def test_training_deterministic(subjects):
    a, ha = training.train(model.build_network(NET), subjects["S1"], FAST, NET)
    b, hb = training.train(model.build_network(NET), subjects["S1"], FAST, NET)
    assert ha.val_loss == hb.val_loss
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_zero_learning_rate_is_identity(subjects):
    init = model.build_network(NET)
    out, _ = training.train(init, subjects["S0"], TrainConfig(max_epochs=1, learning_rate=0.0), NET)
    assert all(out[k].tobytes() == init[k].tobytes() for k in init)


def test_early_stopping_flag(subjects):
    cfg = TrainConfig(max_epochs=30, patience=0, learning_rate=0.05, batch_size=16)
    _, hist = training.train(model.build_network(NET), subjects["S2"], cfg, NET)
    if len(hist.val_loss) < 30:
        assert hist.stopped_early
        assert len(hist.val_loss) == hist.best_epoch + 2


def test_history_csv(tmp_path, subjects):
    _, hist = training.train(model.build_network(NET), subjects["S0"],
                             TrainConfig(max_epochs=2, batch_size=64), NET)
    hist.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_acc"
    assert len(lines) == 1 + len(hist.val_loss)


def test_transfer_freezes_envelope_path(subjects):
    si, _ = training.train(model.build_network(NET), subjects["S0"], FAST, NET)
    tl, _ = training.transfer_finetune(si, subjects["S1"], FAST, NET)
    for name in si:
        if model.path_of(name) == "env":
            assert tl[name].tobytes() == si[name].tobytes(), name
    assert any(tl[k].tobytes() != si[k].tobytes() for k in si if model.path_of(k) == "eeg")


def test_transfer_needs_single_subject(subjects):
    merged = dataio.Dataset.merge(list(subjects.values()))
    with pytest.raises(ValueError, match="one subject"):
        training.transfer_finetune(model.build_network(NET), merged, FAST, NET)


def test_empty_splits_rejected():
    empty = dataio.Dataset({}, 128, {s: [] for s in dataio.SPLITS})
    with pytest.raises(ValueError):
        training.train(model.build_network(NET), empty, FAST, NET)


def test_worker_count(monkeypatch):
    monkeypatch.setenv("ENVTRACK_THREADS", "1")
    assert training.worker_count() == 1
    monkeypatch.setenv("ENVTRACK_THREADS", "10000")
    assert training.worker_count() >= 1
    monkeypatch.setenv("ENVTRACK_THREADS", "many")
    with pytest.raises(ValueError):
        training.worker_count()


@pytest.mark.parametrize("scenario", ["SD", "SI", "TL"])
def test_run_scenario_reports_every_subject(subjects, scenario, monkeypatch):
    monkeypatch.setenv("ENVTRACK_THREADS", "1")
    cfg = TrainConfig(max_epochs=1, batch_size=64)
    res = training.run_scenario(scenario, subjects, NET, cfg)
    assert [r.subject_id for r in res.report.rows] == sorted(subjects)
    assert all(r.n_segments == len(subjects[r.subject_id].pairs("test")) for r in res.report.rows)


def test_run_scenario_holdout_and_errors(subjects):
    cfg = TrainConfig(max_epochs=1, batch_size=64)
    res = training.run_scenario("SI", subjects, NET, cfg, holdout=["S2"])
    assert len(res.report.rows) == 3
    with pytest.raises(ValueError, match="holdout"):
        training.run_scenario("SI", subjects, NET, cfg, holdout=["S9"])
    with pytest.raises(ValueError, match="scenario"):
        training.run_scenario("XY", subjects, NET, cfg)
    with pytest.raises(ValueError, match="holds subjects"):
        training.run_scenario("SI", {"S0": subjects["S1"]}, NET, cfg)


def test_parallel_matches_serial(subjects, monkeypatch):
    cfg = TrainConfig(max_epochs=1, batch_size=64)
    monkeypatch.setenv("ENVTRACK_THREADS", "1")
    serial = training.run_scenario("SD", subjects, NET, cfg)
    monkeypatch.setattr(training, "worker_count", lambda: 2)
    parallel = training.run_scenario("SD", subjects, NET, cfg)
    assert serial.report == parallel.report
    for sid in subjects:
        assert all(serial.params[sid][k].tobytes() == parallel.params[sid][k].tobytes()
                   for k in serial.params[sid])
