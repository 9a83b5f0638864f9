import numpy as np
import pytest

from balancelab.collect import Episode
from balancelab.train import (
    TrainConfig, build_windows, evaluate_model, split_windows, train_model,
)


def toy_episode(label, seed, ticks=100, gain=0.8, offset=0.0):
    """Synthetic stable linear dynamics so training has something to learn."""
    rng = np.random.default_rng(seed)
    n_s = 4
    s = np.zeros((ticks, n_s))
    u = rng.uniform(-1, 1, size=(ticks, 1))
    x = np.zeros(n_s)
    drive = np.array([0.5, -0.3, 0.2, 0.4])
    for t in range(ticks):
        s[t] = x
        x = gain * x + drive * u[t, 0] + offset + rng.normal(0, 0.01, n_s)
    return Episode(label=label, policy="proposed", seed=seed,
                   states=s, controls=u, angles=np.zeros(ticks))


class TestBuildWindows:
    def test_counts(self):
        ep = toy_episode("a", 0, ticks=300)
        ws = build_windows([ep], window=10)
        assert len(ws) == 291  # 300 - 10 + 1

    def test_single_window(self):
        ep = toy_episode("a", 0, ticks=300)
        ws = build_windows([ep], window=300)
        assert len(ws) == 1

    def test_labels_partition_like_episodes(self):
        eps = [toy_episode("a", 0, ticks=50), toy_episode("b", 1, ticks=40)]
        ws = build_windows(eps, window=10)
        assert ws.labels == ["a", "b"]
        assert np.sum(ws.label_idx == 0) == 41
        assert np.sum(ws.label_idx == 1) == 31

    def test_short_episode_skipped_with_warning(self, caplog):
        eps = [toy_episode("a", 0, ticks=50), toy_episode("b", 1, ticks=5)]
        with caplog.at_level("WARNING"):
            ws = build_windows(eps, window=10)
        assert all(i == 0 for i in ws.label_idx)
        assert "skipped" in caplog.text

    def test_all_short_rejected(self):
        with pytest.raises(ValueError):
            build_windows([toy_episode("a", 0, ticks=5)], window=10)


class TestSplit:
    def test_validation_is_tail_block(self):
        ws = build_windows([toy_episode("a", 0, ticks=60)], window=10)
        train_ws, val_ws = split_windows(ws, 0.2)
        assert len(train_ws) + len(val_ws) == len(ws)
        # the held-out windows are the last ones of the episode
        assert train_ws.states[-1, 0, 0] != val_ws.states[-1, 0, 0]

    def test_zero_fraction_keeps_everything(self):
        ws = build_windows([toy_episode("a", 0, ticks=30)], window=10)
        train_ws, val_ws = split_windows(ws, 0.0)
        assert len(train_ws) == len(ws) and len(val_ws) == 0


def small_tc(**kw):
    base = dict(window=8, batch_size=32, epochs=12, lr=3e-3, val_fraction=0.1,
                seed=0, plateau_patience=50)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def trained():
    eps = [toy_episode("slow", 0, gain=0.7), toy_episode("fast", 1, gain=0.95)]
    model, history = train_model(eps, small_tc())
    return eps, model, history


class TestTrainModel:
    def test_one_pb_entry_per_label(self, trained):
        _, model, _ = trained
        assert model.pb_labels == ["slow", "fast"]
        assert model.pb.shape == (2, 2)

    def test_pb_initialized_at_zero(self):
        eps = [toy_episode("a", 0, ticks=40)]
        model, _ = train_model(eps, small_tc(epochs=0))
        np.testing.assert_array_equal(model.pb, np.zeros((1, 2)))

    def test_loss_decreases(self, trained):
        _, _, history = trained
        assert history[-1]["train_loss"] < history[0]["train_loss"]

    def test_pb_moves_during_training(self, trained):
        _, model, _ = trained
        assert np.linalg.norm(model.pb[0] - model.pb[1]) > 0.0

    def test_label_swap_swaps_pb(self):
        eps = [toy_episode("a", 0, gain=0.7), toy_episode("b", 1, gain=0.95)]
        model1, _ = train_model(eps, small_tc(epochs=4))

        swapped = [
            Episode("b", eps[0].policy, eps[0].seed, eps[0].states, eps[0].controls,
                    eps[0].angles),
            Episode("a", eps[1].policy, eps[1].seed, eps[1].states, eps[1].controls,
                    eps[1].angles),
        ]
        model2, _ = train_model(swapped, small_tc(epochs=4))
        np.testing.assert_allclose(model2.pb_for("b"), model1.pb_for("a"), atol=1e-12)
        np.testing.assert_allclose(model2.pb_for("a"), model1.pb_for("b"), atol=1e-12)

    def test_normalizer_fit_on_training_windows_only(self):
        ep = toy_episode("a", 0, ticks=60)
        tc = small_tc(epochs=0, val_fraction=0.25)
        model, _ = train_model([ep], tc)
        ws = build_windows([ep], tc.window)
        train_ws, _ = split_windows(ws, tc.val_fraction)
        expected = train_ws.states.reshape(-1, 4).mean(axis=0)
        np.testing.assert_allclose(model.normalizer.s_mean, expected, atol=1e-12)

    def test_deterministic_given_seed(self):
        eps = [toy_episode("a", 0), toy_episode("b", 1)]
        m1, h1 = train_model(eps, small_tc(epochs=3))
        m2, h2 = train_model(eps, small_tc(epochs=3))
        assert h1 == h2
        np.testing.assert_array_equal(m1.pb, m2.pb)
        for k, v in m1.params.items():
            np.testing.assert_array_equal(v, m2.params[k])

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_model([], small_tc())


class TestEvaluateModel:
    def test_perfect_model_on_constant_data(self):
        # constant data: the zero-init network + fitted normalizer predicts
        # the constant exactly
        s = np.tile(np.array([1.0, 2.0, 3.0, 4.0]), (40, 1))
        ep = Episode("c", "proposed", 0, s, np.zeros((40, 1)), np.zeros(40))
        model, _ = train_model([ep], small_tc(epochs=0, val_fraction=0.0))
        for arr in model.params.values():
            arr[...] = 0.0
        ws = build_windows([ep], 8)
        report = evaluate_model(model, ws)
        np.testing.assert_allclose(report["one_step_rmse"], 0.0, atol=1e-12)
        np.testing.assert_allclose(report["rollout_rmse"], 0.0, atol=1e-12)

    def test_zero_weight_model_rmse_equals_spread_about_mean(self):
        # predicting the training mean: RMSE_d = sqrt(mean((x_d - mu_d)^2))
        ep = toy_episode("a", 3, ticks=80)
        model, _ = train_model([ep], small_tc(epochs=0, val_fraction=0.0))
        for arr in model.params.values():
            arr[...] = 0.0
        ws = build_windows([ep], 8)
        report = evaluate_model(model, ws, horizon=6)
        mu = model.normalizer.s_mean
        expected = np.sqrt(np.mean((ws.states[:, 1:7] - mu) ** 2, axis=(0, 1)))
        np.testing.assert_allclose(report["rollout_rmse"], expected, atol=1e-10)

    def test_one_step_beats_rollout_on_trained_model(self):
        eps = [toy_episode("a", 0), toy_episode("b", 1)]
        model, _ = train_model(eps, small_tc(epochs=12))
        ws = build_windows(eps, 8)
        report = evaluate_model(model, ws)
        assert np.mean(report["one_step_rmse"]) <= np.mean(report["rollout_rmse"])

    def test_empty_set_rejected(self):
        eps = [toy_episode("a", 0)]
        model, _ = train_model(eps, small_tc(epochs=0))
        ws = build_windows(eps, 8)
        with pytest.raises(ValueError):
            evaluate_model(model, ws.subset(np.zeros(0, dtype=int)))
