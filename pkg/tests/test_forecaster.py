"""Forecaster tests: feature extraction, backprop correctness, training
convergence, recursive rollout and model serialization."""

from datetime import datetime

import numpy as np
import pytest

from evhome import data_io, forecaster
from evhome.data_io import HourlySeries, LoadDataset
from evhome.errors import DomainError, ValidationError
from evhome.forecaster import (FeatureVector, TrainingConfig, _backward,
                               _forward, _init_weights, extract_features,
                               load_model, predict_horizon, predict_one,
                               save_model, train)


def constant_dataset(days=10, value=0.9, n_series=2):
    return data_io.generate_synthetic_load(
        "constant", {"days": days, "mean_kwh": value, "n_series": n_series},
        rng_seed=1)


class TestExtractFeatures:
    def test_constant_series_lags(self):
        series = constant_dataset().test_series()
        feats = extract_features(series, 23)
        assert np.all(feats.lag_sequence == 0.9)

    def test_insufficient_history(self):
        series = constant_dataset().test_series()
        with pytest.raises(DomainError):
            extract_features(series, 22)

    def test_midnight_new_year_wrap(self):
        # lag window ending at Jan 1 00:00 reaches back into Dec 31
        series = HourlySeries(datetime(2021, 12, 31, 1), np.zeros(48))
        feats = extract_features(series, 23)  # index 23 = Jan 1 00:00
        assert feats.hour_of_day[0] == 1.0
        assert feats.hour_of_day[-1] == 0.0
        assert feats.day_of_year[0] == 365.0
        assert feats.day_of_year[-1] == 1.0

    def test_periodic_series_only_calendar_differs(self):
        values = np.tile(np.arange(24, dtype=float), 5)
        series = HourlySeries(datetime(2022, 3, 1), values)
        f1 = extract_features(series, 40)
        f2 = extract_features(series, 64)
        assert np.array_equal(f1.lag_sequence, f2.lag_sequence)
        assert not np.array_equal(f1.day_of_year, f2.day_of_year)

    def test_feature_vector_validation(self):
        with pytest.raises(DomainError):
            FeatureVector(np.full(24, -1.0), np.ones(24), np.zeros(24),
                          np.zeros(24))
        with pytest.raises(DomainError):
            FeatureVector(np.ones(23), np.ones(23), np.zeros(23), np.zeros(23))


class TestBackprop:
    def test_gradients_match_finite_differences(self):
        # the from-scratch backward pass is verified against central
        # differences on a miniature network
        rng = np.random.default_rng(0)
        cfg = TrainingConfig(hidden_units=5, dense_units=(7, 4), rng_seed=0)
        weights = _init_weights(cfg, rng)
        bsz = 3
        x_seq = rng.random((bsz, 24))
        ctx = rng.random((bsz, 72))
        target = rng.random(bsz)

        y, caches = _forward(weights, 5, x_seq, ctx, keep_cache=True)
        grads = _backward(weights, 5, x_seq, y, target, caches)

        def loss(w):
            yy = _forward(w, 5, x_seq, ctx)
            return float(np.mean((yy - target) ** 2))

        h = 1e-6
        for name in weights:
            g = grads[name]
            flat_idx = [0, g.size // 2, g.size - 1] if g.size > 2 else [0]
            for k in flat_idx:
                wp = {n: v.copy() for n, v in weights.items()}
                wm = {n: v.copy() for n, v in weights.items()}
                wp[name].flat[k] += h
                wm[name].flat[k] -= h
                fd = (loss(wp) - loss(wm)) / (2 * h)
                assert fd == pytest.approx(g.flat[k], rel=1e-4, abs=1e-8), \
                    f"{name}[{k}]"


class TestTraining:
    def test_loss_decreases(self):
        ds = data_io.generate_synthetic_load(
            "sinusoid", {"days": 30}, rng_seed=2)
        model = train(ds, TrainingConfig(epochs=5, rng_seed=3))
        assert model.epoch_losses[-1] < model.epoch_losses[0]

    def test_deterministic_given_seed(self):
        ds = constant_dataset(days=5)
        cfg = TrainingConfig(epochs=2, rng_seed=9)
        m1 = train(ds, cfg)
        m2 = train(ds, cfg)
        for k in m1.weights:
            assert np.array_equal(m1.weights[k], m2.weights[k]), k

    def test_constant_series_prediction(self):
        ds = constant_dataset(days=20, value=0.9)
        model = train(ds, TrainingConfig(epochs=10, rng_seed=4))
        feats = extract_features(ds.test_series(), 30)
        assert predict_one(model, feats) == pytest.approx(0.9, rel=0.05)

    def test_no_leakage_normalization_from_train_only(self):
        train_a = HourlySeries(datetime(2022, 1, 1), np.full(26, 1.0))
        train_b = HourlySeries(datetime(2022, 1, 1), np.full(26, 2.0))
        test = HourlySeries(datetime(2022, 1, 1), np.full(26, 50.0))
        ds = LoadDataset(names=["a", "b", "t"], series=[train_a, train_b, test])
        model = train(ds, TrainingConfig(epochs=1, rng_seed=0))
        lo, hi = model.norm["load"]
        assert hi <= 2.0  # the 50 kWh test values never entered the scaler


@pytest.fixture(scope="module")
def constant_model():
    ds = constant_dataset(days=20, value=0.9)
    return train(ds, TrainingConfig(epochs=10, rng_seed=4)), ds


class TestPrediction:

    def test_clamps_negative_output(self, constant_model):
        model, ds = constant_model
        crippled = forecaster.ForecastModel(
            weights={**{k: v.copy() for k, v in model.weights.items()},
                     "b3": np.array([-100.0])},
            norm=model.norm, hidden_units=model.hidden_units,
            dense_units=model.dense_units)
        feats = extract_features(ds.test_series(), 30)
        assert predict_one(crippled, feats) == 0.0

    def test_prediction_finite(self, constant_model):
        model, ds = constant_model
        feats = extract_features(ds.test_series(), 30)
        assert np.isfinite(predict_one(model, feats))

    def test_horizon_one_equals_predict_one(self, constant_model):
        model, ds = constant_model
        series = ds.test_series()
        one = predict_one(model, extract_features(series, 40))
        roll = predict_horizon(model, series, 40, 1)
        assert roll[0] == pytest.approx(one, abs=0.0)

    def test_rollout_prefix_consistency(self, constant_model):
        model, ds = constant_model
        series = ds.test_series()
        long = predict_horizon(model, series, 40, 8)
        short = predict_horizon(model, series, 40, 3)
        assert np.array_equal(long[:3], short)

    def test_constant_rollout_drift_small(self, constant_model):
        model, ds = constant_model
        roll = predict_horizon(model, ds.test_series(), 40, 12)
        assert np.all(np.abs(roll - 0.9) < 0.09)  # < 10% drift

    def test_bad_horizon(self, constant_model):
        model, ds = constant_model
        with pytest.raises(DomainError):
            predict_horizon(model, ds.test_series(), 40, 0)


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        ds = constant_dataset(days=5)
        model = train(ds, TrainingConfig(epochs=1, rng_seed=6))
        path = tmp_path / "model.npz"
        save_model(model, path)
        loaded = load_model(path)
        feats = extract_features(ds.test_series(), 30)
        assert predict_one(loaded, feats) == predict_one(model, feats)
        assert loaded.epoch_losses == model.epoch_losses

    def test_shape_validation_on_load(self, tmp_path):
        ds = constant_dataset(days=5)
        model = train(ds, TrainingConfig(epochs=1, rng_seed=6))
        model.weights["w2"] = model.weights["w2"][:, :-1]
        path = tmp_path / "model.npz"
        with pytest.raises(ValidationError):
            forecaster.ForecastModel(
                weights=model.weights, norm=model.norm,
                hidden_units=model.hidden_units,
                dense_units=model.dense_units)

    def test_not_a_model_file(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, a=np.ones(3))
        with pytest.raises(ValidationError):
            load_model(path)


class TestTrainingConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(DomainError):
            TrainingConfig(batch_size=0)
        with pytest.raises(DomainError):
            TrainingConfig(optimizer_kind="sgd")


class TestNormalization:
    def test_round_trip_identity(self):
        rng = np.random.default_rng(8)
        values = rng.uniform(0.0, 5.0, 200)
        lo, hi = 0.1, 4.7
        back = forecaster.denormalize(forecaster.normalize(values, lo, hi),
                                      lo, hi)
        assert np.max(np.abs(back - values)) <= 1e-9
