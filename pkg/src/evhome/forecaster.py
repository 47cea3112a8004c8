"""Hybrid recurrent household-load forecaster.

A gated recurrent encoder reads the last 24 hourly loads; its final hidden
state is concatenated with 72 calendar-context values (day of year, day of
week, hour of day for each lag hour) and passed through two rectified dense
layers to a scalar next-hour estimate.  Multi-hour forecasts roll the net
recursively, feeding each prediction back into the lag window.

The cell, backpropagation through time and the adaptive-moment optimizer are
implemented directly on numpy arrays: the simulation engine issues on the
order of 1e5 single-sample predictions per simulated year, which rules out
framework dispatch overhead, and training must be bit-reproducible from the
configured seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import HourlySeries, LoadDataset
from .errors import DomainError, ValidationError

LAG_HOURS = 24
N_CONTEXT = 3 * LAG_HOURS

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureVector:
    """One forecasting input: 24 lagged loads plus calendar context."""

    lag_sequence: np.ndarray  # kWh, ordered t-23 .. t
    day_of_year: np.ndarray  # 1..365 per lag hour
    day_of_week: np.ndarray  # 0..6
    hour_of_day: np.ndarray  # 0..23

    def __post_init__(self):
        for name in ("lag_sequence", "day_of_year", "day_of_week", "hour_of_day"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if arr.shape != (LAG_HOURS,):
                raise DomainError(f"{name} must have length {LAG_HOURS}")
        if np.any(self.lag_sequence < 0):
            raise DomainError("lag loads must be nonnegative")
        if (np.any((self.day_of_year < 1) | (self.day_of_year > 365))
                or np.any((self.day_of_week < 0) | (self.day_of_week > 6))
                or np.any((self.hour_of_day < 0) | (self.hour_of_day > 23))):
            raise DomainError("calendar features out of range")

    @property
    def context(self) -> np.ndarray:
        """The 72 context values, grouped [day_of_year | day_of_week | hour]."""
        return np.concatenate([self.day_of_year, self.day_of_week,
                               self.hour_of_day])


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 8
    epochs: int = 75
    optimizer_kind: str = "adam"
    learning_rate: float = 1e-3
    loss: str = "mse"
    rng_seed: int = 0
    hidden_units: int = 50
    dense_units: tuple[int, int] = (64, 32)

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise DomainError("batch_size and epochs must be >= 1")
        if self.optimizer_kind != "adam" or self.loss != "mse":
            raise DomainError("only adam/mse training is supported")


@dataclass
class ForecastModel:
    """Trained weights, feature scaling and architecture metadata."""

    weights: dict[str, np.ndarray]
    norm: dict[str, tuple[float, float]]  # feature -> (min, max)
    hidden_units: int
    dense_units: tuple[int, int]
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        h = self.hidden_units
        d1, d2 = self.dense_units
        expected = {
            "wx": (1, 4 * h), "wh": (h, 4 * h), "b": (4 * h,),
            "w1": (h + N_CONTEXT, d1), "b1": (d1,),
            "w2": (d1, d2), "b2": (d2,),
            "w3": (d2, 1), "b3": (1,),
        }
        for name, shape in expected.items():
            if name not in self.weights or self.weights[name].shape != shape:
                raise ValidationError(
                    f"weight {name}: expected shape {shape}, "
                    f"got {self.weights.get(name, np.empty(0)).shape}")
        for feat in ("load", "day_of_year", "day_of_week", "hour_of_day"):
            lo, hi = self.norm[feat]
            if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
                raise ValidationError(f"normalization for {feat} is degenerate")


def normalize(value, lo: float, hi: float):
    return (np.asarray(value, dtype=float) - lo) / (hi - lo)


def denormalize(value, lo: float, hi: float):
    return np.asarray(value, dtype=float) * (hi - lo) + lo


def extract_features(load_history: HourlySeries, t: int) -> FeatureVector:
    """Features for predicting hour t+1 from the series' own calendar."""
    if t < LAG_HOURS - 1 or t >= len(load_history):
        raise DomainError(
            f"need {LAG_HOURS} hours of history ending at a valid index, got t={t}")
    sl = slice(t - LAG_HOURS + 1, t + 1)
    doy, dow, hod = load_history.calendar_features()
    return FeatureVector(
        lag_sequence=load_history.values[sl],
        day_of_year=doy[sl], day_of_week=dow[sl], hour_of_day=hod[sl])


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, shape)


def _init_weights(cfg: TrainingConfig, rng: np.random.Generator) -> dict:
    h = cfg.hidden_units
    d1, d2 = cfg.dense_units
    b = np.zeros(4 * h)
    b[h:2 * h] = 1.0  # forget-gate bias
    return {
        "wx": _glorot(rng, (1, 4 * h)),
        "wh": _glorot(rng, (h, 4 * h)),
        "b": b,
        "w1": _glorot(rng, (h + N_CONTEXT, d1)), "b1": np.zeros(d1),
        "w2": _glorot(rng, (d1, d2)), "b2": np.zeros(d2),
        "w3": _glorot(rng, (d2, 1)), "b3": np.zeros(1),
    }


def _forward(weights: dict, hidden: int, x_seq: np.ndarray, ctx: np.ndarray,
             keep_cache: bool = False):
    """Batched forward pass; x_seq (B, 24) and ctx (B, 72), both normalized."""
    bsz = x_seq.shape[0]
    h_t = np.zeros((bsz, hidden))
    c_t = np.zeros((bsz, hidden))
    zx = x_seq[:, :, None] * weights["wx"][0][None, None, :]  # (B, T, 4H)
    cache = []
    for t in range(LAG_HOURS):
        z = zx[:, t, :] + h_t @ weights["wh"] + weights["b"]
        i = _sigmoid(z[:, :hidden])
        f = _sigmoid(z[:, hidden:2 * hidden])
        g = np.tanh(z[:, 2 * hidden:3 * hidden])
        o = _sigmoid(z[:, 3 * hidden:])
        c_prev, h_prev = c_t, h_t
        c_t = f * c_prev + i * g
        tc = np.tanh(c_t)
        h_t = o * tc
        if keep_cache:
            cache.append((h_prev, c_prev, i, f, g, o, tc))
    a0 = np.concatenate([h_t, ctx], axis=1)
    z1 = a0 @ weights["w1"] + weights["b1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ weights["w2"] + weights["b2"]
    a2 = np.maximum(z2, 0.0)
    y = (a2 @ weights["w3"] + weights["b3"])[:, 0]
    if keep_cache:
        return y, (cache, a0, a1, a2)
    return y


def _backward(weights: dict, hidden: int, x_seq, y, target, caches) -> dict:
    """Mean-squared-error gradients for one batch."""
    cache, a0, a1, a2 = caches
    bsz = x_seq.shape[0]
    dy = (2.0 / bsz) * (y - target)[:, None]  # (B, 1)

    grads = {k: np.zeros_like(v) for k, v in weights.items()}
    grads["w3"] = a2.T @ dy
    grads["b3"] = dy.sum(axis=0)
    da2 = dy @ weights["w3"].T
    dz2 = da2 * (a2 > 0)
    grads["w2"] = a1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    da1 = dz2 @ weights["w2"].T
    dz1 = da1 * (a1 > 0)
    grads["w1"] = a0.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    da0 = dz1 @ weights["w1"].T

    dh = da0[:, :hidden]
    dc = np.zeros_like(dh)
    for t in range(LAG_HOURS - 1, -1, -1):
        h_prev, c_prev, i, f, g, o, tc = cache[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ], axis=1)
        grads["wx"][0] += x_seq[:, t] @ dz
        grads["wh"] += h_prev.T @ dz
        grads["b"] += dz.sum(axis=0)
        dh = dz @ weights["wh"].T
        dc = dc * f
    return grads


class _Adam:
    def __init__(self, weights: dict, lr: float,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}
        self.t = 0

    def step(self, weights: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            weights[k] -= self.lr * (self.m[k] / bc1) \
                / (np.sqrt(self.v[k] / bc2) + self.eps)


def _build_samples(series: HourlySeries):
    """Sliding-window samples (lags, context, target) from one series."""
    values = series.values
    n = len(values)
    if n < LAG_HOURS + 1:
        raise DomainError("series too short for one training sample")
    lags = np.lib.stride_tricks.sliding_window_view(values[:-1], LAG_HOURS)
    targets = values[LAG_HOURS:]
    doy, dow, hod = series.calendar_features()
    ctx = np.concatenate([
        np.lib.stride_tricks.sliding_window_view(doy[:-1], LAG_HOURS),
        np.lib.stride_tricks.sliding_window_view(dow[:-1], LAG_HOURS),
        np.lib.stride_tricks.sliding_window_view(hod[:-1], LAG_HOURS),
    ], axis=1)
    return lags.astype(float), ctx.astype(float), targets.astype(float)


def _norm_params(loads: np.ndarray) -> dict:
    lo, hi = float(loads.min()), float(loads.max())
    if hi <= lo:
        hi = lo + 1.0  # constant series still needs a nonzero span
    return {
        "load": (lo, hi),
        "day_of_year": (1.0, 365.0),
        "day_of_week": (0.0, 6.0),
        "hour_of_day": (0.0, 23.0),
    }


def _normalize_ctx(ctx: np.ndarray, norm: dict) -> np.ndarray:
    out = np.empty_like(ctx)
    for k, feat in enumerate(("day_of_year", "day_of_week", "hour_of_day")):
        lo, hi = norm[feat]
        out[:, k * LAG_HOURS:(k + 1) * LAG_HOURS] = \
            normalize(ctx[:, k * LAG_HOURS:(k + 1) * LAG_HOURS], lo, hi)
    return out


def train(dataset: LoadDataset, cfg: TrainingConfig) -> ForecastModel:
    """Fit the forecaster on the dataset's training split.

    Deterministic for a given rng_seed (initialization and shuffling both
    derive from it).  The test split never touches the weights or the
    normalization parameters.
    """
    train_series = dataset.train_series()
    if not train_series:
        raise DomainError("dataset has no training series")

    parts = [_build_samples(s) for s in train_series]
    lags = np.concatenate([p[0] for p in parts])
    ctx = np.concatenate([p[1] for p in parts])
    targets = np.concatenate([p[2] for p in parts])

    norm = _norm_params(np.concatenate([s.values for s in train_series]))
    lo, hi = norm["load"]
    lags_n = normalize(lags, lo, hi)
    targets_n = normalize(targets, lo, hi)
    ctx_n = _normalize_ctx(ctx, norm)

    rng = np.random.default_rng(cfg.rng_seed)
    weights = _init_weights(cfg, rng)
    adam = _Adam(weights, cfg.learning_rate)
    n = len(targets_n)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            y, caches = _forward(weights, cfg.hidden_units,
                                 lags_n[idx], ctx_n[idx], keep_cache=True)
            err = y - targets_n[idx]
            epoch_loss += float(err @ err)
            grads = _backward(weights, cfg.hidden_units, lags_n[idx],
                              y, targets_n[idx], caches)
            adam.step(weights, grads)
        losses.append(epoch_loss / n)

    return ForecastModel(weights=weights, norm=norm,
                         hidden_units=cfg.hidden_units,
                         dense_units=tuple(cfg.dense_units),
                         epoch_losses=losses)


def predict_one(model: ForecastModel, features: FeatureVector) -> float:
    """Next-hour load estimate (kWh); negative raw outputs clamp to zero."""
    lo, hi = model.norm["load"]
    lags_n = normalize(features.lag_sequence, lo, hi)[None, :]
    ctx_n = _normalize_ctx(features.context[None, :], model.norm)
    y = _forward(model.weights, model.hidden_units, lags_n, ctx_n)[0]
    return max(float(denormalize(y, lo, hi)), 0.0)


def predict_horizon(model: ForecastModel, load_history: HourlySeries,
                    t_now: int, horizon: int) -> np.ndarray:
    """Recursive rollout: each prediction joins the lag window of the next."""
    if horizon < 1:
        raise DomainError("horizon must be >= 1")
    if t_now < LAG_HOURS - 1 or t_now >= len(load_history):
        raise DomainError("insufficient history for the requested start")
    values = np.concatenate([load_history.values[:t_now + 1],
                             np.zeros(horizon)])
    doy, dow, hod = load_history.calendar_features(n_hours=t_now + 1 + horizon)
    out = np.empty(horizon)
    for k in range(horizon):
        t = t_now + k
        sl = slice(t - LAG_HOURS + 1, t + 1)
        feats = FeatureVector(values[sl], doy[sl], dow[sl], hod[sl])
        pred = predict_one(model, feats)
        values[t + 1] = pred
        out[k] = pred
    return out


def save_model(model: ForecastModel, path: str | Path) -> None:
    """Single-file npz: weights plus a JSON metadata header."""
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "hidden_units": model.hidden_units,
        "dense_units": list(model.dense_units),
        "norm": {k: list(v) for k, v in model.norm.items()},
        "epoch_losses": model.epoch_losses,
    }
    np.savez(path, __meta__=np.frombuffer(
        json.dumps(meta).encode(), dtype=np.uint8), **model.weights)


def load_model(path: str | Path) -> ForecastModel:
    """Load and shape-check a saved model."""
    with np.load(path) as data:
        if "__meta__" not in data:
            raise ValidationError(f"{path}: not a forecast model file")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValidationError(
                f"{path}: unsupported format version {meta.get('format_version')}")
        weights = {k: data[k] for k in data.files if k != "__meta__"}
    return ForecastModel(
        weights=weights,
        norm={k: tuple(v) for k, v in meta["norm"].items()},
        hidden_units=int(meta["hidden_units"]),
        dense_units=tuple(meta["dense_units"]),
        epoch_losses=list(meta["epoch_losses"]),
    )
