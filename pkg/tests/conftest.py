"""Shared fixtures; year-scale runs are cached per session and reused."""

from __future__ import annotations

import numpy as np
import pytest

from evhome import battery, data_io, engine, forecaster
from evhome.optimizer import DegradationContext


@pytest.fixture(scope="session")
def params():
    return battery.load_degradation_params()


@pytest.fixture(scope="session")
def consts():
    return battery.PhysicalConstants()


@pytest.fixture(scope="session")
def pack_spec():
    return battery.VehicleBatterySpec(
        capacity_kwh=82.0, nominal_capacity_ah=205.0, nominal_voltage=400.0,
        driving_range_km=514.0, max_hourly_energy_kwh=11.0, eol_fraction=0.8)


@pytest.fixture(scope="session")
def economics():
    return battery.BatteryEconomics(
        replacement_cost_per_kwh=111.5, residual_fraction=0.30,
        discount_rate=0.10, nominal_life_years=10.0)


@pytest.fixture
def context(params, consts, pack_spec, economics):
    state = battery.DegradationState(age_hours=2000.0, q_tot=3000.0, q_ch=1400.0)
    return DegradationContext(state, pack_spec, params, consts, economics,
                              288.15)


_YEAR_CACHE: dict = {}


def cached_year_run(scenario: str, seed: int, gamma: float = 1.0,
                    with_model: bool = False):
    """Deterministic year runs, shared across test modules."""
    key = (scenario, seed, gamma, with_model)
    if key not in _YEAR_CACHE:
        from dataclasses import replace
        app = data_io.load_config(None)
        cfg = engine.prepare_simulation(app, scenario=scenario, seed=seed,
                                        gamma=gamma, no_forecast=True)
        if with_model:
            cfg = replace(cfg, forecast_model=small_trained_model())
        _YEAR_CACHE[key] = (engine.run_year(cfg), cfg)
    return _YEAR_CACHE[key]


_MODEL_CACHE: list = []


def small_trained_model():
    """A quickly trained forecaster for engine integration runs."""
    if not _MODEL_CACHE:
        dataset = data_io.generate_synthetic_load(
            "two_peak", {"days": 60, "noise_std_kwh": 0.05}, rng_seed=5)
        cfg = forecaster.TrainingConfig(epochs=8, rng_seed=5)
        _MODEL_CACHE.append(forecaster.train(dataset, cfg))
    return _MODEL_CACHE[0]


@pytest.fixture(scope="session")
def sinusoid_model_and_data():
    """75-epoch training on the clean daily sinusoid (acceptance target)."""
    dataset = data_io.generate_synthetic_load(
        "sinusoid", {"days": 120, "mean_kwh": 0.9, "amplitude_kwh": 0.45},
        rng_seed=11)
    cfg = forecaster.TrainingConfig(rng_seed=11)  # 75 epochs, batch 8
    model = forecaster.train(dataset, cfg)
    return model, dataset


def make_rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
