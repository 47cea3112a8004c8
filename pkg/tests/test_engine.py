"""Engine tests: trip sampling, driving/parking mechanics, year runs and
sweeps.  Year-scale runs come from the session cache in conftest."""

import numpy as np
import pytest

from conftest import cached_year_run, small_trained_model
from evhome import data_io, engine, forecaster, verification
from evhome.data_io import TripsSection
from evhome.engine import (_YearRun, generate_trips,
                           run_driving_hour, run_parking_session, run_sweep)
from evhome.errors import DomainError, SimulationFault


class TestGenerateTrips:
    def test_bounds_hold(self):
        trips = generate_trips(365, rng_seed=0)
        assert np.all((trips.pickup_hour >= 6) & (trips.pickup_hour <= 10))
        assert np.all((trips.duration_hours >= 7) & (trips.duration_hours <= 11))
        assert np.all((trips.distance_km >= 30) & (trips.distance_km <= 40))
        assert np.all(trips.arrival_hour <= 23)

    def test_mean_distance_monte_carlo(self):
        trips = generate_trips(10_000, rng_seed=1)
        assert abs(trips.distance_km.mean() - 35.0) <= 0.5

    def test_deterministic_per_seed(self):
        a = generate_trips(100, rng_seed=3)
        b = generate_trips(100, rng_seed=3)
        assert np.array_equal(a.pickup_hour, b.pickup_hour)
        assert np.array_equal(a.distance_km, b.distance_km)

    def test_midnight_clamp(self):
        late = TripsSection(pickup_mean_hour=18.0, pickup_min_hour=17.0,
                            pickup_max_hour=19.0)
        trips = generate_trips(200, rng_seed=0, params=late)
        assert np.all(trips.arrival_hour <= 23)
        assert np.all(trips.arrival_hour > trips.pickup_hour)


def minimal_config(scenario="A", seed=1, **overrides):
    app = data_io.load_config(None)
    cfg = engine.prepare_simulation(app, scenario=scenario, seed=seed,
                                    no_forecast=True)
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    return cfg


class TestDrivingHour:
    def test_soc_drop_arithmetic(self):
        cfg = minimal_config()
        run = _YearRun(cfg)
        dsoc = 35.0 / 9.0 / 514.0
        run_driving_hour(run, 10, dsoc)
        assert run.state.soc == pytest.approx(0.60 - dsoc, abs=1e-12)
        assert dsoc == pytest.approx(0.00756, abs=1e-4)

    def test_zero_distance_leaves_soc(self):
        cfg = minimal_config()
        run = _YearRun(cfg)
        run_driving_hour(run, 10, 0.0)
        assert run.state.soc == 0.60

    def test_household_fully_grid_supplied(self):
        cfg = minimal_config()
        run = _YearRun(cfg)
        run_driving_hour(run, 10, 0.005)
        assert run.ledger.e_g2h[10] == cfg.load_actual.values[10]
        assert run.ledger.e_v2h[10] == 0.0
        assert run.ledger.e_g2v[10] == 0.0

    def test_fault_below_zero(self):
        cfg = minimal_config()
        run = _YearRun(cfg)
        run.state.soc = 0.001
        with pytest.raises(SimulationFault):
            run_driving_hour(run, 10, 0.01)


class TestParkingSession:
    def test_perfect_predictor_single_optimization(self):
        cfg = minimal_config()  # no_forecast: prediction == actual
        run = _YearRun(cfg)
        run_parking_session(run, 0, 8)
        assert run.state.n_optimizations == 1

    def test_always_wrong_predictor_reoptimizes_hourly(self, monkeypatch):
        cfg = minimal_config()
        from dataclasses import replace
        cfg = replace(cfg, forecast_model=small_trained_model())
        monkeypatch.setattr(engine.forecaster, "predict_horizon",
                            lambda model, hist, t, h: np.zeros(h))
        run = _YearRun(cfg)
        run_parking_session(run, 0, 8)
        # loads are strictly positive, so every hour after arrival mismatches
        assert run.state.n_optimizations == 8

    def test_goal_reached_when_feasible(self):
        cfg = minimal_config()
        run = _YearRun(cfg)
        run_parking_session(run, 0, 8)
        # 8 h x 11 kWh >= (0.8 - 0.6) x 82 kWh, so the goal must bind
        assert run.state.soc >= 0.8 - 1e-6
        assert run.ledger.s[:8].sum() <= 1e-6

    def test_scenario_b_never_discharges(self):
        cfg = minimal_config(scenario="B")
        run = _YearRun(cfg)
        run_parking_session(run, 0, 8)
        assert run.ledger.e_v2g[:8].sum() == 0.0
        assert run.ledger.e_v2h[:8].sum() == 0.0
        assert run.state.n_optimizations == 1

    def test_bad_session_bounds(self):
        cfg = minimal_config()
        run = _YearRun(cfg)
        with pytest.raises(DomainError):
            run_parking_session(run, 8, 8)


class TestYearRun:
    def test_scenario_b_ledger_unidirectional(self):
        m, _ = cached_year_run("B", seed=1)
        assert m.v2g_kwh == 0.0
        assert m.v2h_kwh == 0.0
        assert np.all(m.ledger.e_v2g == 0.0)
        assert np.all(m.ledger.e_v2h == 0.0)

    def test_scenario_dominance(self):
        ma, _ = cached_year_run("A", seed=1)
        mb, _ = cached_year_run("B", seed=1)
        assert ma.fc <= mb.fc

    def test_b_battery_energy_is_driving_plus_charging(self):
        m, _ = cached_year_run("B", seed=1)
        assert m.e_batt_kwh == pytest.approx(m.driving_kwh + m.g2v_kwh,
                                             abs=1e-9)

    def test_metrics_identities(self):
        m, _ = cached_year_run("A", seed=1)
        assert m.fc == pytest.approx(m.ec + m.bc, abs=1e-6)
        assert m.bd == pytest.approx(m.bd_cal + m.bd_cyc, abs=1e-9)
        assert m.e_batt_kwh >= m.driving_kwh

    def test_ledger_conservation(self):
        m, cfg = cached_year_run("A", seed=1)
        audit = verification.audit_year(m, cfg)
        assert audit["load_balance"] <= 1e-9
        assert audit["soc_recursion"] <= 1e-9
        assert audit["ec_sum_error"] <= 1e-6
        assert audit["bc_sum_error"] <= 1e-6

    def test_deterministic_metrics(self):
        cfg = minimal_config(scenario="B", seed=4)
        m1 = engine.run_year(cfg)
        m2 = engine.run_year(cfg)
        assert m1.fc == m2.fc
        assert m1.bd == m2.bd
        assert np.array_equal(m1.ledger.soc, m2.ledger.soc)

    def test_series_length_validated(self):
        cfg = minimal_config()
        from dataclasses import replace
        short = data_io.HourlySeries(cfg.load_actual.start,
                                     cfg.load_actual.values[:100])
        with pytest.raises(DomainError):
            replace(cfg, load_actual=short)


class TestSweep:
    def test_tiny_grid_shape_and_properties(self):
        cfg = minimal_config(scenario="A", seed=6)
        cells = run_sweep(cfg, gammas=[0.0, 1.0], capacities=[82.0],
                          load_multipliers=[1.0])
        assert len(cells) == 2
        # scenario B is gamma-independent by construction
        assert cells[0]["fc_b"] == cells[1]["fc_b"]
        for c in cells:
            assert c["gain"] == pytest.approx(c["fc_b"] - c["fc_a"])
            assert c["gain"] >= 0.0
        # larger gamma helps scenario A
        assert cells[1]["fc_a"] <= cells[0]["fc_a"] + 1e-6

    def test_empty_lists_rejected(self):
        cfg = minimal_config()
        with pytest.raises(DomainError):
            run_sweep(cfg, [], [82.0], [1.0])

    def test_config_is_picklable_for_worker_pools(self):
        import pickle
        cfg = minimal_config()
        blob = pickle.dumps(cfg)
        back = pickle.loads(blob)
        assert back.battery_spec.capacity_kwh == cfg.battery_spec.capacity_kwh
        assert np.array_equal(back.tariff.buy_price, cfg.tariff.buy_price)


class TestPrepareSimulation:
    def test_capacity_override_rescales_c0(self):
        app = data_io.load_config(None)
        cfg = engine.prepare_simulation(app, capacity_kwh=41.0,
                                        no_forecast=True)
        assert cfg.battery_spec.nominal_capacity_ah == pytest.approx(102.5)

    def test_load_multiplier(self):
        app = data_io.load_config(None)
        base = engine.prepare_simulation(app, no_forecast=True)
        x4 = engine.prepare_simulation(app, load_multiplier=4.0,
                                       no_forecast=True)
        assert x4.load_actual.values.mean() == pytest.approx(
            4.0 * base.load_actual.values.mean())

    def test_model_roundtrip_through_config(self, tmp_path):
        model = small_trained_model()
        path = tmp_path / "m.npz"
        forecaster.save_model(model, path)
        app = data_io.load_config(None)
        cfg = engine.prepare_simulation(app, model_path=path)
        assert cfg.forecast_model is not None
        assert cfg.forecast_model.hidden_units == model.hidden_units
