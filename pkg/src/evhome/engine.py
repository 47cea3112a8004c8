"""Online year-long simulation of vehicle-home-grid operation.

Each simulated day the EV is picked up in the morning, drives a sampled
distance, returns in the evening and parks until the next pickup.  While
parked, the receding-horizon loop predicts the household load for the rest
of the parking window, optimizes the energy flows, executes only the first
hour, and re-predicts/re-optimizes whenever the realized load deviates from
its prediction.  Degradation is accounted exactly (unsmoothed gate, true
sqrt denominators) on executed hours only.

Scenario ``A`` is full bidirectional operation; scenario ``B`` is the smart
unidirectional benchmark (no V2G/V2H).  Scenario B needs no load forecast:
with vehicle discharge disabled and an unbounded grid, the household term of
the bill does not depend on the decision variables, so each parking session
is solved once.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import battery, forecaster, optimizer
from .battery import (BatteryEconomics, DegradationParams, DegradationState,
                      PhysicalConstants, VehicleBatterySpec)
from .data_io import HOURS_PER_YEAR, HourlySeries, TripsSection
from .errors import DomainError, SimulationFault
from .forecaster import ForecastModel
from .optimizer import (DegradationContext, FlowSchedule, OptimizationWindow,
                        SolverConfig, TariffSeries)

log = logging.getLogger(__name__)

LEDGER_COLUMNS = ("hour", "price", "HL_actual", "HL_predicted", "e_g2v",
                  "e_g2h", "e_v2g", "e_v2h", "soc", "s", "bd_increment",
                  "ec", "bc")


@dataclass(frozen=True)
class TripSchedule:
    """One trip per day: pickup and arrival hours plus driven distance."""

    pickup_hour: np.ndarray  # int hour of day
    arrival_hour: np.ndarray  # int hour of day, same day
    duration_hours: np.ndarray  # int
    distance_km: np.ndarray

    def __post_init__(self):
        if np.any(self.arrival_hour <= self.pickup_hour):
            raise DomainError("arrival must come after pickup")

    @property
    def n_days(self) -> int:
        return len(self.pickup_hour)


def _sample_truncated(rng: np.random.Generator, mean: float, sigma: float,
                      lo: float, hi: float, n: int) -> np.ndarray:
    """Rejection-sampled truncated Gaussian."""
    out = np.empty(n)
    filled = 0
    while filled < n:
        draw = rng.normal(mean, sigma, 2 * (n - filled))
        draw = draw[(draw >= lo) & (draw <= hi)]
        take = min(len(draw), n - filled)
        out[filled:filled + take] = draw[:take]
        filled += take
    return out


def generate_trips(n_days: int, rng_seed: int,
                   params: TripsSection | None = None) -> TripSchedule:
    """Sample one trip per day; deterministic for a given seed.

    Pickup times and travel durations snap to whole hours; a return past
    23:00 is clamped back to keep one trip per calendar day.
    """
    p = params or TripsSection()
    rng = np.random.default_rng(rng_seed)
    pickup = np.rint(_sample_truncated(
        rng, p.pickup_mean_hour, p.pickup_sigma_hours,
        p.pickup_min_hour, p.pickup_max_hour, n_days)).astype(int)
    duration = np.rint(_sample_truncated(
        rng, p.duration_mean_hours, p.duration_sigma_hours,
        p.duration_min_hours, p.duration_max_hours, n_days)).astype(int)
    distance = _sample_truncated(
        rng, p.distance_mean_km, p.distance_sigma_km,
        p.distance_min_km, p.distance_max_km, n_days)
    arrival = np.minimum(pickup + duration, 23)
    duration = arrival - pickup
    return TripSchedule(pickup, arrival, duration, distance)


@dataclass(frozen=True)
class SimulationConfig:
    """Everything one reproducible year run needs."""

    scenario: str  # "A" bidirectional | "B" unidirectional
    battery_spec: VehicleBatterySpec
    economics: BatteryEconomics
    deg_params: DegradationParams
    consts: PhysicalConstants
    tariff: TariffSeries  # 8760 hourly prices + price ratio
    load_actual: HourlySeries  # 8760 hourly kWh
    forecast_model: ForecastModel | None  # None -> oracle load (perfect predictor)
    trips: TripsSection = field(default_factory=TripsSection)
    solver: SolverConfig = field(default_factory=SolverConfig)
    initial_soc: float = 0.60
    initial_age_days: float = 60.0
    goal_soc: float = 0.80
    rng_seed: int = 1
    mismatch_tolerance_kwh: float = 0.0
    temperature_k: float = 288.15

    def __post_init__(self):
        if self.scenario not in ("A", "B"):
            raise DomainError("scenario must be 'A' or 'B'")
        if len(self.tariff) != HOURS_PER_YEAR or len(self.load_actual) != HOURS_PER_YEAR:
            raise DomainError(
                f"price and load series must both span {HOURS_PER_YEAR} hours")


@dataclass
class Ledger:
    """Fixed-column hourly record of the simulated year."""

    n_hours: int

    def __post_init__(self):
        for name in LEDGER_COLUMNS:
            setattr(self, name, np.zeros(self.n_hours))
        self.hour[:] = np.arange(self.n_hours)
        self.is_driving = np.zeros(self.n_hours, dtype=bool)

    def write_csv(self, path: str | Path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LEDGER_COLUMNS)
            for i in range(self.n_hours):
                writer.writerow([f"{getattr(self, c)[i]:.10g}"
                                 for c in LEDGER_COLUMNS])


@dataclass(frozen=True)
class YearlyMetrics:
    """Aggregated results; FC = EC + BC and BD = BD_cal + BD_cyc by construction."""

    fc: float
    ec: float
    bc: float
    bd: float
    bd_cal: float
    bd_cyc: float
    bd_cyc_ht: float
    bd_cyc_lt: float
    bd_cyc_lt_hsoc: float
    e_batt_kwh: float
    g2v_kwh: float
    g2h_kwh: float
    v2g_kwh: float
    v2h_kwh: float
    driving_kwh: float
    slack_total: float
    n_optimizations: int
    solver_failures: int
    final_soc: float
    ledger: Ledger
    trips: TripSchedule

    def summary_dict(self) -> dict:
        skip = {"ledger", "trips"}
        return {name: float(getattr(self, name))
                if not isinstance(getattr(self, name), int)
                else getattr(self, name)
                for name in self.__dataclass_fields__ if name not in skip}

    def write_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary_dict(), fh, indent=2)


class _EngineState:
    """Mutable per-run state threaded through the hour loop."""

    def __init__(self, cfg: SimulationConfig):
        self.soc = cfg.initial_soc
        self.deg = DegradationState(age_hours=cfg.initial_age_days * 24.0)
        self.driving_kwh = 0.0
        self.n_optimizations = 0
        self.solver_failures = 0


class _YearRun:
    def __init__(self, cfg: SimulationConfig):
        self.cfg = cfg
        self.prices = cfg.tariff.buy_price
        self.loads = cfg.load_actual.values
        self.nv = battery.net_value(cfg.economics, cfg.battery_spec)
        self.ledger = Ledger(HOURS_PER_YEAR)
        self.state = _EngineState(cfg)
        self.predicted = np.full(HOURS_PER_YEAR, np.nan)

    # ---- accounting ----------------------------------------------------

    def _account_hour(self, t: int, g2v: float, v2g: float, v2h: float,
                      g2h: float, slack: float, e_drive_out: float,
                      soc_new: float, driving: bool) -> None:
        cfg = self.cfg
        led = self.ledger
        soc_prev = self.state.soc
        self.state.deg, bd = battery.total_degradation_step(
            self.state.deg, cfg.temperature_k, soc_prev, soc_new,
            g2v, v2g + v2h + e_drive_out, 1.0,
            cfg.battery_spec, cfg.deg_params, cfg.consts)
        ec = optimizer.energy_cost(g2v, g2h, v2g, self.prices[t],
                                   cfg.tariff.price_ratio)
        bc = battery.battery_cost(bd, self.nv, cfg.battery_spec.eol_fraction)
        self.state.soc = soc_new
        led.price[t] = self.prices[t]
        led.HL_actual[t] = self.loads[t]
        led.HL_predicted[t] = self.predicted[t] if np.isfinite(self.predicted[t]) \
            else self.loads[t]
        led.e_g2v[t], led.e_g2h[t] = g2v, g2h
        led.e_v2g[t], led.e_v2h[t] = v2g, v2h
        led.soc[t], led.s[t] = soc_new, slack
        led.bd_increment[t], led.ec[t], led.bc[t] = bd, ec, bc
        led.is_driving[t] = driving

    # ---- driving -------------------------------------------------------

    def driving_hour(self, t: int, dsoc: float) -> None:
        soc_new = self.state.soc - dsoc
        if soc_new < -1e-9:
            raise SimulationFault(
                f"hour {t}: SoC would fall to {soc_new:.4f} while driving")
        soc_new = max(soc_new, 0.0)
        e_out = dsoc * self.cfg.battery_spec.capacity_kwh
        self.state.driving_kwh += e_out
        # household load met entirely from the grid while the EV is away
        self._account_hour(t, 0.0, 0.0, 0.0, self.loads[t], 0.0,
                           e_out, soc_new, driving=True)

    # ---- parking (the online loop) --------------------------------------

    def _context(self) -> DegradationContext:
        cfg = self.cfg
        return DegradationContext(self.state.deg, cfg.battery_spec,
                                  cfg.deg_params, cfg.consts, cfg.economics,
                                  cfg.temperature_k)

    def _build_window(self, t: int, t_pick: int,
                      loads_window: np.ndarray) -> OptimizationWindow:
        cfg = self.cfg
        h = t_pick - t
        goal = np.zeros(h)
        goal[-1] = cfg.goal_soc
        bidirectional = cfg.scenario == "A"
        return OptimizationWindow(
            start_hour=t, horizon_hours=h,
            prices=self.prices[t:t_pick].copy(),
            price_ratio=cfg.tariff.price_ratio,
            predicted_load=loads_window,
            soc_initial=self.state.soc,
            soc_goal=goal, grid_limit=None,
            v2g_enabled=bidirectional, v2h_enabled=bidirectional,
            context=self._context())

    def _predict(self, t: int, t_pick: int) -> None:
        """Fill self.predicted for hours t+1 .. t_pick-1."""
        horizon = t_pick - 1 - t
        if horizon < 1:
            return
        if (self.cfg.forecast_model is None
                or t < forecaster.LAG_HOURS - 1):
            # no model, or not yet a full lag window of observed history
            # (the first simulated morning): the actual load stands in
            self.predicted[t + 1:t_pick] = self.loads[t + 1:t_pick]
        else:
            self.predicted[t + 1:t_pick] = forecaster.predict_horizon(
                self.cfg.forecast_model, self.cfg.load_actual, t, horizon)

    def _solve(self, window: OptimizationWindow,
               warm: np.ndarray | None) -> FlowSchedule:
        cfg = self.cfg
        self.state.n_optimizations += 1
        if cfg.scenario == "A":
            sched, report = optimizer.solve_window(window, cfg.solver, warm)
        else:
            sched, report = optimizer.solve_window_unidirectional(
                window, cfg.solver, warm)
        if not report.converged:
            self.state.solver_failures += 1
            log.warning("hour %d: solver failed (%s); goal-charging fallback",
                        window.start_hour, report.message)
            return self._fallback_schedule(window)
        return sched

    def _fallback_schedule(self, window: OptimizationWindow) -> FlowSchedule:
        cfg = self.cfg
        h = window.horizon_hours
        need = max(0.0, (cfg.goal_soc - self.state.soc)
                   * cfg.battery_spec.capacity_kwh)
        g2v = np.zeros(h)
        for j in range(h):
            g2v[j] = min(cfg.battery_spec.max_hourly_energy_kwh, need)
            need -= g2v[j]
        soc = self.state.soc + np.cumsum(g2v) / cfg.battery_spec.capacity_kwh
        return FlowSchedule(g2v, np.zeros(h), np.zeros(h),
                            window.predicted_load.copy(),
                            np.maximum(window.soc_goal - soc, 0.0), soc)

    def parking_session(self, t_arr: int, t_pick: int) -> None:
        cfg = self.cfg
        spec = cfg.battery_spec
        schedule: FlowSchedule | None = None
        sched_start = t_arr

        for t in range(t_arr, t_pick):
            hl = self.loads[t]
            if cfg.scenario == "B":
                reoptimize = t == t_arr
            else:
                reoptimize = (t == t_arr
                              or abs(hl - self.predicted[t])
                              > cfg.mismatch_tolerance_kwh)
            if reoptimize:
                self._predict(t, t_pick)
                if cfg.scenario == "B":
                    # load is decision-independent without V2H; model it as zero
                    loads_window = np.zeros(t_pick - t)
                else:
                    loads_window = np.concatenate(
                        [[hl], self.predicted[t + 1:t_pick]])
                window = self._build_window(t, t_pick, loads_window)
                warm = None
                if schedule is not None:
                    warm = optimizer.warm_start_from_schedule(window, schedule)
                schedule = self._solve(window, warm)
                sched_start = t

            off = t - sched_start
            g2v = max(float(schedule.e_g2v[off]), 0.0)
            v2g = max(float(schedule.e_v2g[off]), 0.0)
            v2h = min(max(float(schedule.e_v2h[off]), 0.0), hl,
                      spec.max_hourly_energy_kwh)
            g2h = hl - v2h
            soc_new = self.state.soc + (g2v - v2g - v2h) / spec.capacity_kwh
            if soc_new > 1.0:  # can only happen with a nonzero mismatch tolerance
                g2v = max(g2v - (soc_new - 1.0) * spec.capacity_kwh, 0.0)
                soc_new = self.state.soc + (g2v - v2g - v2h) / spec.capacity_kwh
            if soc_new < 0.0:
                v2g = max(v2g + soc_new * spec.capacity_kwh, 0.0)
                soc_new = self.state.soc + (g2v - v2g - v2h) / spec.capacity_kwh
            slack = float(schedule.slack[off])
            self._account_hour(t, g2v, v2g, v2h, g2h, slack, 0.0,
                               min(max(soc_new, 0.0), 1.0), driving=False)

    # ---- whole year ------------------------------------------------------

    def run(self) -> YearlyMetrics:
        cfg = self.cfg
        trips = generate_trips(HOURS_PER_YEAR // 24, cfg.rng_seed, cfg.trips)
        start_deg = self.state.deg

        prev_arrival = 0
        for day in range(trips.n_days):
            pickup = day * 24 + int(trips.pickup_hour[day])
            arrival = day * 24 + int(trips.arrival_hour[day])
            if prev_arrival < pickup:
                self.parking_session(prev_arrival, pickup)
            dsoc = (trips.distance_km[day] / trips.duration_hours[day]
                    / cfg.battery_spec.driving_range_km)
            for t in range(pickup, arrival):
                self.driving_hour(t, dsoc)
            prev_arrival = arrival
        if prev_arrival < HOURS_PER_YEAR:
            self.parking_session(prev_arrival, HOURS_PER_YEAR)

        led = self.ledger
        end = self.state.deg
        ec = float(led.ec.sum())
        bc = float(led.bc.sum())
        bd_cal = end.bd_cal - start_deg.bd_cal
        bd_ht = end.bd_cyc_ht - start_deg.bd_cyc_ht
        bd_lt = end.bd_cyc_lt - start_deg.bd_cyc_lt
        bd_ls = end.bd_cyc_lt_hsoc - start_deg.bd_cyc_lt_hsoc
        flows = float(led.e_g2v.sum() + led.e_v2g.sum() + led.e_v2h.sum())
        return YearlyMetrics(
            fc=ec + bc, ec=ec, bc=bc,
            bd=bd_cal + bd_ht + bd_lt + bd_ls,
            bd_cal=bd_cal, bd_cyc=bd_ht + bd_lt + bd_ls,
            bd_cyc_ht=bd_ht, bd_cyc_lt=bd_lt, bd_cyc_lt_hsoc=bd_ls,
            e_batt_kwh=flows + self.state.driving_kwh,
            g2v_kwh=float(led.e_g2v.sum()), g2h_kwh=float(led.e_g2h.sum()),
            v2g_kwh=float(led.e_v2g.sum()), v2h_kwh=float(led.e_v2h.sum()),
            driving_kwh=self.state.driving_kwh,
            slack_total=float(led.s.sum()),
            n_optimizations=self.state.n_optimizations,
            solver_failures=self.state.solver_failures,
            final_soc=self.state.soc,
            ledger=led, trips=trips)


def run_driving_hour(run: _YearRun, t: int, dsoc_per_hour: float) -> None:
    """One driving hour: SoC drops by the per-hour range fraction, the
    household draws from the grid, and the discharge is aged exactly."""
    run.driving_hour(t, dsoc_per_hour)


def run_parking_session(run: _YearRun, t_arr: int, t_pick: int) -> None:
    """One parking session under the online predict/optimize/correct loop."""
    if t_arr >= t_pick:
        raise DomainError("parking session needs t_arr < t_pick")
    run.parking_session(t_arr, t_pick)


def run_year(cfg: SimulationConfig) -> YearlyMetrics:
    """Simulate one year; deterministic for a given config and seed."""
    return _YearRun(cfg).run()


def prepare_simulation(app, *, scenario: str | None = None,
                       gamma: float | None = None, seed: int | None = None,
                       capacity_kwh: float | None = None,
                       load_multiplier: float | None = None,
                       model_path: str | Path | None = None,
                       no_forecast: bool = False) -> SimulationConfig:
    """Assemble a SimulationConfig from an AppConfig plus CLI overrides.

    Synthetic price/load sources are used whenever the config names no CSV
    files; their seeds derive from the run seed so a run is reproducible
    from (config, seed) alone.
    """
    from . import data_io

    seed = app.simulation.rng_seed if seed is None else seed
    cap = app.battery.capacity_kwh if capacity_kwh is None else capacity_kwh
    volt = app.battery.nominal_voltage_v
    spec = VehicleBatterySpec(
        capacity_kwh=cap,
        nominal_capacity_ah=cap * 1000.0 / volt,
        nominal_voltage=volt,
        driving_range_km=app.battery.driving_range_km,
        max_hourly_energy_kwh=app.battery.max_hourly_energy_kwh,
        eol_fraction=app.battery.eol_fraction)
    econ = BatteryEconomics(
        replacement_cost_per_kwh=app.economics.replacement_cost_eur_per_kwh,
        residual_fraction=app.economics.residual_fraction,
        discount_rate=app.economics.discount_rate_per_year,
        nominal_life_years=app.economics.nominal_life_years)
    params_file = app.battery.degradation_params_file
    deg_params = battery.load_degradation_params(
        app.resolve(params_file) if params_file else None)

    gamma = app.tariff.price_ratio if gamma is None else gamma
    if app.tariff.price_csv:
        raw = data_io.load_price_csv(app.resolve(app.tariff.price_csv))
    else:
        raw = data_io.generate_synthetic_prices(
            rng_seed=seed + 101,
            mean_eur_per_kwh=app.tariff.synthetic_mean_eur_per_kwh,
            volatility=app.tariff.synthetic_volatility)
    tariff = data_io.apply_tax_transform(
        raw, price_ratio=gamma, vat_factor=app.tariff.vat_factor,
        energy_tax_eur_per_kwh=app.tariff.energy_tax_eur_per_kwh)

    mult = app.simulation.load_multiplier if load_multiplier is None \
        else load_multiplier
    if app.simulation.load_csv_paths:
        paths = [app.resolve(p.strip())
                 for p in app.simulation.load_csv_paths.split(",") if p.strip()]
        dataset = data_io.load_household_csv(paths, multiplier=mult)
    else:
        dataset = data_io.generate_synthetic_load(
            app.simulation.synthetic_load_kind,
            {"mean_kwh": app.simulation.synthetic_load_mean_kwh,
             "noise_std_kwh": 0.05},
            rng_seed=seed + 202).scaled(mult)

    model = None
    if not no_forecast:
        if model_path is not None:
            model = forecaster.load_model(model_path)
        elif app.forecaster.model_file:
            model = forecaster.load_model(app.resolve(app.forecaster.model_file))

    solver = SolverConfig(
        slack_penalty_weight=app.simulation.slack_penalty_eur_per_pp,
        multi_start=app.simulation.solver_multi_start,
        degradation_denominator_freeze=app.simulation.solver_freeze_denominators)

    return SimulationConfig(
        scenario=app.simulation.scenario if scenario is None else scenario,
        battery_spec=spec, economics=econ, deg_params=deg_params,
        consts=PhysicalConstants(), tariff=tariff,
        load_actual=dataset.test_series(), forecast_model=model,
        trips=app.trips, solver=solver,
        initial_soc=app.simulation.initial_soc_fraction,
        initial_age_days=app.simulation.initial_age_days,
        rng_seed=seed,
        mismatch_tolerance_kwh=app.simulation.mismatch_tolerance_kwh,
        temperature_k=app.simulation.temperature_celsius + 273.15)


def _with_capacity(cfg: SimulationConfig, capacity_kwh: float) -> SimulationConfig:
    spec = cfg.battery_spec
    new_spec = replace(
        spec, capacity_kwh=capacity_kwh,
        nominal_capacity_ah=capacity_kwh * 1000.0 / spec.nominal_voltage)
    return replace(cfg, battery_spec=new_spec)


def _with_load_multiplier(cfg: SimulationConfig, mult: float) -> SimulationConfig:
    scaled = HourlySeries(cfg.load_actual.start, cfg.load_actual.values * mult)
    return replace(cfg, load_actual=scaled)


def _with_gamma(cfg: SimulationConfig, gamma: float) -> SimulationConfig:
    return replace(cfg, tariff=TariffSeries(cfg.tariff.buy_price, gamma))


def _sweep_cell(args) -> dict:
    base_cfg, capacity, mult, gamma = args
    cfg = _with_load_multiplier(_with_capacity(base_cfg, capacity), mult)
    fc_b = run_year(replace(_with_gamma(cfg, gamma), scenario="B")).fc
    fc_a = run_year(replace(_with_gamma(cfg, gamma), scenario="A")).fc
    return {"capacity_kwh": capacity, "load_multiplier": mult, "gamma": gamma,
            "fc_a": fc_a, "fc_b": fc_b, "gain": fc_b - fc_a}


def run_sweep(base_cfg: SimulationConfig, gammas, capacities,
              load_multipliers, max_workers: int = 1) -> list[dict]:
    """Scenario A vs B over the parameter grid; gain = FC_B - FC_A per cell.

    Scenario B never sells energy, so it is computed once per
    (capacity, multiplier) pair and shared across the gamma axis.
    """
    if not (len(gammas) and len(capacities) and len(load_multipliers)):
        raise DomainError("sweep value lists must be nonempty")

    cells = []
    if max_workers > 1:
        jobs = [(base_cfg, cap, mult, g)
                for cap in capacities for mult in load_multipliers
                for g in gammas]
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            cells = list(pool.map(_sweep_cell, jobs))
        return cells

    for cap in capacities:
        for mult in load_multipliers:
            cfg = _with_load_multiplier(_with_capacity(base_cfg, cap), mult)
            fc_b = run_year(replace(cfg, scenario="B")).fc
            for gamma in gammas:
                fc_a = run_year(replace(_with_gamma(cfg, gamma),
                                        scenario="A")).fc
                cells.append({"capacity_kwh": cap, "load_multiplier": mult,
                              "gamma": gamma, "fc_a": fc_a, "fc_b": fc_b,
                              "gain": fc_b - fc_a})
    return cells


def write_sweep_csv(cells: list[dict], path: str | Path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["capacity_kwh", "load_multiplier", "gamma",
                         "fc_a", "fc_b", "gain"])
        for c in cells:
            writer.writerow([c["capacity_kwh"], c["load_multiplier"],
                             c["gamma"], f"{c['fc_a']:.6f}",
                             f"{c['fc_b']:.6f}", f"{c['gain']:.6f}"])
