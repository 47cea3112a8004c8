"""Dataset ingestion, validation, synthetic fixtures and configuration.

Price and household-load files are plain CSV with an ISO-8601 UTC timestamp
column and one value column whose header carries the unit.  Validation is
strict: series must be gapless and strictly hourly (a single missing hour in
load data is repaired by interpolation with a logged warning, longer runs
reject the file), loads must be nonnegative, and leap years are trimmed to
8760 hours.  Day-ahead prices may be negative; the tax transform is affine
and preserves sign.

Run configuration is a single INI file with sections [battery], [economics],
[tariff], [trips], [forecaster] and [simulation]; numeric keys carry unit
suffixes and every paper constant appears with its published default.
"""

from __future__ import annotations

import configparser
import csv
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import DomainError, ValidationError
from .optimizer import TariffSeries

log = logging.getLogger(__name__)

HOURS_PER_YEAR = 8760

# Swedish price build-up: VAT markup plus fixed energy tax (EUR/kWh).
DEFAULT_VAT_FACTOR = 1.25
DEFAULT_ENERGY_TAX = 0.006


class HourlySeries:
    """A strictly hourly series anchored at a UTC start timestamp."""

    def __init__(self, start: datetime, values):
        self.start = start
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 1 or self.values.size == 0:
            raise ValidationError("series values must be a nonempty 1-d array")
        self._cal_cache: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.values)

    def timestamp(self, i: int) -> datetime:
        return self.start + timedelta(hours=int(i))

    def calendar_features(self, n_hours: int | None = None):
        """(day_of_year 1..365, day_of_week 0..6, hour_of_day 0..23) arrays.

        ``n_hours`` may exceed the series length (used by recursive
        forecasting, whose clock keeps running past the observed data).
        """
        n = len(self.values) if n_hours is None else int(n_hours)
        if self._cal_cache is not None and len(self._cal_cache[0]) >= n:
            doy, dow, hod = self._cal_cache
            return doy[:n], dow[:n], hod[:n]
        times = np.datetime64(self.start) + np.arange(n) * np.timedelta64(1, "h")
        days = times.astype("datetime64[D]")
        hod = (times.astype("datetime64[h]").astype(np.int64) % 24).astype(float)
        dow = ((days.astype(np.int64) + 3) % 7).astype(float)  # 1970-01-01 is a Thursday
        years = days.astype("datetime64[Y]")
        doy = (days - years.astype("datetime64[D]")).astype(np.int64) + 1
        doy = np.minimum(doy, 365).astype(float)  # leap day folds onto 365
        if n >= len(self.values):
            self._cal_cache = (doy, dow, hod)
        return doy, dow, hod


class RawPriceSeries(HourlySeries):
    """Hourly day-ahead prices in EUR/kWh before taxes (may be negative)."""


@dataclass
class LoadDataset:
    """Named apartment load series; the last one is the test split."""

    names: list[str]
    series: list[HourlySeries]

    def __post_init__(self):
        if len(self.names) != len(self.series):
            raise ValidationError("names and series lengths differ")
        if len(self.series) < 2:
            raise ValidationError("a dataset needs >= 2 series for a train/test split")
        for name, s in zip(self.names, self.series):
            if np.any(s.values < 0):
                raise ValidationError(f"{name}: negative load values")

    def train_series(self) -> list[HourlySeries]:
        return self.series[:-1]

    def test_series(self) -> HourlySeries:
        return self.series[-1]

    def scaled(self, multiplier: float) -> "LoadDataset":
        if multiplier <= 0:
            raise DomainError("load multiplier must be > 0")
        return LoadDataset(
            names=list(self.names),
            series=[HourlySeries(s.start, s.values * multiplier)
                    for s in self.series])


def apply_tax_transform(raw: RawPriceSeries, price_ratio: float = 1.0,
                        vat_factor: float = DEFAULT_VAT_FACTOR,
                        energy_tax_eur_per_kwh: float = DEFAULT_ENERGY_TAX
                        ) -> TariffSeries:
    """Consumer price: VAT markup on the day-ahead price plus energy tax."""
    prices = raw.values * vat_factor + energy_tax_eur_per_kwh
    return TariffSeries(buy_price=prices, price_ratio=price_ratio)


def _parse_timestamp(text: str, path, line_no: int) -> datetime:
    try:
        ts = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    except ValueError as exc:
        raise ValidationError(f"{path}:{line_no}: bad timestamp {text!r}") from exc
    if ts.tzinfo is not None:
        ts = ts.replace(tzinfo=None)
    return ts


def _read_two_column_csv(path: str | Path, value_headers: dict[str, float]):
    """Parse (timestamp, value) rows; returns (start, values, unit_scale).

    ``value_headers`` maps accepted value-column names to unit scale factors.
    Enforces strict hourly spacing, naming every missing or duplicated hour.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        if len(header) != 2 or header[0].strip().lower() != "timestamp":
            raise ValidationError(
                f"{path}: expected header 'timestamp,<value_unit>', got {header}")
        value_col = header[1].strip().lower()
        if value_col not in value_headers:
            raise ValidationError(
                f"{path}: unknown unit column {value_col!r}; "
                f"accepted: {sorted(value_headers)}")
        scale = value_headers[value_col]

        times, values = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValidationError(f"{path}:{line_no}: expected 2 columns")
            times.append(_parse_timestamp(row[0], path, line_no))
            try:
                values.append(float(row[1]) * scale)
            except ValueError as exc:
                raise ValidationError(
                    f"{path}:{line_no}: bad value {row[1]!r}") from exc

    if not times:
        raise ValidationError(f"{path}: no data rows")
    missing, duplicated = [], []
    for prev, cur in zip(times, times[1:]):
        gap = (cur - prev).total_seconds() / 3600.0
        if gap == 1.0:
            continue
        if gap <= 0.0:
            duplicated.append(cur.isoformat())
        else:
            t = prev + timedelta(hours=1)
            while t < cur:
                missing.append(t.isoformat())
                t += timedelta(hours=1)
    return times[0], np.asarray(values), missing, duplicated


def _trim_leap_year(values: np.ndarray, path) -> np.ndarray:
    if len(values) == 8784:  # one-year framing: drop the leap surplus
        log.warning("%s: trimming leap year (8784 h) to %d h", path,
                    HOURS_PER_YEAR)
        return values[:HOURS_PER_YEAR]
    return values


def load_price_csv(path: str | Path) -> RawPriceSeries:
    """Day-ahead price CSV: columns (timestamp, price_eur_per_kwh|mwh)."""
    start, values, missing, duplicated = _read_two_column_csv(
        path, {"price_eur_per_kwh": 1.0, "price_eur_per_mwh": 1e-3})
    if missing or duplicated:
        raise ValidationError(
            f"{path}: non-hourly series; missing hours {missing[:5]}"
            f"{'...' if len(missing) > 5 else ''}, duplicates {duplicated[:5]}")
    return RawPriceSeries(start, _trim_leap_year(values, path))


def _load_one_household_csv(path: str | Path) -> HourlySeries:
    start, values, missing, duplicated = _read_two_column_csv(
        path, {"load_kwh": 1.0})
    if duplicated:
        raise ValidationError(f"{path}: duplicated hours {duplicated[:5]}")
    if missing:
        # single isolated gaps are interpolated; longer runs reject the file
        miss_times = [datetime.fromisoformat(m) for m in missing]
        runs = 1
        for a, b in zip(miss_times, miss_times[1:]):
            runs = runs + 1 if (b - a) == timedelta(hours=1) else 1
            if runs >= 2:
                raise ValidationError(
                    f"{path}: gap of >= 2 consecutive hours at {b.isoformat()}")
        n_total = len(values) + len(missing)
        full = np.empty(n_total)
        have = np.ones(n_total, dtype=bool)
        offsets = sorted(int((m - start).total_seconds() // 3600)
                         for m in miss_times)
        have[offsets] = False
        full[have] = values
        idx = np.arange(n_total)
        full[~have] = np.interp(idx[~have], idx[have], values)
        log.warning("%s: interpolated %d isolated missing hour(s)",
                    path, len(missing))
        values = full
    if np.any(values < 0):
        raise ValidationError(f"{path}: negative load values")
    values = _trim_leap_year(values, path)
    if len(values) < HOURS_PER_YEAR:
        raise ValidationError(
            f"{path}: {len(values)} hours < one year ({HOURS_PER_YEAR})")
    return HourlySeries(start, values)


def load_household_csv(paths: list[str | Path],
                       multiplier: float = 1.0) -> LoadDataset:
    """Concatenate apartment series in order; the last one is the test year."""
    if len(paths) < 2:
        raise ValidationError("need >= 2 load series for a train/test split")
    series = [_load_one_household_csv(p) for p in paths]
    names = [Path(p).stem for p in paths]
    ds = LoadDataset(names=names, series=series)
    return ds.scaled(multiplier) if multiplier != 1.0 else ds


def write_hourly_csv(series: HourlySeries, path: str | Path,
                     value_header: str) -> None:
    """Write a series back to CSV, lossless on round trip."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", value_header])
        for i, v in enumerate(series.values):
            writer.writerow([series.timestamp(i).isoformat(), f"{v:.17g}"])


def generate_synthetic_load(kind: str, params: dict | None = None,
                            rng_seed: int = 0) -> LoadDataset:
    """Deterministic synthetic household loads for tests and demos.

    Kinds: ``constant``, ``sinusoid`` (24-hour period) and ``two_peak``
    (morning/evening humps with noise).  Produces ``n_series`` year-like
    series; the last one is the test split, as with real data.
    """
    p = {"mean_kwh": 0.9, "amplitude_kwh": 0.45, "noise_std_kwh": 0.0,
         "days": 365, "n_series": 2, "start": datetime(2022, 1, 1)}
    p.update(params or {})
    n = int(p["days"]) * 24
    hours = np.arange(n)
    hod = hours % 24

    series = []
    for k in range(int(p["n_series"])):
        rng = np.random.default_rng(rng_seed + k)
        if kind == "constant":
            values = np.full(n, p["mean_kwh"])
        elif kind == "sinusoid":
            values = p["mean_kwh"] + p["amplitude_kwh"] * np.sin(
                2.0 * np.pi * (hod - 6) / 24.0)
        elif kind == "two_peak":
            morning = 0.9 * np.exp(-0.5 * ((hod - 8.0) / 1.5) ** 2)
            evening = 1.3 * np.exp(-0.5 * ((hod - 19.0) / 2.0) ** 2)
            season = 0.15 * np.cos(2.0 * np.pi * hours / n)
            base = 0.45 + season + morning + evening
            values = base * p["mean_kwh"] / base.mean()
        else:
            raise DomainError(f"unknown synthetic load kind {kind!r}")
        if p["noise_std_kwh"] > 0:
            values = values + rng.normal(0.0, p["noise_std_kwh"], n)
        series.append(HourlySeries(p["start"], np.maximum(values, 0.0)))
    names = [f"synthetic_{kind}_{k}" for k in range(int(p["n_series"]))]
    return LoadDataset(names=names, series=series)


def generate_synthetic_prices(rng_seed: int = 0, days: int = 365,
                              mean_eur_per_kwh: float = 0.10,
                              volatility: float = 0.45,
                              start: datetime = datetime(2022, 1, 1)
                              ) -> RawPriceSeries:
    """Day-ahead-like synthetic prices: daily double peak, drifting level,
    occasional spikes.  ``volatility`` steers the relative spread."""
    rng = np.random.default_rng(rng_seed)
    n = days * 24
    hod = np.arange(n) % 24
    shape = (1.0
             + 0.35 * np.exp(-0.5 * ((hod - 8.0) / 2.0) ** 2)
             + 0.50 * np.exp(-0.5 * ((hod - 19.0) / 2.5) ** 2)
             - 0.30 * np.exp(-0.5 * ((hod - 3.0) / 2.5) ** 2))
    level = np.repeat(np.exp(rng.normal(0.0, volatility, days)), 24)
    spikes = rng.random(n) < 0.01
    values = mean_eur_per_kwh * shape * level
    values[spikes] *= rng.uniform(2.0, 4.0, spikes.sum())
    values = np.maximum(values, 0.001)
    return RawPriceSeries(start, values * mean_eur_per_kwh / values.mean())


# --------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class BatterySection:
    capacity_kwh: float = 82.0
    nominal_voltage_v: float = 400.0
    nominal_capacity_ah: float = 205.0
    driving_range_km: float = 514.0
    max_hourly_energy_kwh: float = 11.0
    eol_fraction: float = 0.8
    degradation_params_file: str = ""  # empty -> packaged parameter set


@dataclass(frozen=True)
class EconomicsSection:
    replacement_cost_eur_per_kwh: float = 111.5
    residual_fraction: float = 0.30
    discount_rate_per_year: float = 0.10
    nominal_life_years: float = 10.0


@dataclass(frozen=True)
class TariffSection:
    price_ratio: float = 1.0
    vat_factor: float = DEFAULT_VAT_FACTOR
    energy_tax_eur_per_kwh: float = DEFAULT_ENERGY_TAX
    price_csv: str = ""  # empty -> synthetic
    synthetic_mean_eur_per_kwh: float = 0.10
    synthetic_volatility: float = 0.45


@dataclass(frozen=True)
class TripsSection:
    pickup_mean_hour: float = 8.0
    pickup_min_hour: float = 6.0
    pickup_max_hour: float = 10.0
    pickup_sigma_hours: float = 1.0
    duration_mean_hours: float = 9.0
    duration_min_hours: float = 7.0
    duration_max_hours: float = 11.0
    duration_sigma_hours: float = 1.0
    distance_mean_km: float = 35.0
    distance_min_km: float = 30.0
    distance_max_km: float = 40.0
    distance_sigma_km: float = 2.5


@dataclass(frozen=True)
class ForecasterSection:
    hidden_units: int = 50
    dense_units: str = "64,32"
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 75
    model_file: str = ""  # empty -> oracle load (no forecaster)


@dataclass(frozen=True)
class SimulationSection:
    scenario: str = "A"
    initial_soc_fraction: float = 0.60
    initial_age_days: float = 60.0
    rng_seed: int = 1
    mismatch_tolerance_kwh: float = 0.0
    temperature_celsius: float = 15.0
    slack_penalty_eur_per_pp: float = 10.0
    load_csv_paths: str = ""  # comma separated; empty -> synthetic
    load_multiplier: float = 1.0
    synthetic_load_kind: str = "two_peak"
    synthetic_load_mean_kwh: float = 0.9
    solver_multi_start: int = 2
    solver_freeze_denominators: bool = True


@dataclass(frozen=True)
class AppConfig:
    battery: BatterySection = field(default_factory=BatterySection)
    economics: EconomicsSection = field(default_factory=EconomicsSection)
    tariff: TariffSection = field(default_factory=TariffSection)
    trips: TripsSection = field(default_factory=TripsSection)
    forecaster: ForecasterSection = field(default_factory=ForecasterSection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, path_text: str) -> Path:
        p = Path(path_text)
        return p if p.is_absolute() else self.base_dir / p


_SECTION_TYPES = {
    "battery": BatterySection,
    "economics": EconomicsSection,
    "tariff": TariffSection,
    "trips": TripsSection,
    "forecaster": ForecasterSection,
    "simulation": SimulationSection,
}


def load_config(path: str | Path | None = None) -> AppConfig:
    """Parse a run configuration; unknown sections or keys are rejected.

    With no path, returns the defaults (every paper constant is a dataclass
    default, so a bare `AppConfig()` reproduces the published setup with
    synthetic data sources).
    """
    if path is None:
        return AppConfig()
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not cp.read(path):
        raise ValidationError(f"config file not found: {path}")

    kwargs = {}
    for section in cp.sections():
        if section not in _SECTION_TYPES:
            raise ValidationError(f"{path}: unknown section [{section}]")
        cls = _SECTION_TYPES[section]
        defaults = cls()
        values = {}
        for key in cp[section]:
            if not hasattr(defaults, key):
                raise ValidationError(f"{path}: unknown key {key!r} in [{section}]")
            current = getattr(defaults, key)
            if isinstance(current, bool):
                values[key] = cp[section].getboolean(key)
            elif isinstance(current, int):
                values[key] = cp[section].getint(key)
            elif isinstance(current, float):
                values[key] = cp[section].getfloat(key)
            else:
                values[key] = cp[section].get(key)
        kwargs[section] = replace(defaults, **values)
    return AppConfig(base_dir=path.parent.resolve(), **kwargs)
