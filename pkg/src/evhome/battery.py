"""Empirical LiFePO4 pack degradation model and battery economics.

Capacity fade is split into calendar aging (sqrt-of-time law driven by
temperature and the anode open-circuit potential) and three cycle-aging
mechanisms: high temperature (sqrt of total Ah throughput), low temperature
(sqrt of charge Ah throughput, current-rate dependent) and low temperature
at high state of charge (linear in charge throughput, gated above a SoC
threshold).  All rate constants live in a parameter file shipped with the
package; the code never hard-codes them.

Degradation bookkeeping is done in percent of initial capacity.  Step
functions are pure: they take a :class:`DegradationState` and return the
increment (and, for the combined step, a new state), so parameter objects
can be shared freely across concurrent simulations.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DomainError, SingularityError, ValidationError

# Age floor (h) guarding the 1/sqrt(t) calendar term near t = 0.
MIN_AGE_HOURS = 1.0

# Expected keys of the [degradation] section of a parameter file.
_SCALAR_KEYS = (
    "k_cal_ref_percent_per_sqrt_hour",
    "activation_energy_cal_j_per_mol",
    "alpha_unitless",
    "anode_potential_ref_v",
    "k_zero_unitless",
    "temperature_ref_k",
    "k_cyc_high_temp_ref_percent_per_sqrt_ah",
    "activation_energy_cyc_high_temp_j_per_mol",
    "k_cyc_low_temp_ref_percent_per_sqrt_ah",
    "activation_energy_cyc_low_temp_j_per_mol",
    "beta_low_temp_unitless",
    "charge_current_ref_a",
    "k_cyc_low_temp_high_soc_ref_percent_per_ah",
    "activation_energy_cyc_low_temp_high_soc_j_per_mol",
    "beta_low_temp_high_soc_unitless",
    "soc_ref_fraction",
)


@dataclass(frozen=True)
class PhysicalConstants:
    """Universal constants used by the Arrhenius and Tafel-like terms."""

    gas_constant: float = 8.314462618  # J/(mol*K)
    faraday_constant: float = 96485.33212  # C/mol

    def __post_init__(self):
        if self.gas_constant <= 0 or self.faraday_constant <= 0:
            raise DomainError("physical constants must be strictly positive")


@dataclass(frozen=True)
class DegradationParams:
    """Rate constants and potential curves of the aging model.

    Curves are monotone piecewise-linear tables on soc in [0, 1]; the pack
    open-circuit voltage curve is scaled to the pack's nominal voltage.
    Rate constants are in percent capacity loss per sqrt-hour / sqrt-Ah / Ah.
    """

    k_cal_ref: float  # %/sqrt(h)
    e_a_cal: float  # J/mol
    alpha: float
    u_a_ref: float  # V
    k_0: float
    t_ref: float  # K
    k_cyc_ht_ref: float  # %/sqrt(Ah)
    e_a_cyc_ht: float  # J/mol
    k_cyc_lt_ref: float  # %/sqrt(Ah)
    e_a_cyc_lt: float  # J/mol
    beta_lt: float
    i_ch_ref: float  # A
    k_cyc_lt_hsoc_ref: float  # %/Ah
    e_a_cyc_lt_hsoc: float  # J/mol
    beta_lt_hsoc: float
    soc_ref: float  # fraction
    anode_soc_knots: np.ndarray
    anode_potential_v: np.ndarray
    ocv_soc_knots: np.ndarray
    ocv_pack_v: np.ndarray

    def __post_init__(self):
        for name in ("k_cal_ref", "k_cyc_ht_ref", "k_cyc_lt_ref", "k_cyc_lt_hsoc_ref"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        if self.t_ref <= 0:
            raise DomainError("t_ref must be > 0")
        for knots, values, label in (
            (self.anode_soc_knots, self.anode_potential_v, "anode_potential_curve"),
            (self.ocv_soc_knots, self.ocv_pack_v, "pack_ocv_curve"),
        ):
            if knots.ndim != 1 or knots.shape != values.shape or knots.size < 2:
                raise ValidationError(f"{label}: malformed knot table")
            if knots[0] != 0.0 or knots[-1] != 1.0 or np.any(np.diff(knots) <= 0):
                raise ValidationError(f"{label}: knots must increase from 0 to 1")
        if np.any(np.diff(self.ocv_pack_v) < 0):
            raise ValidationError("pack_ocv_curve must be nondecreasing in soc")


@dataclass(frozen=True)
class VehicleBatterySpec:
    """Pack-level ratings of the vehicle battery."""

    capacity_kwh: float
    nominal_capacity_ah: float
    nominal_voltage: float
    driving_range_km: float
    max_hourly_energy_kwh: float
    eol_fraction: float

    def __post_init__(self):
        if self.capacity_kwh <= 0 or self.max_hourly_energy_kwh <= 0:
            raise DomainError("capacity and max hourly energy must be > 0")
        if not 0.0 < self.eol_fraction < 1.0:
            raise DomainError("eol_fraction must be in (0, 1)")
        implied_c0 = self.capacity_kwh * 1000.0 / self.nominal_voltage
        if abs(implied_c0 - self.nominal_capacity_ah) > 0.02 * implied_c0:
            raise DomainError(
                f"nominal_capacity_ah {self.nominal_capacity_ah:.1f} inconsistent "
                f"with capacity/voltage ({implied_c0:.1f} Ah expected)"
            )


@dataclass(frozen=True)
class BatteryEconomics:
    """Replacement economics used to price capacity loss."""

    replacement_cost_per_kwh: float  # EUR/kWh
    residual_fraction: float
    discount_rate: float  # 1/yr
    nominal_life_years: float

    def __post_init__(self):
        if self.replacement_cost_per_kwh <= 0:
            raise DomainError("replacement cost must be > 0")
        if not 0.0 <= self.residual_fraction < 1.0:
            raise DomainError("residual_fraction must be in [0, 1)")
        if self.discount_rate < 0 or self.nominal_life_years <= 0:
            raise DomainError("discount rate must be >= 0 and life > 0")


@dataclass(frozen=True)
class DegradationState:
    """Cumulative age, throughputs and capacity-loss components.

    All fields are nonnegative and nondecreasing along a simulation; ``q_ch``
    never exceeds ``q_tot``.  Advanced only through the pure step functions.
    """

    age_hours: float = 0.0
    q_tot: float = 0.0  # Ah, charge + discharge
    q_ch: float = 0.0  # Ah, charge only
    bd_cal: float = 0.0  # %
    bd_cyc_ht: float = 0.0  # %
    bd_cyc_lt: float = 0.0  # %
    bd_cyc_lt_hsoc: float = 0.0  # %

    def __post_init__(self):
        fields = (self.age_hours, self.q_tot, self.q_ch, self.bd_cal,
                  self.bd_cyc_ht, self.bd_cyc_lt, self.bd_cyc_lt_hsoc)
        if any(v < 0 for v in fields):
            raise DomainError("degradation state fields must be nonnegative")
        if self.q_ch > self.q_tot + 1e-9:
            raise DomainError("q_ch cannot exceed q_tot")

    @property
    def bd_total(self) -> float:
        """Total capacity loss in percent."""
        return self.bd_cal + self.bd_cyc_ht + self.bd_cyc_lt + self.bd_cyc_lt_hsoc

    @property
    def bd_cyc(self) -> float:
        """Cycle-aging capacity loss in percent (all three mechanisms)."""
        return self.bd_cyc_ht + self.bd_cyc_lt + self.bd_cyc_lt_hsoc


def _check_soc(soc: float) -> None:
    if not 0.0 <= soc <= 1.0:
        raise DomainError(f"soc {soc} outside [0, 1]")


def anode_potential(soc: float, params: DegradationParams) -> float:
    """Anode open-circuit potential (V) at a given state of charge.

    Linear interpolation on the transcribed potential table.
    """
    _check_soc(soc)
    return float(np.interp(soc, params.anode_soc_knots, params.anode_potential_v))


def pack_ocv(soc: float, params: DegradationParams) -> float:
    """Pack open-circuit voltage (V) at a given state of charge."""
    _check_soc(soc)
    return float(np.interp(soc, params.ocv_soc_knots, params.ocv_pack_v))


def step_voltage(soc_prev: float, soc_now: float, params: DegradationParams) -> float:
    """Pack voltage over one step: mean of the endpoint open-circuit voltages."""
    return 0.5 * (pack_ocv(soc_prev, params) + pack_ocv(soc_now, params))


def _arrhenius(e_a: float, t_kelvin: float, t_ref: float, r_gas: float) -> float:
    return math.exp(-e_a / r_gas * (1.0 / t_kelvin - 1.0 / t_ref))


def calendar_stress(t_kelvin: float, soc: float, params: DegradationParams,
                    consts: PhysicalConstants) -> float:
    """Calendar stress factor (%/sqrt(h)) at temperature and SoC.

    Arrhenius in temperature; exponential in the anode-potential drop below
    its reference, plus a constant offset.  Strictly positive.
    """
    if t_kelvin <= 0:
        raise DomainError("temperature must be > 0 K")
    u_a = anode_potential(soc, params)
    temp_term = _arrhenius(params.e_a_cal, t_kelvin, params.t_ref, consts.gas_constant)
    soc_term = math.exp(
        params.alpha * consts.faraday_constant / consts.gas_constant
        * (params.u_a_ref - u_a) / params.t_ref
    ) + params.k_0
    return params.k_cal_ref * temp_term * soc_term


def calendar_step(state: DegradationState, t_kelvin: float, soc: float,
                  dt_hours: float, params: DegradationParams,
                  consts: PhysicalConstants) -> float:
    """Calendar capacity-loss increment (%) over one step.

    Uses the post-increment age in the 1/sqrt(t) term, floored at
    MIN_AGE_HOURS to avoid the t = 0 singularity.
    """
    if dt_hours < 0:
        raise DomainError("dt_hours must be >= 0")
    age = max(state.age_hours + dt_hours, MIN_AGE_HOURS)
    if age <= 0:
        raise SingularityError("calendar step at zero age")
    k_cal = calendar_stress(t_kelvin, soc, params, consts)
    return k_cal / (2.0 * math.sqrt(age)) * dt_hours


def cycle_ht_stress(t_kelvin: float, params: DegradationParams,
                    consts: PhysicalConstants) -> float:
    """High-temperature cycle stress factor (%/sqrt(Ah))."""
    if t_kelvin <= 0:
        raise DomainError("temperature must be > 0 K")
    return params.k_cyc_ht_ref * _arrhenius(
        params.e_a_cyc_ht, t_kelvin, params.t_ref, consts.gas_constant)


def cycle_ht_step(state: DegradationState, t_kelvin: float, dq_tot: float,
                  params: DegradationParams, consts: PhysicalConstants) -> float:
    """High-temperature cycle-aging increment (%) for dq_tot Ah of throughput.

    The sqrt denominator uses the post-increment cumulative throughput, so
    the very first Ah of a fresh battery is well defined.
    """
    if dq_tot < 0:
        raise DomainError("throughput increment must be >= 0")
    if dq_tot == 0.0:
        return 0.0
    q_tot = state.q_tot + dq_tot
    return cycle_ht_stress(t_kelvin, params, consts) / (2.0 * math.sqrt(q_tot)) * dq_tot


def cycle_lt_stress(t_kelvin: float, i_ch: float, params: DegradationParams,
                    consts: PhysicalConstants, c0_ah: float) -> float:
    """Low-temperature cycle stress factor (%/sqrt(Ah)) at a charge current."""
    if t_kelvin <= 0:
        raise DomainError("temperature must be > 0 K")
    rate_term = math.exp(params.beta_lt * (i_ch - params.i_ch_ref) / c0_ah)
    return params.k_cyc_lt_ref * _arrhenius(
        params.e_a_cyc_lt, t_kelvin, params.t_ref, consts.gas_constant) * rate_term


def cycle_lt_step(state: DegradationState, t_kelvin: float, dq_ch: float,
                  dt_hours: float, params: DegradationParams,
                  consts: PhysicalConstants, c0_ah: float) -> float:
    """Low-temperature cycle-aging increment (%): charging throughput only."""
    if dq_ch < 0:
        raise DomainError("charge throughput increment must be >= 0")
    if dq_ch == 0.0:
        return 0.0
    i_ch = dq_ch / dt_hours
    q_ch = state.q_ch + dq_ch
    k = cycle_lt_stress(t_kelvin, i_ch, params, consts, c0_ah)
    return k / (2.0 * math.sqrt(q_ch)) * dq_ch


def soc_gate(soc: float, soc_ref: float, smoothing_eps: float | None = None) -> float:
    """High-SoC gate: 0 below the threshold, 1 above, 1/2 at equality.

    With ``smoothing_eps`` set, the sign function is replaced by a logistic
    ramp of that width (used by the optimizer, which needs a derivative);
    accounting always uses the exact gate.
    """
    x = soc - soc_ref
    if smoothing_eps is None:
        return 0.5 * (float(np.sign(x)) + 1.0)
    return 1.0 / (1.0 + math.exp(-x / smoothing_eps))


def cycle_lt_hsoc_stress(t_kelvin: float, i_ch: float, soc: float,
                         params: DegradationParams, consts: PhysicalConstants,
                         c0_ah: float,
                         gate_smoothing_eps: float | None = None) -> float:
    """Low-temperature/high-SoC cycle stress factor (%/Ah), gated on SoC."""
    if t_kelvin <= 0:
        raise DomainError("temperature must be > 0 K")
    _check_soc(soc)
    rate_term = math.exp(params.beta_lt_hsoc * (i_ch - params.i_ch_ref) / c0_ah)
    gate = soc_gate(soc, params.soc_ref, gate_smoothing_eps)
    return params.k_cyc_lt_hsoc_ref * _arrhenius(
        params.e_a_cyc_lt_hsoc, t_kelvin, params.t_ref, consts.gas_constant
    ) * rate_term * gate


def cycle_lt_hsoc_step(state: DegradationState, t_kelvin: float, dq_ch: float,
                       dt_hours: float, soc: float, params: DegradationParams,
                       consts: PhysicalConstants, c0_ah: float,
                       gate_smoothing_eps: float | None = None) -> float:
    """Low-temperature/high-SoC cycle-aging increment (%), linear in dq_ch."""
    if dq_ch < 0:
        raise DomainError("charge throughput increment must be >= 0")
    if dq_ch == 0.0:
        return 0.0
    i_ch = dq_ch / dt_hours
    k = cycle_lt_hsoc_stress(t_kelvin, i_ch, soc, params, consts, c0_ah,
                             gate_smoothing_eps)
    return k * dq_ch


def total_degradation_step(
    state: DegradationState,
    t_kelvin: float,
    soc_prev: float,
    soc_now: float,
    e_in_kwh: float,
    e_out_kwh: float,
    dt_hours: float,
    spec: VehicleBatterySpec,
    params: DegradationParams,
    consts: PhysicalConstants,
    gate_smoothing_eps: float | None = None,
) -> tuple[DegradationState, float]:
    """One accounting step: all four mechanisms plus state bookkeeping.

    Energies (kWh, both >= 0) are converted to Ah through the step voltage.
    Returns the advanced state and the total capacity-loss increment (%).
    """
    if e_in_kwh < 0 or e_out_kwh < 0:
        raise DomainError("energy flows must be >= 0")
    voltage = step_voltage(soc_prev, soc_now, params)
    dq_ch = e_in_kwh * 1000.0 / voltage
    dq_tot = (e_in_kwh + e_out_kwh) * 1000.0 / voltage

    cal = calendar_step(state, t_kelvin, soc_now, dt_hours, params, consts)
    ht = cycle_ht_step(state, t_kelvin, dq_tot, params, consts)
    lt = cycle_lt_step(state, t_kelvin, dq_ch, dt_hours, params, consts,
                       spec.nominal_capacity_ah)
    lt_hsoc = cycle_lt_hsoc_step(state, t_kelvin, dq_ch, dt_hours, soc_now,
                                 params, consts, spec.nominal_capacity_ah,
                                 gate_smoothing_eps)

    new_state = replace(
        state,
        age_hours=state.age_hours + dt_hours,
        q_tot=state.q_tot + dq_tot,
        q_ch=state.q_ch + dq_ch,
        bd_cal=state.bd_cal + cal,
        bd_cyc_ht=state.bd_cyc_ht + ht,
        bd_cyc_lt=state.bd_cyc_lt + lt,
        bd_cyc_lt_hsoc=state.bd_cyc_lt_hsoc + lt_hsoc,
    )
    return new_state, cal + ht + lt + lt_hsoc


def net_value(econ: BatteryEconomics, spec: VehicleBatterySpec) -> float:
    """Discounted replacement-minus-residual value of the pack (EUR)."""
    c_rep = econ.replacement_cost_per_kwh * spec.capacity_kwh
    c_rv = econ.residual_fraction * c_rep
    discount = (1.0 + econ.discount_rate) ** econ.nominal_life_years
    return (c_rep - c_rv) / discount


def battery_cost(bd_percent: float, nv: float, eol_fraction: float) -> float:
    """Euro cost of a capacity-loss increment, prorated over usable life.

    ``bd_percent`` percent of loss consumes bd/(100 - EoL%) of the net value.
    """
    if bd_percent < 0:
        raise DomainError("bd_percent must be >= 0")
    usable_percent = 100.0 * (1.0 - eol_fraction)
    if usable_percent <= 0:
        raise DomainError("eol_fraction leaves no usable capacity window")
    return nv * bd_percent / usable_percent


def _parse_curve(raw: str, label: str) -> tuple[np.ndarray, np.ndarray]:
    socs, values = [], []
    for line in raw.strip().splitlines():
        parts = line.split()
        if len(parts) != 2:
            raise ValidationError(f"{label}: expected 'soc value' rows, got {line!r}")
        socs.append(float(parts[0]))
        values.append(float(parts[1]))
    return np.asarray(socs, dtype=float), np.asarray(values, dtype=float)


def load_degradation_params(path: str | Path | None = None) -> DegradationParams:
    """Load degradation parameters from an INI parameter file.

    With no path, loads the LiFePO4 parameter set shipped with the package.
    Unknown or missing keys (every key name carries its unit) are rejected.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is None:
        text = (resources.files("evhome") / "params" / "lfp_degradation.ini").read_text()
        cp.read_string(text)
        source = "<packaged lfp_degradation.ini>"
    else:
        read = cp.read(path)
        if not read:
            raise ValidationError(f"parameter file not found: {path}")
        source = str(path)

    for section in ("degradation", "anode_potential_curve", "pack_ocv_curve"):
        if not cp.has_section(section):
            raise ValidationError(f"{source}: missing [{section}] section")

    deg = cp["degradation"]
    unknown = set(deg) - set(_SCALAR_KEYS)
    if unknown:
        raise ValidationError(f"{source}: unknown keys {sorted(unknown)}")
    missing = set(_SCALAR_KEYS) - set(deg)
    if missing:
        raise ValidationError(f"{source}: missing keys {sorted(missing)}")

    anode_soc, anode_v = _parse_curve(cp["anode_potential_curve"]["soc_volt_rows"],
                                      "anode_potential_curve")
    ocv_soc, ocv_v = _parse_curve(cp["pack_ocv_curve"]["soc_volt_rows"],
                                  "pack_ocv_curve")

    return DegradationParams(
        k_cal_ref=deg.getfloat("k_cal_ref_percent_per_sqrt_hour"),
        e_a_cal=deg.getfloat("activation_energy_cal_j_per_mol"),
        alpha=deg.getfloat("alpha_unitless"),
        u_a_ref=deg.getfloat("anode_potential_ref_v"),
        k_0=deg.getfloat("k_zero_unitless"),
        t_ref=deg.getfloat("temperature_ref_k"),
        k_cyc_ht_ref=deg.getfloat("k_cyc_high_temp_ref_percent_per_sqrt_ah"),
        e_a_cyc_ht=deg.getfloat("activation_energy_cyc_high_temp_j_per_mol"),
        k_cyc_lt_ref=deg.getfloat("k_cyc_low_temp_ref_percent_per_sqrt_ah"),
        e_a_cyc_lt=deg.getfloat("activation_energy_cyc_low_temp_j_per_mol"),
        beta_lt=deg.getfloat("beta_low_temp_unitless"),
        i_ch_ref=deg.getfloat("charge_current_ref_a"),
        k_cyc_lt_hsoc_ref=deg.getfloat("k_cyc_low_temp_high_soc_ref_percent_per_ah"),
        e_a_cyc_lt_hsoc=deg.getfloat("activation_energy_cyc_low_temp_high_soc_j_per_mol"),
        beta_lt_hsoc=deg.getfloat("beta_low_temp_high_soc_unitless"),
        soc_ref=deg.getfloat("soc_ref_fraction"),
        anode_soc_knots=anode_soc,
        anode_potential_v=anode_v,
        ocv_soc_knots=ocv_soc,
        ocv_pack_v=ocv_v,
    )
