"""Degradation model unit tests: interpolation, stress factors, step
bookkeeping, economics and the parameter-file loader."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evhome import battery
from evhome.battery import (BatteryEconomics, DegradationState,
                            VehicleBatterySpec)
from evhome.errors import DomainError, ValidationError

T15C = 288.15


def knot_value(params, soc):
    idx = np.where(params.anode_soc_knots == soc)[0]
    assert idx.size == 1
    return params.anode_potential_v[idx[0]]


class TestCurves:
    def test_anode_potential_at_knot(self, params):
        assert battery.anode_potential(0.10, params) == knot_value(params, 0.10)

    def test_anode_potential_midpoint_is_mean(self, params):
        lo = battery.anode_potential(0.30, params)
        hi = battery.anode_potential(0.35, params)
        mid = battery.anode_potential(0.325, params)
        assert mid == pytest.approx((lo + hi) / 2.0, rel=1e-12)

    def test_anode_potential_reference_point(self, params):
        # the transcribed table pins the reference potential at 50% SoC
        assert battery.anode_potential(0.5, params) == pytest.approx(
            params.u_a_ref, abs=1e-12)

    @pytest.mark.parametrize("soc", [-0.01, 1.01, 2.0])
    def test_soc_domain_errors(self, soc, params):
        with pytest.raises(DomainError):
            battery.anode_potential(soc, params)
        with pytest.raises(DomainError):
            battery.pack_ocv(soc, params)

    def test_ocv_monotone(self, params):
        socs = np.linspace(0, 1, 101)
        v = [battery.pack_ocv(s, params) for s in socs]
        assert np.all(np.diff(v) >= 0)

    def test_step_voltage_identical_endpoints(self, params):
        assert battery.step_voltage(0.4, 0.4, params) == battery.pack_ocv(0.4, params)

    def test_step_voltage_mean_of_lookups(self, params):
        expected = (battery.pack_ocv(0.2, params)
                    + battery.pack_ocv(0.8, params)) / 2.0
        assert battery.step_voltage(0.2, 0.8, params) == pytest.approx(
            expected, rel=1e-14)

    def test_step_voltage_flat_region(self, params):
        # interior of one segment: both endpoints interpolate the same line
        v1 = battery.step_voltage(0.41, 0.44, params)
        v2 = battery.pack_ocv(0.425, params)
        assert v1 == pytest.approx(v2, rel=1e-12)


class TestCalendarStress:
    def test_reference_collapse(self, params, consts):
        # at T_ref and the SoC whose anode potential equals the reference,
        # both exponents vanish
        k = battery.calendar_stress(params.t_ref, 0.5, params, consts)
        assert k == pytest.approx(params.k_cal_ref * (1.0 + params.k_0),
                                  rel=1e-12)

    def test_formula_at_t_ref(self, params, consts):
        soc = 0.73
        u_a = battery.anode_potential(soc, params)
        expected = params.k_cal_ref * (
            math.exp(params.alpha * consts.faraday_constant / consts.gas_constant
                     * (params.u_a_ref - u_a) / params.t_ref) + params.k_0)
        assert battery.calendar_stress(params.t_ref, soc, params, consts) \
            == pytest.approx(expected, rel=1e-12)

    def test_arrhenius_monotone_in_temperature(self, params, consts):
        temps = np.linspace(273.0, 320.0, 25)
        ks = [battery.calendar_stress(t, 0.6, params, consts) for t in temps]
        assert np.all(np.diff(ks) > 0)

    def test_nonpositive_temperature_rejected(self, params, consts):
        with pytest.raises(DomainError):
            battery.calendar_stress(0.0, 0.5, params, consts)


class TestCalendarStep:
    def test_unit_case(self, params, consts):
        # age 0 + 1 h lands on the t floor: increment K/2
        state = DegradationState(age_hours=0.0)
        k = battery.calendar_stress(T15C, 0.5, params, consts)
        inc = battery.calendar_step(state, T15C, 0.5, 1.0, params, consts)
        assert inc == pytest.approx(k / 2.0, rel=1e-12)

    def test_sqrt_shrink_when_age_doubles(self, params, consts):
        s1 = DegradationState(age_hours=99.0)
        s2 = DegradationState(age_hours=199.0)
        i1 = battery.calendar_step(s1, T15C, 0.5, 1.0, params, consts)
        i2 = battery.calendar_step(s2, T15C, 0.5, 1.0, params, consts)
        assert i2 / i1 == pytest.approx(1.0 / math.sqrt(2.0), rel=1e-12)

    def test_trace_matches_closed_form(self, params, consts):
        # 100 h at constant conditions from the standard 60-day initial age
        t0 = 60.0 * 24.0
        k = battery.calendar_stress(T15C, 0.5, params, consts)
        state = DegradationState(age_hours=t0)
        total = 0.0
        for _ in range(100):
            total += battery.calendar_step(state, T15C, 0.5, 1.0, params, consts)
            state = DegradationState(age_hours=state.age_hours + 1.0)
        closed = k * (math.sqrt(t0 + 100.0) - math.sqrt(t0))
        assert total == pytest.approx(closed, rel=0.02)


class TestCycleHighTemp:
    def test_zero_throughput(self, params, consts):
        state = DegradationState()
        assert battery.cycle_ht_step(state, T15C, 0.0, params, consts) == 0.0

    def test_reference_collapse(self, params, consts):
        k = battery.cycle_ht_stress(params.t_ref, params, consts)
        assert k == pytest.approx(params.k_cyc_ht_ref, rel=1e-12)

    def test_negative_throughput_rejected(self, params, consts):
        with pytest.raises(DomainError):
            battery.cycle_ht_step(DegradationState(), T15C, -1.0, params, consts)

    def test_trace_matches_sqrt_law(self, params, consts):
        # constant-current trace on an in-service pack
        q0, dq = 1000.0, 25.0
        k = battery.cycle_ht_stress(T15C, params, consts)
        state = DegradationState(q_tot=q0)
        total = 0.0
        for _ in range(100):
            total += battery.cycle_ht_step(state, T15C, dq, params, consts)
            state = DegradationState(q_tot=state.q_tot + dq)
        closed = k * (math.sqrt(q0 + 100 * dq) - math.sqrt(q0))
        assert total == pytest.approx(closed, rel=0.02)


class TestCycleLowTemp:
    def test_zero_charge(self, params, consts, pack_spec):
        state = DegradationState()
        assert battery.cycle_lt_step(state, T15C, 0.0, 1.0, params, consts,
                                     pack_spec.nominal_capacity_ah) == 0.0

    def test_reference_collapse(self, params, consts, pack_spec):
        k = battery.cycle_lt_stress(params.t_ref, params.i_ch_ref, params,
                                    consts, pack_spec.nominal_capacity_ah)
        assert k == pytest.approx(params.k_cyc_lt_ref, rel=1e-12)

    def test_current_rate_dependence(self, params, consts, pack_spec):
        c0 = pack_spec.nominal_capacity_ah
        k_hi = battery.cycle_lt_stress(T15C, params.i_ch_ref + 30.0, params,
                                       consts, c0)
        k_ref = battery.cycle_lt_stress(T15C, params.i_ch_ref, params, consts, c0)
        expected = k_ref * math.exp(params.beta_lt * 30.0 / c0)
        assert k_hi == pytest.approx(expected, rel=1e-12)
        assert k_hi > k_ref

    def test_colder_is_worse(self, params, consts, pack_spec):
        # negative activation energy: stress grows as temperature drops
        c0 = pack_spec.nominal_capacity_ah
        temps = np.linspace(273.0, 320.0, 20)
        ks = [battery.cycle_lt_stress(t, params.i_ch_ref, params, consts, c0)
              for t in temps]
        assert np.all(np.diff(ks) < 0)


class TestCycleLowTempHighSoc:
    def test_gate_closed_below_threshold(self, params, consts, pack_spec):
        state = DegradationState()
        for soc in np.linspace(0.0, params.soc_ref - 1e-9, 40):
            inc = battery.cycle_lt_hsoc_step(
                state, T15C, 10.0, 1.0, soc, params, consts,
                pack_spec.nominal_capacity_ah)
            assert inc == 0.0

    def test_reference_collapse_above_threshold(self, params, consts, pack_spec):
        state = DegradationState()
        dq = 5.0
        inc = battery.cycle_lt_hsoc_step(
            state, params.t_ref, dq, dq / params.i_ch_ref, 0.95, params,
            consts, pack_spec.nominal_capacity_ah)
        assert inc == pytest.approx(params.k_cyc_lt_hsoc_ref * dq, rel=1e-12)

    def test_half_gate_at_threshold(self, params, consts, pack_spec):
        state = DegradationState()
        kwargs = dict(params=params, consts=consts,
                      c0_ah=pack_spec.nominal_capacity_ah)
        at = battery.cycle_lt_hsoc_step(state, T15C, 5.0, 1.0,
                                        params.soc_ref, **kwargs)
        above = battery.cycle_lt_hsoc_step(state, T15C, 5.0, 1.0, 0.99, **kwargs)
        # same current; only the gate differs
        assert at == pytest.approx(above / 2.0, rel=1e-12)


class TestTotalStep:
    def test_idle_battery_only_calendar(self, params, consts, pack_spec):
        state = DegradationState(age_hours=1440.0, q_tot=100.0, q_ch=50.0)
        new, bd = battery.total_degradation_step(
            state, T15C, 0.6, 0.6, 0.0, 0.0, 1.0, pack_spec, params, consts)
        assert bd == pytest.approx(new.bd_cal - state.bd_cal, rel=1e-12)
        assert new.bd_cyc_ht == state.bd_cyc_ht
        assert new.q_tot == state.q_tot
        assert new.age_hours == state.age_hours + 1.0

    def test_pure_discharge_bookkeeping(self, params, consts, pack_spec):
        state = DegradationState(age_hours=1440.0, q_tot=100.0, q_ch=50.0)
        new, _ = battery.total_degradation_step(
            state, T15C, 0.6, 0.55, 0.0, 3.0, 1.0, pack_spec, params, consts)
        assert new.q_ch == state.q_ch
        assert new.q_tot > state.q_tot

    def test_charge_ah_conversion_at_400v(self, params, consts, pack_spec):
        # V(0.5) = 400.0 by construction of the packaged table
        state = DegradationState(age_hours=1440.0)
        new, _ = battery.total_degradation_step(
            state, T15C, 0.5, 0.5, 1.0, 0.0, 1.0, pack_spec, params, consts)
        assert new.q_ch - state.q_ch == pytest.approx(2.5, rel=1e-12)
        assert new.q_tot - state.q_tot == pytest.approx(2.5, rel=1e-12)

    def test_negative_energy_rejected(self, params, consts, pack_spec):
        with pytest.raises(DomainError):
            battery.total_degradation_step(
                DegradationState(), T15C, 0.5, 0.5, -1.0, 0.0, 1.0,
                pack_spec, params, consts)

    @settings(max_examples=60, deadline=None)
    @given(soc_prev=st.floats(0.0, 1.0), soc_now=st.floats(0.0, 1.0),
           e_in=st.floats(0.0, 11.0), e_out=st.floats(0.0, 11.0))
    def test_monotone_state_properties(self, soc_prev, soc_now, e_in, e_out,
                                       params, consts, pack_spec):
        state = DegradationState(age_hours=1440.0, q_tot=500.0, q_ch=250.0)
        new, bd = battery.total_degradation_step(
            state, T15C, soc_prev, soc_now, e_in, e_out, 1.0,
            pack_spec, params, consts)
        assert bd >= 0.0
        assert new.age_hours >= state.age_hours
        assert new.q_tot >= state.q_tot
        assert new.q_ch >= state.q_ch
        assert new.q_ch <= new.q_tot + 1e-9
        assert new.bd_total >= state.bd_total


class TestEconomics:
    def test_net_value_no_discount_no_residual(self, pack_spec):
        econ = BatteryEconomics(100.0, 0.0, 0.0, 10.0)
        assert battery.net_value(econ, pack_spec) == pytest.approx(
            100.0 * 82.0, rel=1e-12)

    def test_net_value_paper_constants(self, economics, pack_spec):
        nv = battery.net_value(economics, pack_spec)
        assert nv == pytest.approx(2467.5, abs=0.1)

    def test_full_residual_rejected_and_limit(self, pack_spec):
        with pytest.raises(DomainError):
            BatteryEconomics(100.0, 1.0, 0.1, 10.0)
        almost = BatteryEconomics(100.0, 1.0 - 1e-9, 0.1, 10.0)
        assert battery.net_value(almost, pack_spec) == pytest.approx(0.0, abs=1e-4)

    def test_battery_cost_zero(self):
        assert battery.battery_cost(0.0, 2467.5, 0.8) == 0.0

    def test_battery_cost_full_life(self):
        # consuming the whole 20-point usable window costs the net value
        assert battery.battery_cost(20.0, 1234.0, 0.8) == pytest.approx(1234.0)

    def test_battery_cost_example(self, economics, pack_spec):
        nv = battery.net_value(economics, pack_spec)
        assert battery.battery_cost(5.42, nv, 0.8) == pytest.approx(668.7, abs=0.1)


class TestTypesValidation:
    def test_state_rejects_negative(self):
        with pytest.raises(DomainError):
            DegradationState(age_hours=-1.0)

    def test_state_rejects_qch_above_qtot(self):
        with pytest.raises(DomainError):
            DegradationState(q_tot=1.0, q_ch=2.0)

    def test_spec_rejects_inconsistent_c0(self):
        with pytest.raises(DomainError):
            VehicleBatterySpec(82.0, 150.0, 400.0, 514.0, 11.0, 0.8)

    def test_spec_rejects_bad_eol(self):
        with pytest.raises(DomainError):
            VehicleBatterySpec(82.0, 205.0, 400.0, 514.0, 11.0, 1.0)


class TestParamLoader:
    def test_packaged_params_load(self, params):
        assert params.t_ref == pytest.approx(298.15)
        assert len(params.ocv_soc_knots) >= 21
        assert len(params.anode_soc_knots) >= 21

    def test_unknown_key_rejected(self, tmp_path, params):
        from importlib import resources
        text = (resources.files("evhome") / "params"
                / "lfp_degradation.ini").read_text()
        bad = text.replace("[degradation]",
                           "[degradation]\nmystery_knob = 1.0")
        path = tmp_path / "bad.ini"
        path.write_text(bad)
        with pytest.raises(ValidationError, match="unknown keys"):
            battery.load_degradation_params(path)

    def test_missing_key_rejected(self, tmp_path):
        from importlib import resources
        text = (resources.files("evhome") / "params"
                / "lfp_degradation.ini").read_text()
        bad = text.replace("alpha_unitless = 0.384\n", "")
        path = tmp_path / "bad.ini"
        path.write_text(bad)
        with pytest.raises(ValidationError, match="missing keys"):
            battery.load_degradation_params(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            battery.load_degradation_params(tmp_path / "nope.ini")

    def test_nonmonotone_ocv_rejected(self, tmp_path):
        from importlib import resources
        text = (resources.files("evhome") / "params"
                / "lfp_degradation.ini").read_text()
        bad = text.replace("0.50 400.0", "0.50 380.0")
        path = tmp_path / "bad.ini"
        path.write_text(bad)
        with pytest.raises(ValidationError, match="nondecreasing"):
            battery.load_degradation_params(path)
