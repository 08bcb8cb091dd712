import numpy as np
import pytest

from app.core.errors import ContractViolation, PreconditionError
from app.models.schemas import BatteryPack, RPM_TO_RAD, VehicleParams
from app.sim.powertrain import (
    battery_step,
    check_pack_energy,
    clip_action,
    em_power_demand,
    fuel_economy_mpg,
    genset_output,
    power_balance,
    road_load_force,
)


def test_pack_energy_matches_rating():
    pack = BatteryPack()
    assert pack.nominal_energy_kwh == pytest.approx(323.94, rel=1e-3)
    assert check_pack_energy(pack)


class TestRoadLoad:
    def test_standstill_has_no_resistance(self):
        assert road_load_force(0.0, 0.0, 0.0, VehicleParams()) == 0.0

    def test_cruise_is_rolling_plus_drag(self):
        p = VehicleParams()
        v = 20.0
        expected = p.mass * p.gravity * p.rolling_coeff + 0.5 * p.air_density * p.drag_coeff * p.frontal_area * v ** 2
        assert road_load_force(v, 0.0, 0.0, p) == pytest.approx(expected, rel=1e-12)

    def test_arrays_broadcast(self):
        f = road_load_force(np.array([0.0, 5.0, 10.0]), np.zeros(3), np.zeros(3), VehicleParams())
        assert f.shape == (3,)
        assert np.all(np.diff(f) > 0)

    def test_negative_speed(self):
        with pytest.raises(PreconditionError):
            road_load_force(-1.0, 0.0, 0.0, VehicleParams())


class TestEmDemand:
    def test_zero_at_rest(self, model):
        demand = em_power_demand(0.0, 0.0, 0.0, model)
        assert demand.p_em_elec == 0.0
        assert demand.feasible

    def test_traction_draws_more_than_wheel_power(self, model):
        demand = em_power_demand(10.0, 0.5, 0.0, model)
        p_wheel = road_load_force(10.0, 0.5, 0.0, model.vehicle) * 10.0
        assert demand.p_em_elec > p_wheel

    def test_regeneration_returns_less(self, model):
        demand = em_power_demand(10.0, -0.5, 0.0, model)
        p_wheel = road_load_force(10.0, -0.5, 0.0, model.vehicle) * 10.0
        assert p_wheel < demand.p_em_elec < 0

    def test_beyond_envelope_is_flagged(self, model):
        demand = em_power_demand(25.0, 3.0, 0.0, model)
        assert not demand.feasible


class TestGenset:
    def test_engine_off(self, model):
        out = genset_output(0.0, 0.0, model)
        assert out.p_elec == 0.0 and out.fuel_rate == 0.0

    def test_idle_burns_fuel_without_output(self, model):
        out = genset_output(800.0, 0.0, model)
        assert out.p_elec == 0.0
        assert out.fuel_rate > 0.0

    def test_output_below_shaft_power(self, model):
        out = genset_output(1500.0, 900.0, model)
        shaft = 1500.0 * RPM_TO_RAD * 900.0
        assert 0.0 < out.p_elec < shaft

    def test_unclipped_point_is_a_contract_violation(self, model):
        with pytest.raises(ContractViolation):
            genset_output(-10.0, 100.0, model)


class TestClip:
    def test_inside_limits_is_unchanged(self, model):
        assert clip_action(1200.0, 500.0, model) == (1200.0, 500.0)

    def test_clamps_speed_and_torque(self, model):
        omega, torque = clip_action(5000.0, 5000.0, model)
        assert omega == model.genset_speed_max
        assert torque == pytest.approx(model.genset_max_torque(omega))

    def test_negative_commands_floor_at_zero(self, model):
        assert clip_action(-5.0, -5.0, model) == (0.0, 0.0)


class TestBattery:
    def test_zero_power_keeps_soc(self):
        step = battery_step(0.5, 0.0, 1.0, BatteryPack())
        assert step.soc_next == 0.5
        assert step.i_batt == 0.0

    def test_discharge_and_charge_directions(self):
        pack = BatteryPack()
        assert battery_step(0.5, 50e3, 1.0, pack).soc_next < 0.5
        assert battery_step(0.5, -50e3, 1.0, pack).soc_next > 0.5

    def test_current_solves_the_circuit(self):
        pack = BatteryPack()
        p = 120e3
        step = battery_step(0.6, p, 1.0, pack)
        voc = pack.pack_ocv(0.6)
        assert step.i_batt * voc - step.i_batt ** 2 * pack.pack_resistance == pytest.approx(p, rel=1e-10)

    def test_power_beyond_limit_is_capped_and_flagged(self):
        pack = BatteryPack()
        p_max = pack.pack_ocv(0.5) ** 2 / (4 * pack.pack_resistance)
        step = battery_step(0.5, 2 * p_max, 1.0, pack)
        assert step.p_limit_violation
        assert step.i_batt == pytest.approx(pack.pack_ocv(0.5) / (2 * pack.pack_resistance))

    def test_soc_outside_range(self):
        with pytest.raises(PreconditionError):
            battery_step(1.2, 0.0, 1.0, BatteryPack())


def test_power_balance_closes_bus():
    assert power_balance(100e3, 5e3, 60e3) == 45e3


class TestFuelEconomy:
    def test_unit_chain(self):
        assert fuel_economy_mpg(1609.344, 3218.0) == pytest.approx(0.9998, abs=1e-4)

    def test_doubling_fuel_halves_mpg(self):
        assert fuel_economy_mpg(5000.0, 2000.0) == pytest.approx(2 * fuel_economy_mpg(5000.0, 4000.0), rel=1e-12)

    def test_zero_fuel_is_infinite(self):
        assert fuel_economy_mpg(1000.0, 0.0) == float("inf")
