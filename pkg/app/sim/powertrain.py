"""
Series-HEV physics: road load, EM electrical demand, genset supply and fuel,
battery SOC dynamics and the operating-point constraints.

Every operation accepts scalars or numpy arrays and returns the same shape,
so the DP solver can evaluate whole grids with the code the environment uses.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from app.core.errors import ContractViolation, PreconditionError
from app.models.schemas import BatteryPack, VehicleParams, RPM_TO_RAD

logger = logging.getLogger(__name__)

M_PER_MILE = 1609.344
L_PER_GALLON = 3.78541


def _out(x):
    """Return python floats/bools for 0-d results, arrays otherwise."""
    x = np.asarray(x)
    return x.item() if x.ndim == 0 else x


@dataclass(frozen=True, eq=False)
class ComponentMap:
    """
    Gridded component map: fuel rate (g/s) for the engine, efficiency fraction
    for generator and EM. values[i, j] belongs to (speed_axis[i], torque_axis[j]).
    """
    name: str
    kind: str  # "fuel" or "efficiency"
    speed_axis: np.ndarray
    torque_axis: np.ndarray
    values: np.ndarray
    curve_speed: np.ndarray
    curve_torque: np.ndarray
    speed_max: float
    power_max: float

    def __post_init__(self):
        for name in ("speed_axis", "torque_axis", "values", "curve_speed", "curve_torque"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(np.diff(self.speed_axis) <= 0) or np.any(np.diff(self.torque_axis) <= 0):
            raise ContractViolation(f"{self.name}: grid axes must be strictly increasing")
        if self.values.shape != (len(self.speed_axis), len(self.torque_axis)):
            raise ContractViolation(f"{self.name}: values shape {self.values.shape} does not match the axes")
        if self.kind == "efficiency" and not np.all((self.values > 0) & (self.values < 1)):
            raise ContractViolation(f"{self.name}: efficiencies must lie in (0, 1)")
        if self.kind == "fuel" and np.any(self.values < 0):
            raise ContractViolation(f"{self.name}: fuel rates must be non-negative")
        object.__setattr__(self, "_interp", RegularGridInterpolator(
            (self.speed_axis, self.torque_axis), self.values, method="linear", bounds_error=True))

    def max_torque(self, omega_rpm):
        return _out(np.interp(omega_rpm, self.curve_speed, self.curve_torque))

    def __call__(self, omega_rpm, torque_nm):
        """Bilinear lookup; queries outside the grid are a contract violation."""
        w, t = np.broadcast_arrays(np.asarray(omega_rpm, dtype=float), np.asarray(torque_nm, dtype=float))
        try:
            result = self._interp(np.stack([w.ravel(), t.ravel()], axis=-1)).reshape(w.shape)
        except ValueError as e:
            raise ContractViolation(f"{self.name}: query outside the map grid ({e})") from None
        return _out(result)


@dataclass(frozen=True, eq=False)
class PowertrainModel:
    vehicle: VehicleParams
    engine_fuel: ComponentMap
    generator_eff: ComponentMap
    em_eff: ComponentMap
    battery: BatteryPack
    fuel_density: float = 0.85   # kg/L
    fuel_lhv: float = 42.5e6     # J/kg

    def __post_init__(self):
        # Rigid 1:1 shaft: the generator must turn wherever the engine can.
        if self.generator_eff.speed_max < self.engine_fuel.speed_max:
            raise ContractViolation("generator speed limit is below the engine operating range")

    @property
    def genset_speed_max(self) -> float:
        return min(self.engine_fuel.speed_max, self.generator_eff.speed_max)

    def genset_max_torque(self, omega_rpm):
        return _out(np.minimum(self.engine_fuel.max_torque(omega_rpm), self.generator_eff.max_torque(omega_rpm)))

    def with_vehicle(self, **updates) -> "PowertrainModel":
        return PowertrainModel(self.vehicle.model_copy(update=updates), self.engine_fuel, self.generator_eff,
                               self.em_eff, self.battery, self.fuel_density, self.fuel_lhv)

    def with_battery(self, **updates) -> "PowertrainModel":
        return PowertrainModel(self.vehicle, self.engine_fuel, self.generator_eff, self.em_eff,
                               self.battery.model_copy(update=updates), self.fuel_density, self.fuel_lhv)


# --- Operations ---

def road_load_force(v, accel, grade, p: VehicleParams):
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise PreconditionError("road_load_force needs v >= 0")
    grade = np.asarray(grade, dtype=float)
    inertia = p.mass * np.asarray(accel, dtype=float)
    rolling = p.mass * p.gravity * (p.rolling_coeff * np.cos(grade) + np.sin(grade)) * (v > 0)
    drag = 0.5 * p.air_density * p.drag_coeff * p.frontal_area * v ** 2
    return _out(inertia + rolling + drag)


class EmDemand(NamedTuple):
    p_em_elec: object
    feasible: object


def em_power_demand(v, accel, grade, model: PowertrainModel) -> EmDemand:
    """
    Electrical power the EM draws (positive) or returns (negative) to follow
    the trace. Traction beyond the EM envelope is clamped and reported as
    infeasible; regeneration beyond it goes to the friction brakes.
    """
    p = model.vehicle
    em = model.em_eff
    v = np.asarray(v, dtype=float)
    p_wheel = np.asarray(road_load_force(v, accel, grade, p)) * v
    p_mech = np.where(p_wheel > 0, p_wheel / p.driveline_eff, p_wheel * p.driveline_eff)

    w_rad = v / p.wheel_radius * p.final_drive_ratio
    rpm = w_rad / RPM_TO_RAD
    speed_ok = rpm <= em.speed_max

    t_limit = np.asarray(em.max_torque(np.minimum(rpm, em.speed_max)))
    p_limit = np.minimum(em.power_max, t_limit * w_rad)
    traction_ok = p_mech <= p_limit
    p_mech = np.clip(p_mech, -p_limit, p_limit)

    safe_w = np.where(w_rad > 0, w_rad, 1.0)
    torque = np.where(w_rad > 0, np.abs(p_mech) / safe_w, 0.0)
    eta = np.asarray(em(np.minimum(rpm, em.speed_axis[-1]), np.minimum(torque, em.torque_axis[-1])))
    p_elec = np.where(p_mech > 0, p_mech / eta, p_mech * eta)
    return EmDemand(_out(p_elec), _out(speed_ok & traction_ok))


class GensetOutput(NamedTuple):
    p_elec: object
    fuel_rate: object


def genset_output(omega, torque, model: PowertrainModel) -> GensetOutput:
    """Electrical output (W) and fuel rate (g/s) of the engine-generator pair."""
    w, t = np.broadcast_arrays(np.asarray(omega, dtype=float), np.asarray(torque, dtype=float))
    if np.any(w < 0) or np.any(t < 0):
        raise ContractViolation("genset_output needs clipped (non-negative) operating points")
    eta = np.asarray(model.generator_eff(w, t))
    fuel = np.asarray(model.engine_fuel(w, t))
    running = (w > 0) & (t > 0)
    p_elec = np.where(running, t * w * RPM_TO_RAD * eta, 0.0)
    fuel_rate = np.where(w > 0, fuel, 0.0)
    return GensetOutput(_out(p_elec), _out(fuel_rate))


class BatteryStep(NamedTuple):
    soc_next: object
    i_batt: object
    p_limit_violation: object


def battery_step(soc, p_batt, dt: float, pack: BatteryPack) -> BatteryStep:
    """
    Zeroth-order equivalent circuit: Voc(soc) behind a series resistance.
    Positive p_batt discharges. Power beyond Voc^2/4R is capped at that limit
    and flagged.
    """
    soc = np.asarray(soc, dtype=float)
    if np.any((soc < 0) | (soc > 1)):
        raise PreconditionError("battery_step needs soc in [0, 1]")
    p = np.asarray(p_batt, dtype=float)
    voc = pack.pack_ocv(soc)
    r = pack.pack_resistance
    p_max = voc ** 2 / (4 * r)
    violation = p > p_max
    p_eff = np.where(violation, p_max, p)
    disc = np.maximum(voc ** 2 - 4 * r * p_eff, 0.0)
    # i = (Voc - sqrt(disc)) / 2R, written without the cancellation
    current = 2 * p_eff / (voc + np.sqrt(disc))
    soc_next = soc - current * dt / (3600.0 * pack.capacity_ah)
    return BatteryStep(_out(soc_next), _out(current), _out(violation))


def clip_action(omega_cmd, torque_cmd, model: PowertrainModel):
    omega = np.clip(np.asarray(omega_cmd, dtype=float), 0.0, model.genset_speed_max)
    torque = np.clip(np.asarray(torque_cmd, dtype=float), 0.0, model.genset_max_torque(omega))
    return _out(omega), _out(torque)


def power_balance(p_em_elec, p_aux, p_genset):
    """Battery power that closes the electrical bus."""
    return p_em_elec + p_aux - p_genset


def fuel_economy_mpg(distance_m: float, fuel_g: float, fuel_density: float = 0.85) -> float:
    gallons = fuel_g / 1000.0 / fuel_density / L_PER_GALLON
    if gallons == 0:
        return float("inf")
    return (distance_m / M_PER_MILE) / gallons


def check_pack_energy(pack: BatteryPack, rated_kwh: float = 323.94, rel_tol: float = 1e-3) -> bool:
    return abs(pack.nominal_energy_kwh - rated_kwh) <= rel_tol * rated_kwh
