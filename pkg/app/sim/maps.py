"""
Synthesized component maps.

The real engine, generator and EM maps are proprietary, so the default model
builds them from the published ratings: an efficiency bump peaking at each
component's rated point, turned into an engine fuel map by the Willans
relation fuel = T*w / (eta * LHV). All absolute fuel numbers are therefore
relative to these maps.
"""

import json
import logging
import os
from pathlib import Path
from typing import List, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from app.models.schemas import BatteryPack, VehicleParams, RPM_TO_RAD
from app.sim.powertrain import ComponentMap, PowertrainModel

logger = logging.getLogger(__name__)


class ComponentRatings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    engine_power_max: float = 270e3
    engine_power_speed: float = 2300.0
    engine_torque_max: float = 1500.0
    engine_torque_band: Tuple[float, float] = (1120.0, 1480.0)
    engine_low_speed_torque_frac: float = 0.6
    engine_peak: Tuple[float, float, float] = (1300.0, 1200.0, 0.42)  # rpm, Nm, eta
    engine_eta_floor: float = 0.25
    idle_fuel_per_rpm: float = 1.0e-3  # g/s per rpm at zero torque

    gen_power_max: float = 240e3
    gen_power_speed: float = 2200.0
    gen_torque_max: float = 1410.0
    gen_torque_speed: float = 1300.0
    gen_speed_max: float = 2517.0
    gen_peak_eta: float = 0.95
    gen_eta_floor: float = 0.75

    em_power_max: float = 400e3
    em_power_speed: float = 2000.0
    em_torque_max: float = 3500.0
    em_speed_max: float = 3900.0
    em_peak_eta: float = 0.93
    em_eta_floor: float = 0.70

    fuel_lhv: float = 42.5e6


class MapMetadata(BaseModel):
    """Sidecar written next to each emitted map grid."""
    name: str
    kind: str
    speed_max: float
    power_max: float
    curve_speed_rpm: List[float]
    curve_torque_nm: List[float]
    ratings: dict = Field(default_factory=dict)


def efficiency_bump(omega, torque, peak: Tuple[float, float], peak_eta: float, floor: float,
                    span: Tuple[float, float]) -> np.ndarray:
    """Smooth bump equal to peak_eta at the rated point and never below floor."""
    x = (np.asarray(omega, dtype=float) - peak[0]) / span[0]
    y = (np.asarray(torque, dtype=float) - peak[1]) / span[1]
    return floor + (peak_eta - floor) * np.exp(-(x ** 2 + y ** 2))


def _constant_power(p: float, w0: float, w1: float, n: int = 12) -> Tuple[np.ndarray, np.ndarray]:
    speeds = np.linspace(w0, w1, n)
    return speeds, p / (speeds * RPM_TO_RAD)


def engine_torque_curve(r: ComponentRatings) -> Tuple[np.ndarray, np.ndarray]:
    lo, hi = r.engine_torque_band
    t_rated = r.engine_power_max / (r.engine_power_speed * RPM_TO_RAD)
    speeds = np.array([0.0, lo, hi, r.engine_power_speed])
    torques = np.array([r.engine_low_speed_torque_frac * r.engine_torque_max,
                        r.engine_torque_max, r.engine_torque_max, t_rated])
    return speeds, torques


def generator_torque_curve(r: ComponentRatings) -> Tuple[np.ndarray, np.ndarray]:
    cp_speed, cp_torque = _constant_power(r.gen_power_max, r.gen_power_speed, r.gen_speed_max)
    speeds = np.concatenate([[0.0, r.gen_torque_speed], cp_speed])
    torques = np.concatenate([[r.gen_torque_max, r.gen_torque_max], cp_torque])
    return speeds, torques


def em_torque_curve(r: ComponentRatings) -> Tuple[np.ndarray, np.ndarray]:
    base = r.em_power_max / (r.em_torque_max * RPM_TO_RAD)
    cp_speed, cp_torque = _constant_power(r.em_power_max, base, r.em_speed_max, n=24)
    return np.concatenate([[0.0], cp_speed]), np.concatenate([[r.em_torque_max], cp_torque])


def build_default_maps(ratings: ComponentRatings | None = None,
                       vehicle: VehicleParams | None = None,
                       battery: BatteryPack | None = None) -> PowertrainModel:
    r = ratings or ComponentRatings()

    # Engine: fuel map by the Willans construction
    e_speed = np.arange(0.0, r.engine_power_speed + 1.0, 100.0)
    e_torque = np.arange(0.0, r.engine_torque_max + 1.0, 50.0)
    W, T = np.meshgrid(e_speed, e_torque, indexing="ij")
    eta_e = efficiency_bump(W, T, r.engine_peak[:2], r.engine_peak[2], r.engine_eta_floor,
                            (r.engine_power_speed / 2, r.engine_torque_max / 2))
    fuel = T * W * RPM_TO_RAD / (eta_e * r.fuel_lhv) * 1000.0
    fuel[:, 0] = r.idle_fuel_per_rpm * e_speed
    # never below idle along a speed row
    fuel = np.maximum(fuel, fuel[:, :1])
    fuel[0, :] = 0.0
    cs, ct = engine_torque_curve(r)
    engine = ComponentMap("engine_fuel", "fuel", e_speed, e_torque, fuel, cs, ct,
                          speed_max=r.engine_power_speed, power_max=r.engine_power_max)

    # Generator: efficiency bump at its rated torque point
    g_speed = np.union1d(np.arange(0.0, r.gen_speed_max, 100.0), [r.gen_speed_max])
    g_torque = np.union1d(np.arange(0.0, r.engine_torque_max + 1.0, 50.0), [r.gen_torque_max])
    W, T = np.meshgrid(g_speed, g_torque, indexing="ij")
    eta_g = efficiency_bump(W, T, (r.gen_torque_speed, r.gen_torque_max), r.gen_peak_eta, r.gen_eta_floor,
                            (r.gen_speed_max / 2, r.gen_torque_max / 2))
    cs, ct = generator_torque_curve(r)
    generator = ComponentMap("generator_eff", "efficiency", g_speed, g_torque, eta_g, cs, ct,
                             speed_max=r.gen_speed_max, power_max=r.gen_power_max)

    # EM: efficiency bump at the max-power point
    m_speed = np.arange(0.0, r.em_speed_max + 1.0, 100.0)
    m_torque = np.arange(0.0, r.em_torque_max + 1.0, 100.0)
    W, T = np.meshgrid(m_speed, m_torque, indexing="ij")
    em_peak = (r.em_power_speed, r.em_power_max / (r.em_power_speed * RPM_TO_RAD))
    eta_m = efficiency_bump(W, T, em_peak, r.em_peak_eta, r.em_eta_floor,
                            (r.em_speed_max / 2, r.em_torque_max / 2))
    cs, ct = em_torque_curve(r)
    em = ComponentMap("em_eff", "efficiency", m_speed, m_torque, eta_m, cs, ct,
                      speed_max=r.em_speed_max, power_max=r.em_power_max)

    return PowertrainModel(vehicle=vehicle or VehicleParams(), engine_fuel=engine, generator_eff=generator,
                           em_eff=em, battery=battery or BatteryPack(), fuel_lhv=r.fuel_lhv)


# --- Map files ---

def emit_maps(model: PowertrainModel, out_dir: str | os.PathLike) -> List[Path]:
    """
    Write each map as a CSV grid (first row torque axis, first column speed
    axis) plus a JSON sidecar with the max-torque curve and ratings.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for cmap in (model.engine_fuel, model.generator_eff, model.em_eff):
        grid = pd.DataFrame(cmap.values, index=pd.Index(cmap.speed_axis, name="rpm"),
                            columns=[repr(float(t)) for t in cmap.torque_axis])
        grid_path = out / f"{cmap.name}.csv"
        grid.to_csv(grid_path)
        meta = MapMetadata(name=cmap.name, kind=cmap.kind, speed_max=cmap.speed_max, power_max=cmap.power_max,
                           curve_speed_rpm=cmap.curve_speed.tolist(), curve_torque_nm=cmap.curve_torque.tolist())
        meta_path = out / f"{cmap.name}.json"
        meta_path.write_text(meta.model_dump_json(indent=2))
        written += [grid_path, meta_path]
    logger.info("Emitted %d map files to %s", len(written), out)
    return written


def load_map(grid_path: str | os.PathLike, meta_path: str | os.PathLike) -> ComponentMap:
    grid = pd.read_csv(grid_path, index_col=0, float_precision="round_trip")
    meta = MapMetadata.model_validate(json.loads(Path(meta_path).read_text()))
    return ComponentMap(meta.name, meta.kind, grid.index.to_numpy(dtype=float),
                        np.array([float(c) for c in grid.columns]), grid.to_numpy(dtype=float),
                        meta.curve_speed_rpm, meta.curve_torque_nm, meta.speed_max, meta.power_max)


def load_maps(map_dir: str | os.PathLike, vehicle: VehicleParams | None = None,
              battery: BatteryPack | None = None, fuel_lhv: float = 42.5e6) -> PowertrainModel:
    d = Path(map_dir)
    maps = {name: load_map(d / f"{name}.csv", d / f"{name}.json")
            for name in ("engine_fuel", "generator_eff", "em_eff")}
    return PowertrainModel(vehicle=vehicle or VehicleParams(), engine_fuel=maps["engine_fuel"],
                           generator_eff=maps["generator_eff"], em_eff=maps["em_eff"],
                           battery=battery or BatteryPack(), fuel_lhv=fuel_lhv)
