"""Pydantic parameter and configuration models.

Every tunable number in the workbench lives on one of these models so it can
be overridden from an experiment config file (see app/core/config.py) and
snapshotted next to the run that used it.
"""

from typing import Literal, Optional, Tuple, List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Family = Literal["FFN", "GRU", "DT"]

# Actor-critic pairings the trainer knows how to wire together.
SUPPORTED_PAIRINGS = {
    ("FFN", "FFN"),
    ("GRU", "FFN"),
    ("GRU", "GRU"),
    ("DT", "GRU"),
    ("DT", "DT"),
}

RPM_TO_RAD = 2.0 * np.pi / 60.0


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# --- Physics parameters ---

class VehicleParams(_Frozen):
    mass: float = Field(36287.0, gt=0, description="Curb weight, kg")
    wheel_radius: float = Field(0.507, gt=0, description="Wheel radius, m")
    frontal_area: float = Field(8.48, gt=0, description="Frontal area, m^2")
    drag_coeff: float = Field(0.60, gt=0, description="Aerodynamic drag coefficient")
    rolling_coeff: float = Field(0.007, gt=0, lt=0.1, description="Rolling resistance coefficient")
    air_density: float = Field(1.225, gt=0, description="Air density, kg/m^3")
    gravity: float = Field(9.81, gt=0, description="Gravitational acceleration, m/s^2")
    final_drive_ratio: float = Field(5.0, gt=0, description="EM-to-wheel reduction ratio")
    driveline_eff: float = Field(0.97, gt=0, le=1, description="Driveline efficiency fraction")
    aux_power: float = Field(5000.0, ge=0, description="Constant auxiliary (hotel) electrical load, W")


class BatteryPack(_Frozen):
    cells_series: int = Field(160, gt=0, description="Cells in series")
    cells_parallel: int = Field(115, gt=0, description="Cells in parallel")
    cell_capacity: float = Field(4.85, gt=0, description="Cell capacity, Ah")
    cell_rated_voltage: float = Field(3.63, gt=0, description="Cell rated voltage, V")
    cell_resistance: float = Field(0.0015, gt=0, description="Cell series resistance, ohm")
    ocv_offset: float = Field(3.45, gt=0, description="Cell open-circuit voltage at SOC 0, V")
    ocv_slope: float = Field(0.36, ge=0, description="Cell OCV rise from SOC 0 to SOC 1, V")
    soc_min: float = Field(0.0, ge=0, le=1, description="Lower SOC bound (fraction)")
    soc_max: float = Field(1.0, ge=0, le=1, description="Upper SOC bound (fraction)")

    @property
    def pack_resistance(self) -> float:
        return self.cell_resistance * self.cells_series / self.cells_parallel

    @property
    def capacity_ah(self) -> float:
        return self.cell_capacity * self.cells_parallel

    @property
    def nominal_energy_kwh(self) -> float:
        return self.cells_series * self.cells_parallel * self.cell_rated_voltage * self.cell_capacity / 1000.0

    def ocv(self, soc):
        """Per-cell open-circuit voltage; accepts scalars or arrays."""
        return self.ocv_offset + self.ocv_slope * soc

    def pack_ocv(self, soc):
        return self.cells_series * self.ocv(soc)


class RewardWeights(_Frozen):
    w_fuel: float = Field(5.0, gt=0, description="Fuel penalty weight")
    w_soc_low: float = Field(15.0, gt=0, description="Penalty weight per SOC point below soc_low")
    w_soc_good: float = Field(2.5, gt=0, description="Bonus weight per SOC point inside [soc_low, soc_good_hi]")
    w_soc_high: float = Field(10.0, gt=0, description="Penalty weight per SOC point above soc_high")
    soc_low: float = Field(15.0, description="Low SOC threshold, percent")
    soc_good_hi: float = Field(18.0, description="Upper edge of the rewarded SOC band, percent")
    soc_high: float = Field(85.0, description="High SOC threshold, percent")

    @model_validator(mode="after")
    def _ordered(self):
        if not (0 < self.soc_low < self.soc_good_hi < self.soc_high < 100):
            raise ValueError("reward thresholds must satisfy 0 < soc_low < soc_good_hi < soc_high < 100")
        return self


# --- Episode / agent / training configuration ---

class EpisodeSettings(_Frozen):
    initial_soc_choices: List[float] = Field(
        default_factory=lambda: [0.85, 0.75, 0.65, 0.55, 0.45],
        description="Initial SOC fractions drawn uniformly at reset")
    repetitions: int = Field(1, ge=1, description="Cycle repetitions per episode when not randomized")
    randomize_cycles: Optional[Tuple[int, int]] = Field(
        None, description="Inclusive repetition range drawn per episode, e.g. '1, 10'; none disables")
    demand_scale_range: Optional[Tuple[float, float]] = Field(
        None, description="Uniform EM demand multiplier range, e.g. '0.5, 1.5'; none means fixed 1.0")
    reward: RewardWeights = Field(default_factory=RewardWeights)

    @field_validator("initial_soc_choices")
    @classmethod
    def _choices_inside(cls, v):
        if any(not (0.0 < s < 1.0) for s in v):
            raise ValueError("initial SOC choices must lie strictly inside (0, 1)")
        return v

    @field_validator("randomize_cycles")
    @classmethod
    def _rep_range(cls, v):
        if v is not None and not (1 <= v[0] <= v[1]):
            raise ValueError("randomize_cycles must be an ascending range of positive integers")
        return v

    @field_validator("demand_scale_range")
    @classmethod
    def _scale_range(cls, v):
        if v is not None and not (0.0 < v[0] <= v[1]):
            raise ValueError("demand_scale_range must be an ascending positive interval")
        return v


class NetConfig(_Frozen):
    family: Family = "FFN"
    hidden_width: int = Field(128, gt=0)
    depth: Optional[int] = Field(None, ge=1, description="Hidden layers (FFN), GRU layers, or DT blocks")
    attention_heads: int = Field(4, ge=1)
    context_k: int = Field(1, ge=1)
    input_dim: int = Field(3, ge=1)
    output_dim: int = Field(2, ge=1)
    ff_mult: int = Field(4, ge=1, description="DT feedforward expansion factor")
    max_timestep: int = Field(10000, ge=1, description="Size of the DT timestep embedding table")

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.family == "DT" and self.hidden_width % self.attention_heads:
            raise ValueError("attention_heads must divide hidden_width")
        return self

    @property
    def layers(self) -> int:
        if self.depth is not None:
            return self.depth
        return 1 if self.family == "DT" else 2


class AgentSpec(_Frozen):
    actor: Family = Field("FFN", description="Actor family: FFN, GRU or DT")
    critic: Family = Field("FFN", description="Critic family: FFN, GRU or DT")
    context_k: int = Field(1, ge=1, description="Sequence length k for GRU/DT inputs and replay windows")
    hidden_width: int = Field(128, gt=0, description="Hidden width of every network")
    attention_heads: int = Field(4, ge=1, description="Attention heads (DT only)")
    persistent_hidden: bool = Field(False, description="GRU actor carries its hidden state across steps")
    init_checkpoint: Optional[str] = Field(None, description="Checkpoint to warm-start from (continues numbering)")

    @model_validator(mode="after")
    def _pairing(self):
        if (self.actor, self.critic) not in SUPPORTED_PAIRINGS:
            raise ValueError(f"unsupported actor/critic pairing {self.actor}-{self.critic}")
        return self

    @property
    def label(self) -> str:
        return f"{self.actor}-{self.critic}"

    @property
    def is_sequential(self) -> bool:
        return self.actor != "FFN" or self.critic != "FFN"


TRAIN_FREQ = {"FFN": 5, "GRU": 25, "DT": 50}


class SacConfig(_Frozen):
    lr: float = Field(1e-4, gt=0, description="Adam learning rate for actor, critics and temperature")
    adam_betas: Tuple[float, float] = Field((0.9, 0.999), description="Adam beta1, beta2")
    adam_eps: float = Field(1e-8, gt=0, description="Adam epsilon")
    batch_size: int = Field(64, ge=1, description="Minibatch size (transitions or windows)")
    gamma: float = Field(0.99, gt=0, lt=1, description="Discount factor")
    tau: float = Field(0.005, gt=0, le=1, description="Soft target update rate")
    target_entropy: float = Field(-2.0, description="Entropy target for the temperature update")
    initial_log_alpha: float = Field(0.0, description="Initial log temperature")
    buffer_capacity: int = Field(1_000_000, ge=1, description="Replay capacity in timesteps")
    grad_clip: Optional[float] = Field(None, gt=0, description="Global-norm clip; none uses 0.25 for GRU nets only")
    train_freq: Optional[int] = Field(None, ge=1, description="Env steps per update round; none uses 5/25/50 by actor")
    updates_per_round: int = Field(1, ge=1, description="Gradient updates per round")
    warmup_steps: int = Field(1000, ge=0, description="Uniform random actions before learning")
    reward_scale: float = Field(0.01, gt=0, description="Multiplier applied to rewards/returns fed to networks")
    sampling: Literal["random", "sequential"] = Field("random", description="FFN replay: single transitions or windows")
    learn: bool = Field(True, description="Disable to collect rollouts without updates")
    dt_target_return: Optional[float] = Field(None, description="DT initial return-to-go; none uses running best")
    moving_average_window: int = Field(10, ge=1, description="Episodes in the reward moving average")

    def resolved_train_freq(self, actor: str) -> int:
        return self.train_freq if self.train_freq is not None else TRAIN_FREQ[actor]

    def resolved_grad_clip(self, family: str) -> Optional[float]:
        if self.grad_clip is not None:
            return self.grad_clip
        return 0.25 if family == "GRU" else None


class DpConfig(_Frozen):
    soc_points: int = Field(401, ge=2, description="SOC grid nodes over [0, 1]")
    omega_points: int = Field(13, ge=1, description="Engine speed grid nodes over [0, omega_max]")
    torque_points: int = Field(13, ge=1, description="Engine torque grid nodes over [0, torque_max]")
    omega_max: float = Field(2300.0, gt=0, description="Top of the speed grid, rpm")
    torque_max: float = Field(1500.0, gt=0, description="Top of the torque grid, Nm")
    soc_grid: Optional[List[float]] = Field(None, description="Explicit SOC nodes (overrides soc_points)")
    omega_grid: Optional[List[float]] = Field(None, description="Explicit speed nodes, rpm")
    torque_grid: Optional[List[float]] = Field(None, description="Explicit torque nodes, Nm")
    terminal_soc: Tuple[float, float] = Field((0.15, 0.18), description="Terminal SOC window")
    infeasible_cost: Optional[float] = Field(None, gt=0, description="Sentinel cost; none uses 100x max fuel")
    interpolation: Literal["linear", "nearest"] = Field("linear", description="Value lookup between SOC nodes")

    @field_validator("soc_grid", "omega_grid", "torque_grid")
    @classmethod
    def _ascending(cls, v):
        if v is not None and (len(v) < 1 or any(b <= a for a, b in zip(v, v[1:]))):
            raise ValueError("grids must be strictly ascending")
        return v

    @field_validator("terminal_soc")
    @classmethod
    def _terminal_inside(cls, v):
        if not (0.0 < v[0] <= v[1] < 1.0):
            raise ValueError("terminal_soc must be an interval inside (0, 1)")
        return v

    def soc_nodes(self) -> np.ndarray:
        if self.soc_grid is not None:
            return np.asarray(self.soc_grid, dtype=float)
        return np.linspace(0.0, 1.0, self.soc_points)

    def omega_nodes(self) -> np.ndarray:
        if self.omega_grid is not None:
            return np.asarray(self.omega_grid, dtype=float)
        return np.linspace(0.0, self.omega_max, self.omega_points)

    def torque_nodes(self) -> np.ndarray:
        if self.torque_grid is not None:
            return np.asarray(self.torque_grid, dtype=float)
        return np.linspace(0.0, self.torque_max, self.torque_points)


class CycleSource(_Frozen):
    path: Optional[str] = Field(None, description="Two-column trace file; none uses the synthetic generator")
    unit: Literal["mps", "mph", "kph"] = Field("mps", description="Velocity unit of the trace file")
    kind: Literal["trapezoid", "sinusoid", "constant"] = Field("trapezoid", description="Synthetic cycle shape")
    duration: float = Field(60.0, ge=2, description="Synthetic cycle duration, s")
    v_peak: float = Field(8.0, ge=0, description="Synthetic peak velocity, m/s")
    seed: int = Field(1, description="Synthetic cycle seed")
    repetitions: int = Field(1, ge=1, description="Repetitions applied when the cycle is built")


class ExperimentSection(_Frozen):
    name: str = Field("experiment", description="Run name (also the registry key)")
    seed: int = Field(1, description="Master random seed")
    episodes: int = Field(100, ge=0, description="Training episode budget")
    out_dir: str = Field("runs/experiment", description="Output directory for logs, checkpoints, traces")
    maps_dir: Optional[str] = Field(None, description="Load component maps from an emitted map directory")


class ExperimentConfig(_Frozen):
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    cycle: CycleSource = Field(default_factory=CycleSource)
    agent: AgentSpec = Field(default_factory=AgentSpec)
    sac: SacConfig = Field(default_factory=SacConfig)
    episode: EpisodeSettings = Field(default_factory=EpisodeSettings)
    vehicle: VehicleParams = Field(default_factory=VehicleParams)
    battery: BatteryPack = Field(default_factory=BatteryPack)
    dp: DpConfig = Field(default_factory=DpConfig)
