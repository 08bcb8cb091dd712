"""
Episode environment around the powertrain model.

State is (SOC, cumulative distance, EM electrical demand); the action is the
genset operating point (engine speed, engine torque). Agents work in the
normalized [-1, 1] space; use normalize_obs / denormalize_action at the edge.
"""

import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from app.core.errors import ConfigError, PreconditionError, UsageError
from app.models.schemas import EpisodeSettings, RewardWeights
from app.sim.cycles import DriveCycle, cycle_distance, repeat_cycle
from app.sim.powertrain import (
    PowertrainModel,
    battery_step,
    clip_action,
    em_power_demand,
    fuel_economy_mpg,
    genset_output,
    power_balance,
)

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["step", "v", "soc", "p_em", "omega", "torque", "fuel_g", "p_batt", "reward", "done",
                 "i_batt", "soc_next"]


class EnvObservation(NamedTuple):
    soc: float
    distance: float
    p_em: float


class EnvAction(NamedTuple):
    omega: float   # rpm
    torque: float  # Nm


# --- Reward ---

def soc_shaping(soc_pct: float, w: RewardWeights) -> float:
    if soc_pct < w.soc_low:
        return -w.w_soc_low * (w.soc_low - soc_pct)
    if soc_pct <= w.soc_good_hi:
        return w.w_soc_good * (soc_pct - w.soc_low)
    if soc_pct <= w.soc_high:
        return 0.0
    return -w.w_soc_high * (soc_pct - w.soc_high)


def reward_fn(fuel_g: float, soc: float, soc_init: float, w: RewardWeights) -> float:
    """Fuel penalty weighted by the squared initial SOC plus SOC shaping in percent units."""
    if not (0.0 <= soc <= 1.0 and 0.0 <= soc_init <= 1.0):
        raise PreconditionError("reward_fn needs soc and soc_init in [0, 1]")
    return -w.w_fuel * fuel_g * soc_init ** 2 + soc_shaping(100.0 * soc, w)


# --- Normalization ---

@dataclass(frozen=True)
class NormalizationBounds:
    soc: Tuple[float, float] = (0.0, 1.0)
    distance: Tuple[float, float] = (0.0, 1.0)
    p_em: Tuple[float, float] = (-600e3, 600e3)  # EM rating x max demand scale
    omega: Tuple[float, float] = (0.0, 2300.0)
    torque: Tuple[float, float] = (0.0, 1500.0)

    def __post_init__(self):
        for name in ("soc", "distance", "p_em", "omega", "torque"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
                raise ConfigError(f"normalization bounds must satisfy lo < hi, got {lo}, {hi}", field=name)

    def with_distance(self, total: float) -> "NormalizationBounds":
        return NormalizationBounds(self.soc, (0.0, max(total, 1.0)), self.p_em, self.omega, self.torque)


def _to_unit(x, lo, hi):
    return np.clip(2.0 * (np.asarray(x, dtype=float) - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def _from_unit(u, lo, hi):
    return lo + (np.asarray(u, dtype=float) + 1.0) * 0.5 * (hi - lo)


def normalize_obs(obs: EnvObservation, bounds: NormalizationBounds) -> np.ndarray:
    return np.array([
        _to_unit(obs.soc, *bounds.soc),
        _to_unit(obs.distance, *bounds.distance),
        _to_unit(obs.p_em, *bounds.p_em),
    ])


def denormalize_obs(x, bounds: NormalizationBounds) -> EnvObservation:
    return EnvObservation(float(_from_unit(x[0], *bounds.soc)), float(_from_unit(x[1], *bounds.distance)),
                          float(_from_unit(x[2], *bounds.p_em)))


def normalize_action(action: EnvAction, bounds: NormalizationBounds) -> np.ndarray:
    return np.array([_to_unit(action.omega, *bounds.omega), _to_unit(action.torque, *bounds.torque)])


def denormalize_action(u, bounds: NormalizationBounds) -> EnvAction:
    u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
    return EnvAction(float(_from_unit(u[0], *bounds.omega)), float(_from_unit(u[1], *bounds.torque)))


# --- Episodes ---

@dataclass(frozen=True)
class EpisodeConfig:
    cycle: DriveCycle
    initial_soc_choices: Tuple[float, ...] = (0.85, 0.75, 0.65, 0.55, 0.45)
    repetitions: int = 1
    randomize_cycles: Optional[Tuple[int, int]] = None
    demand_scale_range: Optional[Tuple[float, float]] = None
    reward: RewardWeights = field(default_factory=RewardWeights)
    seed: int = 1

    @classmethod
    def from_settings(cls, cycle: DriveCycle, settings: EpisodeSettings, seed: int = 1) -> "EpisodeConfig":
        return cls(cycle=cycle, initial_soc_choices=tuple(settings.initial_soc_choices),
                   repetitions=settings.repetitions, randomize_cycles=settings.randomize_cycles,
                   demand_scale_range=settings.demand_scale_range, reward=settings.reward, seed=seed)

    def fixed_soc(self, soc: float) -> "EpisodeConfig":
        """Same episode settings with a single initial SOC (evaluation, DP traces)."""
        return EpisodeConfig(self.cycle, (soc,), self.repetitions, self.randomize_cycles,
                             self.demand_scale_range, self.reward, self.seed)


@dataclass(frozen=True)
class StepRecord:
    step: int
    v: float
    soc: float        # at the start of the step
    p_em: float
    omega: float
    torque: float
    fuel_g: float
    p_batt: float
    reward: float
    done: bool
    i_batt: float
    soc_next: float
    failed: bool = False
    em_feasible: bool = True
    p_limit_violation: bool = False
    bus_residual: float = 0.0


@dataclass(frozen=True)
class EpisodeSummary:
    steps: int
    fuel_g: float
    distance_m: float
    mpg: float
    initial_soc: float
    final_soc: float
    mean_reward: float
    failed: bool


class ShevEnv:
    """Single-threaded episode state over one PowertrainModel."""

    def __init__(self, model: PowertrainModel, cfg: EpisodeConfig, bounds: NormalizationBounds | None = None):
        self.model = model
        self.cfg = cfg
        self.base_bounds = bounds or NormalizationBounds()
        self.bounds = self.base_bounds
        self._rng = np.random.default_rng(cfg.seed)
        self._done = True
        self.records: List[StepRecord] = []

    # episode draws
    def _draw(self, rng: np.random.Generator) -> Tuple[float, int, float]:
        choices = self.cfg.initial_soc_choices
        if len(choices) == 0:
            raise ConfigError("initial SOC choice list is empty", field="episode.initial_soc_choices")
        soc = float(choices[int(rng.integers(len(choices)))])
        reps = self.cfg.repetitions
        if self.cfg.randomize_cycles is not None:
            lo, hi = self.cfg.randomize_cycles
            reps = int(rng.integers(lo, hi + 1))
        scale = 1.0
        if self.cfg.demand_scale_range is not None:
            scale = float(rng.uniform(*self.cfg.demand_scale_range))
        return soc, reps, scale

    def reset(self, rng: np.random.Generator | None = None) -> EnvObservation:
        self.soc_init, self.repetitions, self.demand_scale = self._draw(rng if rng is not None else self._rng)
        self.cycle = repeat_cycle(self.cfg.cycle, self.repetitions)
        demand = em_power_demand(self.cycle.velocity, self.cycle.acceleration(), self.cycle.grade, self.model)
        self.p_em = np.atleast_1d(demand.p_em_elec) * self.demand_scale
        self.em_feasible = np.atleast_1d(demand.feasible)
        self.total_distance = cycle_distance(self.cycle)
        self.bounds = self.base_bounds.with_distance(self.total_distance)

        self.t = 0
        self.soc = self.soc_init
        self.distance = 0.0
        self.records = []
        self._done = False
        logger.debug("reset: soc=%.2f reps=%d scale=%.3f steps=%d", self.soc, self.repetitions,
                     self.demand_scale, len(self.cycle))
        return self.observation()

    def observation(self) -> EnvObservation:
        p_em = float(self.p_em[self.t]) if self.t < len(self.p_em) else 0.0
        return EnvObservation(self.soc, self.distance, p_em)

    @property
    def done(self) -> bool:
        return self._done

    def step(self, action: EnvAction) -> Tuple[EnvObservation, float, bool, StepRecord]:
        if self._done:
            raise UsageError("step() called on a finished episode; call reset() first")
        model, t, dt = self.model, self.t, self.cycle.dt
        omega, torque = clip_action(action.omega, action.torque, model)
        p_gen, fuel_rate = genset_output(omega, torque, model)
        p_em = float(self.p_em[t])
        p_batt = power_balance(p_em, model.vehicle.aux_power, p_gen)
        batt = battery_step(self.soc, p_batt, dt, model.battery)

        fuel_g = float(fuel_rate) * dt
        failed = bool(batt.soc_next <= 0.0 or batt.soc_next >= 1.0)
        soc_next = float(np.clip(batt.soc_next, 0.0, 1.0))
        reward = reward_fn(fuel_g, soc_next, self.soc_init, self.cfg.reward)
        self.distance += float(self.cycle.velocity[t]) * dt
        self.t += 1
        self._done = failed or self.t >= len(self.cycle)

        record = StepRecord(
            step=t, v=float(self.cycle.velocity[t]), soc=self.soc, p_em=p_em, omega=float(omega),
            torque=float(torque), fuel_g=fuel_g, p_batt=float(p_batt), reward=reward, done=self._done,
            i_batt=float(batt.i_batt), soc_next=soc_next, failed=failed,
            em_feasible=bool(self.em_feasible[t]), p_limit_violation=bool(batt.p_limit_violation),
            bus_residual=p_em + model.vehicle.aux_power - float(p_gen) - float(p_batt),
        )
        self.records.append(record)
        self.soc = soc_next
        if failed:
            logger.warning("SOC left (0, 1) at step %d (soc=%.4f); episode terminated", t, batt.soc_next)
        return self.observation(), reward, self._done, record

    def step_normalized(self, u) -> Tuple[EnvObservation, float, bool, StepRecord]:
        return self.step(denormalize_action(u, self.bounds))

    def normalized_observation(self) -> np.ndarray:
        return normalize_obs(self.observation(), self.bounds)


# --- Traces and summaries ---

def trace_frame(records: List[StepRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(r) for r in records], columns=list(StepRecord.__dataclass_fields__))
    return frame


def write_trace(records: List[StepRecord], path: str | os.PathLike) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    frame = trace_frame(records)[TRACE_COLUMNS]
    frame["done"] = frame["done"].astype(int)
    frame.to_csv(p, index=False, float_format="%.17g")
    return p


def read_trace(path: str | os.PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def summarize_episode(records: List[StepRecord], model: PowertrainModel, dt: float = 1.0) -> EpisodeSummary:
    if not records:
        raise UsageError("cannot summarize an empty episode")
    fuel = float(sum(r.fuel_g for r in records))
    distance = float(sum(r.v for r in records) * dt)
    mpg = fuel_economy_mpg(distance, fuel, model.fuel_density) if distance > 0 else 0.0
    return EpisodeSummary(
        steps=len(records), fuel_g=fuel, distance_m=distance, mpg=mpg,
        initial_soc=records[0].soc, final_soc=records[-1].soc_next,
        mean_reward=float(np.mean([r.reward for r in records])),
        failed=any(r.failed for r in records),
    )


def summary_text(summary: EpisodeSummary) -> str:
    """Structured key: value record written next to each trace."""
    return "\n".join(f"{k}: {v!r}" for k, v in asdict(summary).items()) + "\n"
