"""Drive cycles: loading user traces, repetition, and synthetic desk-scale cycles."""

import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from app.core.errors import CycleFormatError, CycleParseError, InvalidValueError

logger = logging.getLogger(__name__)

UNIT_TO_MPS = {"mps": 1.0, "mph": 0.44704, "kph": 1.0 / 3.6}
STEP_TOLERANCE = 1e-6


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DriveCycle:
    velocity: np.ndarray
    grade: np.ndarray = field(default=None)
    dt: float = 1.0
    name: str = "cycle"
    repetitions: int = 1

    def __post_init__(self):
        velocity = _frozen(self.velocity)
        grade = _frozen(np.zeros_like(velocity) if self.grade is None else self.grade)
        if velocity.ndim != 1 or velocity.shape != grade.shape:
            raise InvalidValueError("velocity and grade must be 1-D sequences of equal length")
        if len(velocity) < 2:
            raise InvalidValueError("a drive cycle needs at least 2 samples")
        if not self.dt > 0:
            raise InvalidValueError(f"dt must be positive, got {self.dt}")
        if np.any(velocity < 0):
            raise InvalidValueError(f"negative velocity at index {int(np.argmax(velocity < 0))}")
        if self.repetitions < 1:
            raise InvalidValueError("repetitions must be a positive integer")
        object.__setattr__(self, "velocity", velocity)
        object.__setattr__(self, "grade", grade)

    def __len__(self) -> int:
        return len(self.velocity)

    @property
    def duration(self) -> float:
        return len(self) * self.dt

    def acceleration(self) -> np.ndarray:
        """Forward-difference acceleration; the last sample holds zero."""
        accel = np.zeros_like(self.velocity)
        accel[:-1] = np.diff(self.velocity) / self.dt
        return accel

    def equals(self, other: "DriveCycle") -> bool:
        return (self.dt == other.dt and np.array_equal(self.velocity, other.velocity)
                and np.array_equal(self.grade, other.grade) and self.repetitions == other.repetitions)


def _read_rows(p: Path) -> pd.DataFrame:
    """Raw cells as stripped strings, indexed by 1-based file line; blank lines dropped."""
    try:
        frame = pd.read_csv(p, header=None, dtype=str, skip_blank_lines=False, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise CycleFormatError(f"{p}: a cycle needs at least two samples") from None
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+), saw (\d+)", str(e))
        if match is None:
            raise CycleFormatError(f"{p}: {e}") from None
        raise CycleParseError(f"expected 2 columns, found {match.group(2)}", int(match.group(1))) from None
    frame.index = frame.index + 1
    frame = frame.fillna("").apply(lambda col: col.str.strip())
    return frame[(frame != "").any(axis=1)]


def load_cycle(path: str | os.PathLike, unit: str = "mps") -> DriveCycle:
    """Read a two-column (time, velocity) trace; an optional header row is skipped."""
    if unit not in UNIT_TO_MPS:
        raise InvalidValueError(f"unknown velocity unit '{unit}'")
    p = Path(path)
    rows = _read_rows(p)
    if rows.shape[1] != 2:
        raise CycleParseError(f"expected 2 columns, found {rows.shape[1]}", int(rows.index[0]) if len(rows) else 1)
    bad = rows.apply(lambda col: pd.to_numeric(col, errors="coerce")).isna().any(axis=1)
    if len(rows) and bad.iloc[0] and rows.index[0] == 1:
        rows, bad = rows.iloc[1:], bad.iloc[1:]  # header
    if bad.any():
        line = int(bad.idxmax())
        raise CycleParseError(f"non-numeric value in {rows.loc[line].tolist()!r}", line)
    if len(rows) < 2:
        raise CycleFormatError(f"{p}: a cycle needs at least two samples")
    # object -> float goes through float(), exact for repr-written values
    values = rows.to_numpy(dtype=object).astype(float)
    times, speeds = values[:, 0], values[:, 1]
    if np.any(speeds < 0):
        i = int(np.argmax(speeds < 0))
        raise InvalidValueError(f"line {int(rows.index[i])}: negative velocity {speeds[i]}")
    steps = np.diff(times)
    dt = float(steps[0])
    if dt <= 0 or np.any(np.abs(steps - dt) > STEP_TOLERANCE):
        bad_step = int(np.argmax(np.abs(steps - dt) > STEP_TOLERANCE)) + 1
        raise CycleFormatError(f"{p}: time column is not strictly increasing at a uniform step (sample {bad_step})")
    cycle = DriveCycle(velocity=speeds * UNIT_TO_MPS[unit], dt=dt, name=p.stem)
    logger.debug("Loaded cycle '%s': %d samples at dt=%.3f s", cycle.name, len(cycle), dt)
    return cycle


def write_cycle(cycle: DriveCycle, path: str | os.PathLike) -> Path:
    """Write the trace in m/s at full precision so a reload is exact."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"t_s": np.arange(len(cycle)) * cycle.dt, "v": cycle.velocity})
    frame.to_csv(p, index=False, float_format="%.17g")
    return p


def repeat_cycle(cycle: DriveCycle, n: int) -> DriveCycle:
    if n < 1:
        raise InvalidValueError(f"repetition count must be >= 1, got {n}")
    if n == 1:
        return cycle
    return DriveCycle(
        velocity=np.tile(cycle.velocity, n),
        grade=np.tile(cycle.grade, n),
        dt=cycle.dt,
        name=cycle.name,
        repetitions=cycle.repetitions * n,
    )


def synth_cycle(kind: str, duration: float, v_peak: float, seed: int = 1, dt: float = 1.0) -> DriveCycle:
    """Deterministic synthetic cycle that starts and ends at rest and peaks at v_peak."""
    if duration < 2:
        raise InvalidValueError("synthetic cycles need duration >= 2 s")
    if v_peak < 0:
        raise InvalidValueError("v_peak must be non-negative")
    n = max(2, int(round(duration / dt)))
    rng = np.random.default_rng(seed)
    i = np.arange(n, dtype=float)
    last = n - 1

    if kind == "constant":
        shape = np.ones(n)
    elif kind == "trapezoid":
        ramp = max(1.0, np.floor(rng.uniform(0.2, 0.3) * last))
        shape = np.minimum(1.0, np.minimum(i / ramp, (last - i) / ramp))
    elif kind == "sinusoid":
        freq = rng.integers(2, 6)
        phase = rng.uniform(0, 2 * np.pi)
        shape = np.sin(np.pi * i / last) ** 2 * (1.0 + 0.3 * np.sin(2 * np.pi * freq * i / last + phase))
    else:
        raise InvalidValueError(f"unknown synthetic cycle kind '{kind}'")

    shape[0] = shape[-1] = 0.0
    peak = shape.max()
    velocity = np.zeros(n) if (v_peak == 0 or peak == 0) else v_peak * (shape / peak)
    return DriveCycle(velocity=velocity, dt=dt, name=f"{kind}-{int(duration)}s")


def cycle_distance(cycle: DriveCycle) -> float:
    """Left Riemann sum of velocity over the trace, metres."""
    return float(np.sum(cycle.velocity) * cycle.dt)


def resolve_cycle_ref(ref: str, unit: str = "mps") -> DriveCycle:
    """
    Cycle reference used on the command line: a file path or
    'synth:<kind>:<duration>:<v_peak>[:<seed>]', optionally suffixed with '*N'
    for N repetitions (e.g. 'us06.csv*21').
    """
    reps = 1
    if "*" in ref:
        ref, count = ref.rsplit("*", 1)
        try:
            reps = int(count)
        except ValueError:
            raise InvalidValueError(f"bad repetition suffix '*{count}'") from None
    if ref.startswith("synth:"):
        parts = ref.split(":")[1:]
        if len(parts) not in (3, 4):
            raise InvalidValueError(f"synthetic cycle reference needs kind:duration:v_peak[:seed], got '{ref}'")
        kind, duration, v_peak = parts[0], float(parts[1]), float(parts[2])
        seed = int(parts[3]) if len(parts) == 4 else 1
        cycle = synth_cycle(kind, duration, v_peak, seed)
    else:
        cycle = load_cycle(ref, unit)
    return repeat_cycle(cycle, reps)
