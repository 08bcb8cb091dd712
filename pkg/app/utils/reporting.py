# app/utils/reporting.py
"""Reward curves and DP-vs-agent comparison tables."""

import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd


def moving_average(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing mean; the first window-1 entries average what is available."""
    values = np.asarray(values, dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def rescale_0_100(values: Sequence[float], worst: float, best: float) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if best == worst:
        return np.full_like(values, 100.0)
    return 100.0 * (values - worst) / (best - worst)


def reward_curve(log: pd.DataFrame, window: int = 10) -> pd.DataFrame:
    curve = log[["episode", "mean_reward"]].copy()
    curve["moving_average"] = moving_average(curve["mean_reward"], window)
    return curve


def write_reward_curves(curves: Dict[str, pd.DataFrame], out_dir: str | os.PathLike) -> Tuple[List[Path], float, float]:
    """
    One CSV per arm with an extra 0-100 column. Anchors are the worst and best
    moving-average values over all arms and are printed in each file header.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    finished = [c["moving_average"] for c in curves.values() if len(c)]
    if not finished:
        return [], 0.0, 0.0
    worst = float(min(s.min() for s in finished))
    best = float(max(s.max() for s in finished))
    written = []
    for arm, curve in curves.items():
        frame = curve.copy()
        frame["normalized_0_100"] = rescale_0_100(frame["moving_average"], worst, best)
        path = out / f"reward_curve_{arm}.csv"
        with path.open("w", newline="") as fh:
            fh.write(f"# arm: {arm}\n")
            fh.write(f"# normalized_0_100 = 100 * (moving_average - {worst!r}) / ({best!r} - {worst!r})\n")
            frame.to_csv(fh, index=False)
        written.append(path)
    return written, worst, best


# --- Comparison tables ---

@dataclass(frozen=True)
class EvalRow:
    label: str
    soc_final_pct: float
    mpg: float


@dataclass(frozen=True)
class ReportRow:
    label: str
    soc_final_pct: float
    mpg: float
    delta_soc_pct: float | None = None
    delta_mpg_pct: float | None = None
    total_pct: float | None = None


def relative_delta(agent: float, reference: float) -> float:
    """100 * (agent - reference) / reference, rounded to two decimals."""
    return round(100.0 * (agent - reference) / reference, 2)


def total_delta(delta_soc: float, delta_mpg: float) -> float:
    """Signed sum of the two printed deltas."""
    return round(delta_soc + delta_mpg, 2)


def compare_rows(dp: EvalRow, agents: Sequence[EvalRow]) -> List[ReportRow]:
    rows = [ReportRow(dp.label, dp.soc_final_pct, dp.mpg)]
    for agent in agents:
        d_soc = relative_delta(agent.soc_final_pct, dp.soc_final_pct)
        d_mpg = relative_delta(agent.mpg, dp.mpg)
        rows.append(ReportRow(agent.label, agent.soc_final_pct, agent.mpg, d_soc, d_mpg, total_delta(d_soc, d_mpg)))
    return rows


def report_frame(rows: Sequence[ReportRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in rows])


def render_report(rows: Sequence[ReportRow], cycle_name: str = "") -> str:
    def fmt(x, signed=False):
        if x is None:
            return "-"
        return f"{x:+.2f}" if signed else f"{x:.2f}"

    header = f"{'':<12}{'SoC_f (%)':>12}{'MPG':>10}{'dSoC (%)':>12}{'dMPG (%)':>12}{'Total (%)':>12}"
    lines = [f"Cycle: {cycle_name}" if cycle_name else "", header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.label:<12}{fmt(r.soc_final_pct):>12}{fmt(r.mpg):>10}{fmt(r.delta_soc_pct, True):>12}"
                     f"{fmt(r.delta_mpg_pct, True):>12}{fmt(r.total_pct, True):>12}")
    return "\n".join(line for line in lines if line) + "\n"
