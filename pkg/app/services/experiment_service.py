# app/services/experiment_service.py
"""
Experiment orchestration behind the command line: training, evaluation, DP
baselines, comparison reports, ablation studies and map emission.

Every command writes its artifacts under an output directory and records a
summary in the run registry.
"""

import contextlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from app.agent.sac import SacAgent, rollout, train
from app.core import config as core_config
from app.core.config import database_url, load_experiment_config, write_config_snapshot
from app.core.database import get_db_session_for_context_manager
from app.core.errors import InfeasibleError, InvalidValueError
from app.crud import crud_run
from app.models.schemas import ExperimentConfig
from app.services.dp_solver import dp_solve, export_solution
from app.sim.cycles import DriveCycle, load_cycle, repeat_cycle, resolve_cycle_ref, synth_cycle
from app.sim.env import (
    EpisodeConfig,
    EpisodeSummary,
    ShevEnv,
    read_trace,
    summarize_episode,
    summary_text,
    write_trace,
)
from app.sim.maps import build_default_maps, emit_maps, load_maps
from app.sim.powertrain import PowertrainModel, em_power_demand, fuel_economy_mpg
from app.utils.reporting import EvalRow, compare_rows, render_report, report_frame, reward_curve, write_reward_curves

logger = logging.getLogger(__name__)


# --- Building blocks ---

def resolve_config(config: str | os.PathLike | ExperimentConfig | None, seed: int | None = None,
                   out: str | None = None) -> ExperimentConfig:
    cfg = config if isinstance(config, ExperimentConfig) else (
        load_experiment_config(config) if config is not None else ExperimentConfig())
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["out_dir"] = out
    if updates:
        cfg = cfg.model_copy(update={"experiment": cfg.experiment.model_copy(update=updates)})
    return cfg


def build_model(cfg: ExperimentConfig) -> PowertrainModel:
    if cfg.experiment.maps_dir:
        return load_maps(cfg.experiment.maps_dir, vehicle=cfg.vehicle, battery=cfg.battery)
    return build_default_maps(vehicle=cfg.vehicle, battery=cfg.battery)


def build_cycle(cfg: ExperimentConfig) -> DriveCycle:
    src = cfg.cycle
    if src.path:
        cycle = load_cycle(src.path, src.unit)
    else:
        cycle = synth_cycle(src.kind, src.duration, src.v_peak, src.seed)
    return repeat_cycle(cycle, src.repetitions)


def _apply_threads():
    if core_config.TORCH_THREADS:
        torch.set_num_threads(int(core_config.TORCH_THREADS))


@contextlib.contextmanager
def registry(out_dir: str | os.PathLike):
    """Run-registry session for the output directory (or DATABASE_URL when set)."""
    sessions = get_db_session_for_context_manager(database_url(out_dir))
    db = next(sessions)
    try:
        yield db
    finally:
        sessions.close()


def check_cycle_feasible(cycle: DriveCycle, model: PowertrainModel) -> None:
    demand = em_power_demand(cycle.velocity, cycle.acceleration(), cycle.grade, model)
    feasible = np.atleast_1d(demand.feasible)
    if not feasible.all():
        raise InfeasibleError(f"cycle '{cycle.name}' exceeds the EM envelope", time_index=int(np.argmin(feasible)))


# --- Commands ---

@dataclass
class TrainResult:
    out_dir: Path
    log: pd.DataFrame
    best_checkpoint: Optional[Path]
    best_moving_average: Optional[float]
    run_id: Optional[int] = None


def cmd_train(config: str | os.PathLike | ExperimentConfig | None, seed: int | None = None,
              out: str | None = None) -> TrainResult:
    cfg = resolve_config(config, seed, out)
    _apply_threads()
    out_dir = Path(cfg.experiment.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = write_config_snapshot(cfg, out_dir / "config.resolved")
    seed = cfg.experiment.seed

    model = build_model(cfg)
    cycle = build_cycle(cfg)
    env = ShevEnv(model, EpisodeConfig.from_settings(cycle, cfg.episode, seed))
    agent = SacAgent(cfg.agent, cfg.sac, seed=seed)
    if cfg.agent.init_checkpoint:
        meta = agent.load_weights(cfg.agent.init_checkpoint)
        logger.info("Warm start from %s (episode %s)", cfg.agent.init_checkpoint, meta.get("episodes_done"))

    with registry(out_dir) as db:
        run = crud_run.create_run(db, name=cfg.experiment.name, variant=agent.label, context_k=agent.k, seed=seed,
                                  config_text=snapshot.read_text(), out_dir=str(out_dir))

        def on_episode(row: Dict):
            crud_run.record_episode(db, run.id, {k: row[k] for k in row if k != "wall_s"})

        try:
            log = train(env, agent, cfg.sac, cfg.experiment.episodes, np.random.default_rng(seed),
                        out_dir=out_dir, on_episode=on_episode)
        except Exception:
            crud_run.update_run(db, run.id, {"status": "failed"})
            raise

        # a continued run reports over the whole appended log
        frame = pd.read_csv(log.path) if log.path.exists() else log.frame()
        best_ma, best_episode = None, None
        if len(frame):
            curve = reward_curve(frame, cfg.sac.moving_average_window)
            i = int(curve["moving_average"].idxmax())
            best_ma, best_episode = float(curve["moving_average"][i]), int(curve["episode"][i])
            write_reward_curves({agent.label: curve}, out_dir)
        crud_run.update_run(db, run.id, {"status": "finished", "best_moving_average": best_ma,
                                         "best_episode": best_episode})
        run_id = run.id

    best = out_dir / "best.pt"
    logger.info("Training finished: %d episodes, best moving average %s", len(frame), best_ma)
    return TrainResult(out_dir, frame, best if best.exists() else None, best_ma, run_id)


@dataclass
class EvalResult:
    summary: EpisodeSummary
    trace_path: Path
    variant: str
    cycle_name: str


def _write_eval(records, summary: EpisodeSummary, out_dir: Path, stem: str) -> Path:
    trace_path = write_trace(records, out_dir / f"{stem}_trace.csv")
    (out_dir / f"{stem}_summary.txt").write_text(summary_text(summary))
    return trace_path


def cmd_eval(checkpoint: str | os.PathLike, cycle_ref: str, initial_soc: float = 0.85,
             config: str | os.PathLike | ExperimentConfig | None = None, seed: int | None = None,
             out: str | None = None, unit: str = "mps") -> EvalResult:
    cfg = resolve_config(config, seed, out)
    _apply_threads()
    out_dir = Path(cfg.experiment.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    cycle = resolve_cycle_ref(cycle_ref, unit)
    check_cycle_feasible(cycle, model)

    agent = SacAgent.from_checkpoint(checkpoint, cfg.sac)
    env = ShevEnv(model, EpisodeConfig(cycle=cycle, initial_soc_choices=(initial_soc,), reward=cfg.episode.reward,
                                       seed=cfg.experiment.seed))
    records = rollout(env, agent, np.random.default_rng(cfg.experiment.seed), deterministic=True)
    summary = summarize_episode(records, model, cycle.dt)
    stem = f"eval_{agent.label}_{cycle.name}"
    trace_path = _write_eval(records, summary, out_dir, stem)
    with registry(out_dir) as db:
        crud_run.record_evaluation(db, source=str(checkpoint), variant=agent.label, cycle_name=cycle.name,
                                   initial_soc=initial_soc, final_soc=summary.final_soc, fuel_g=summary.fuel_g,
                                   distance_m=summary.distance_m,
                                   mpg=summary.mpg if np.isfinite(summary.mpg) else None,
                                   trace_path=str(trace_path), seed=cfg.experiment.seed)
    logger.info("Eval %s on %s: fuel=%.1f g, MPG=%.3f, final SOC=%.2f%%", agent.label, cycle.name, summary.fuel_g,
                summary.mpg, 100 * summary.final_soc)
    return EvalResult(summary, trace_path, agent.label, cycle.name)


def cmd_dp(cycle_ref: str, initial_soc: float = 0.85, config: str | os.PathLike | ExperimentConfig | None = None,
           seed: int | None = None, out: str | None = None, unit: str = "mps") -> EvalResult:
    cfg = resolve_config(config, seed, out)
    out_dir = Path(cfg.experiment.out_dir)
    model = build_model(cfg)
    cycle = resolve_cycle_ref(cycle_ref, unit)
    solution = dp_solve(cycle, model, cfg.dp, initial_soc, weights=cfg.episode.reward)
    export_solution(solution, out_dir)
    summary = summarize_episode(solution.trace, model, cycle.dt)
    trace_path = out_dir / "dp_trace.csv"
    (out_dir / "dp_summary.txt").write_text(summary_text(summary))
    with registry(out_dir) as db:
        crud_run.record_evaluation(db, source="dp", variant="DP", cycle_name=cycle.name, initial_soc=initial_soc,
                                   final_soc=summary.final_soc, fuel_g=summary.fuel_g,
                                   distance_m=summary.distance_m,
                                   mpg=None if solution.zero_fuel else summary.mpg,
                                   trace_path=str(trace_path), seed=cfg.experiment.seed)
    return EvalResult(summary, trace_path, "DP", cycle.name)


def _trace_row(label: str, frame: pd.DataFrame, fuel_density: float, dt: float) -> EvalRow:
    distance = float(frame["v"].sum() * dt)
    return EvalRow(label, 100.0 * float(frame["soc_next"].iloc[-1]),
                   fuel_economy_mpg(distance, float(frame["fuel_g"].sum()), fuel_density))


def _label_and_path(spec: str) -> Tuple[str, Path]:
    if "=" in spec:
        label, path = spec.split("=", 1)
        return label, Path(path)
    p = Path(spec)
    return p.stem.replace("_trace", "").replace("eval_", ""), p


def cmd_compare(dp_trace: str | os.PathLike, run_traces: Sequence[str], out: str | None = None,
                dt: float = 1.0, fuel_density: float = 0.85, cycle_name: str = "") -> pd.DataFrame:
    """
    Table of final SOC and MPG for DP and each agent trace, with relative
    deltas against DP. Every number is recomputed from the trace files.
    """
    dp_frame = read_trace(dp_trace)
    rows = []
    for spec in run_traces:
        label, path = _label_and_path(spec)
        frame = read_trace(path)
        if len(frame) != len(dp_frame) or not np.array_equal(frame["v"].to_numpy(), dp_frame["v"].to_numpy()):
            raise InvalidValueError(f"{path}: trace is not on the same cycle as the DP trace")
        if frame["soc"].iloc[0] != dp_frame["soc"].iloc[0]:
            raise InvalidValueError(f"{path}: initial SOC differs from the DP trace")
        rows.append(_trace_row(label, frame, fuel_density, dt))
    report = compare_rows(_trace_row("DP", dp_frame, fuel_density, dt), rows)
    frame = report_frame(report)
    text = render_report(report, cycle_name)
    out_dir = Path(out) if out is not None else Path(dp_trace).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_dir / "comparison.csv", index=False)
    (out_dir / "comparison.txt").write_text(text)
    logger.info("Comparison report:\n%s", text)
    return frame


# --- Ablation studies ---

STUDIES = {
    1: "sequence vs random sampling",
    2: "actor-critic architecture",
    3: "input sequence length",
    4: "varying initial SOC",
    5: "varying SOC and cycle duration",
    6: "varying SOC, duration and power demand",
}


# Studies 4-6 continue the models trained by the study before them.
CONTINUATION_ARMS = [("FFN", "FFN", 1), ("GRU", "GRU", 10), ("DT", "GRU", 100)]
PREVIOUS_ARM = {
    4: {"FFN-FFN": ("study2", "FFN-FFN"), "GRU-GRU": ("study3", "GRU-GRU-k10"),
        "DT-GRU": ("study3", "DT-GRU-k100")},
    5: {arm: ("study4", arm) for arm in ("FFN-FFN", "GRU-GRU", "DT-GRU")},
    6: {arm: ("study5", arm) for arm in ("FFN-FFN", "GRU-GRU", "DT-GRU")},
}


def _with(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    return cfg.model_copy(update={name: getattr(cfg, name).model_copy(update=upd) for name, upd in sections.items()})


def _warm_start(study: int, arm: str, actor: str, critic: str, base: ExperimentConfig) -> Optional[str]:
    """An explicit checkpoint for the matching pairing wins; else the previous study's best.pt when present."""
    if base.agent.init_checkpoint and (base.agent.actor, base.agent.critic) == (actor, critic):
        return base.agent.init_checkpoint
    prev_study, prev_arm = PREVIOUS_ARM[study][arm]
    best = Path(base.experiment.out_dir) / prev_study / prev_arm / "best.pt"
    if best.exists():
        return str(best)
    logger.warning("Study %d arm %s: no %s to continue from, training from scratch", study, arm, best)
    return None


def expand_study(study: int, base: ExperimentConfig) -> List[Tuple[str, ExperimentConfig]]:
    """
    Arm names and configs for one study; output dirs nest under the base
    out_dir. Run studies in order so 4-6 find the checkpoints they continue.
    """
    if study not in STUDIES:
        raise InvalidValueError(f"unknown study {study}; choose 1-6")
    arms: List[Tuple[str, Dict]] = []
    if study == 1:
        arms = [
            ("FFN-1cycle-random", dict(agent=dict(actor="FFN", critic="FFN", context_k=1),
                                       sac=dict(sampling="random"), episode=dict(repetitions=1))),
            ("FFN-10cycles-random", dict(agent=dict(actor="FFN", critic="FFN", context_k=1),
                                         sac=dict(sampling="random"), episode=dict(repetitions=10))),
            ("FFN-10cycles-sequential", dict(agent=dict(actor="FFN", critic="FFN", context_k=10),
                                             sac=dict(sampling="sequential"), episode=dict(repetitions=10))),
        ]
    elif study == 2:
        for actor, critic in [("FFN", "FFN"), ("GRU", "FFN"), ("GRU", "GRU"), ("DT", "GRU"), ("DT", "DT")]:
            arms.append((f"{actor}-{critic}", dict(agent=dict(actor=actor, critic=critic, context_k=1),
                                                   episode=dict(repetitions=10))))
    elif study == 3:
        for actor in ("GRU", "DT"):
            for k in (10, 100):
                arms.append((f"{actor}-GRU-k{k}", dict(agent=dict(actor=actor, critic="GRU", context_k=k),
                                                       episode=dict(repetitions=10))))
    else:
        episode = dict(initial_soc_choices=[0.85, 0.75, 0.65, 0.55, 0.45])
        if study >= 5:
            episode["randomize_cycles"] = (1, 10)
        if study == 6:
            episode["demand_scale_range"] = (0.5, 1.5)
        for actor, critic, k in CONTINUATION_ARMS:
            name = f"{actor}-{critic}"
            warm = _warm_start(study, name, actor, critic, base)
            arms.append((name, dict(agent=dict(actor=actor, critic=critic, context_k=k, init_checkpoint=warm),
                                    episode=dict(episode))))

    root = Path(base.experiment.out_dir) / f"study{study}"
    expanded = []
    for name, sections in arms:
        sections.setdefault("experiment", {})
        sections["experiment"].update(out_dir=str(root / name), name=f"{base.experiment.name}-study{study}-{name}")
        expanded.append((name, _with(base, **sections)))
    return expanded


def _run_arm(arm: Tuple[str, ExperimentConfig]) -> Dict:
    name, cfg = arm
    try:
        result = cmd_train(cfg)
        return {"arm": name, "status": "finished", "episodes": len(result.log),
                "best_moving_average": result.best_moving_average, "error": "",
                "log": result.log.to_dict(orient="list")}
    except Exception as e:
        logger.exception("Arm %s failed", name)
        return {"arm": name, "status": "failed", "episodes": 0, "best_moving_average": None,
                "error": f"{type(e).__name__}: {e}", "log": None}


def cmd_ablate(study: int, config: str | os.PathLike | ExperimentConfig | None, seed: int | None = None,
               out: str | None = None, workers: int = 1) -> pd.DataFrame:
    base = resolve_config(config, seed, out)
    arms = expand_study(study, base)
    root = Path(base.experiment.out_dir) / f"study{study}"
    root.mkdir(parents=True, exist_ok=True)
    (root / "arms.txt").write_text(
        "".join(f"{name}\tseed={cfg.experiment.seed}\t{cfg.agent.label}\tk={cfg.agent.context_k}\n"
                for name, cfg in arms))
    logger.info("Study %d (%s): %d arms, seed %d", study, STUDIES[study], len(arms), base.experiment.seed)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_arm, arms))
    else:
        results = [_run_arm(arm) for arm in arms]

    window = base.sac.moving_average_window
    curves = {r["arm"]: reward_curve(pd.DataFrame(r["log"]), window) for r in results if r["log"]}
    _, worst, best = write_reward_curves(curves, root)
    summary = pd.DataFrame([{k: v for k, v in r.items() if k != "log"} for r in results])
    summary.to_csv(root / "summary.csv", index=False)
    logger.info("Study %d done; rescale anchors worst=%.4f best=%.4f", study, worst, best)
    return summary


def cmd_maps(out_dir: str | os.PathLike, config: str | os.PathLike | ExperimentConfig | None = None) -> List[Path]:
    cfg = resolve_config(config)
    return emit_maps(build_model(cfg), out_dir)
