# app/services/dp_solver.py
"""
Dynamic-programming baseline over a time x SOC grid.

The action set is the (omega, torque) grid restricted to operating points that
clip_action leaves unchanged; at omega = 0 only the engine-off point is kept.
Stage cost is fuel mass; the terminal cost is zero inside the terminal SOC
window and a finite sentinel outside it.
"""

import itertools
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np
import pandas as pd

from app.core.errors import InfeasibleError, PreconditionError
from app.models.schemas import DpConfig, RewardWeights
from app.sim.cycles import DriveCycle
from app.sim.env import StepRecord, reward_fn, write_trace
from app.sim.powertrain import (
    PowertrainModel,
    battery_step,
    clip_action,
    em_power_demand,
    fuel_economy_mpg,
    genset_output,
)

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 10 ** 7


class FuelEconomy(NamedTuple):
    mpg: float
    zero_fuel: bool


@dataclass
class DpSolution:
    actions: np.ndarray                 # (n_actions, 2) omega rpm, torque Nm
    soc_nodes: np.ndarray
    trace: List[StepRecord]
    total_fuel: float
    mpg: float
    soc_final: float
    distance_m: float
    zero_fuel: bool = False
    value: Optional[np.ndarray] = None  # (N + 1, n_soc) cost-to-go, g
    policy: Optional[np.ndarray] = None # (N, n_soc) action index
    action_sequence: List[int] = field(default_factory=list)


@dataclass
class _Problem:
    """Everything both solvers share: grids, per-action fuel and per-step battery power."""
    soc_nodes: np.ndarray
    actions: np.ndarray
    p_gen: np.ndarray
    stage: np.ndarray        # fuel grams per step for each action
    p_batt: np.ndarray       # (N, n_actions)
    terminal: np.ndarray     # (n_soc,)
    sentinel: float
    dt: float
    cycle: DriveCycle
    p_em: np.ndarray
    model: PowertrainModel


def canonical_actions(omega_nodes: np.ndarray, torque_nodes: np.ndarray, model: PowertrainModel) -> np.ndarray:
    actions = []
    for w in omega_nodes:
        for t in torque_nodes:
            if w == 0 and t != 0:
                continue
            cw, ct = clip_action(w, t, model)
            if cw == w and ct == t:
                actions.append((w, t))
    if not actions:
        raise PreconditionError("no operating point of the action grid survives clipping")
    return np.array(actions, dtype=float)


def _build_problem(cycle: DriveCycle, model: PowertrainModel, cfg: DpConfig) -> _Problem:
    demand = em_power_demand(cycle.velocity, cycle.acceleration(), cycle.grade, model)
    feasible = np.atleast_1d(demand.feasible)
    if not np.all(feasible):
        first = int(np.argmin(feasible))
        raise InfeasibleError("drive cycle exceeds the EM envelope", time_index=first)
    p_em = np.atleast_1d(demand.p_em_elec)

    soc_nodes = cfg.soc_nodes()
    actions = canonical_actions(cfg.omega_nodes(), cfg.torque_nodes(), model)
    p_gen, fuel_rate = genset_output(actions[:, 0], actions[:, 1], model)
    stage = np.asarray(fuel_rate) * cycle.dt
    p_batt = p_em[:, None] + model.vehicle.aux_power - np.asarray(p_gen)[None, :]

    lo, hi = cfg.terminal_soc
    terminal_ok = (soc_nodes >= lo) & (soc_nodes <= hi)
    if not terminal_ok.any():
        raise PreconditionError("no SOC grid node lies inside the terminal window")
    sentinel = cfg.infeasible_cost
    if sentinel is None:
        sentinel = 100.0 * max(float(stage.max()) * len(cycle), 1.0)
    terminal = np.where(terminal_ok, 0.0, sentinel)
    return _Problem(soc_nodes, actions, np.asarray(p_gen), stage, p_batt, terminal, sentinel, cycle.dt,
                    cycle, p_em, model)


def snap_to_grid(soc, nodes: np.ndarray) -> np.ndarray:
    """Index of the nearest node; ties go to the lower node."""
    soc = np.asarray(soc, dtype=float)
    upper = np.clip(np.searchsorted(nodes, soc, side="left"), 1, len(nodes) - 1)
    lower = upper - 1
    pick_lower = np.abs(soc - nodes[lower]) <= np.abs(nodes[upper] - soc)
    return np.where(pick_lower, lower, upper)


def _transitions(prob: _Problem, t: int, soc):
    """SOC after each action from each soc (broadcast), and which transitions are infeasible."""
    soc = np.asarray(soc, dtype=float)[..., None]
    step = battery_step(soc, prob.p_batt[t], prob.dt, prob.model.battery)
    soc_next = np.asarray(step.soc_next)
    nodes = prob.soc_nodes
    bad = (soc_next < max(0.0, nodes[0])) | (soc_next > min(1.0, nodes[-1])) | np.asarray(step.p_limit_violation)
    return soc_next, bad


def _stage_costs(prob: _Problem, t: int, soc, value_next: np.ndarray, nearest: bool):
    soc_next, bad = _transitions(prob, t, soc)
    if nearest:
        future = value_next[snap_to_grid(np.clip(soc_next, prob.soc_nodes[0], prob.soc_nodes[-1]), prob.soc_nodes)]
    else:
        future = np.interp(soc_next, prob.soc_nodes, value_next)
    cost = np.where(bad, prob.sentinel, prob.stage + future)
    return np.minimum(cost, prob.sentinel), soc_next


def _record(prob: _Problem, t: int, soc: float, a: int, soc_next: float, soc_init: float,
            weights: RewardWeights, done: bool) -> StepRecord:
    fuel_g = float(prob.stage[a])
    v = float(prob.cycle.velocity[t])
    # reward shaping is evaluated inside [0, 1]
    return StepRecord(step=t, v=v, soc=soc, p_em=float(prob.p_em[t]), omega=float(prob.actions[a, 0]),
                      torque=float(prob.actions[a, 1]), fuel_g=fuel_g, p_batt=float(prob.p_batt[t, a]),
                      reward=reward_fn(fuel_g, float(np.clip(soc_next, 0, 1)), soc_init, weights), done=done,
                      i_batt=float(battery_step(soc, prob.p_batt[t, a], prob.dt, prob.model.battery).i_batt),
                      soc_next=soc_next)


def _solution(prob: _Problem, records: List[StepRecord], sequence: List[int], model: PowertrainModel,
              value=None, policy=None) -> DpSolution:
    total = float(sum(r.fuel_g for r in records))
    distance = float(sum(r.v for r in records) * prob.dt)
    # stationary cycles cover no distance
    economy = mpg_of(records, model, prob.dt) if distance > 0 else FuelEconomy(0.0, total == 0.0)
    return DpSolution(actions=prob.actions, soc_nodes=prob.soc_nodes, trace=records, total_fuel=total,
                      mpg=economy.mpg, zero_fuel=economy.zero_fuel, soc_final=records[-1].soc_next,
                      distance_m=distance, value=value, policy=policy, action_sequence=sequence)


def dp_solve(cycle: DriveCycle, model: PowertrainModel, cfg: DpConfig, initial_soc: float,
             weights: RewardWeights | None = None) -> DpSolution:
    if not 0.0 <= initial_soc <= 1.0:
        raise PreconditionError("initial_soc must lie in [0, 1]")
    prob = _build_problem(cycle, model, cfg)
    nearest = cfg.interpolation == "nearest"
    n_steps, nodes = len(cycle), prob.soc_nodes
    logger.info("DP sweep: %d steps x %d SOC nodes x %d actions (%s)", n_steps, len(nodes),
                len(prob.actions), cfg.interpolation)

    value = np.empty((n_steps + 1, len(nodes)))
    policy = np.empty((n_steps, len(nodes)), dtype=int)
    value[n_steps] = prob.terminal
    for t in range(n_steps - 1, -1, -1):
        cost, _ = _stage_costs(prob, t, nodes, value[t + 1], nearest)
        policy[t] = np.argmin(cost, axis=1)
        value[t] = cost[np.arange(len(nodes)), policy[t]]
        if t % 1000 == 0:
            logger.debug("DP backward sweep at t=%d", t)

    soc = float(nodes[snap_to_grid(initial_soc, nodes)]) if nearest else float(initial_soc)
    start_value = value[0, snap_to_grid(soc, nodes)] if nearest else np.interp(soc, nodes, value[0])
    if start_value >= prob.sentinel:
        stranded = np.flatnonzero(np.all(value[:n_steps] >= prob.sentinel, axis=1))
        raise InfeasibleError(f"no path from SOC {initial_soc:.4f} reaches the terminal window",
                              time_index=int(stranded[0]) if len(stranded) else 0)

    w = weights or RewardWeights()
    records, sequence = [], []
    for t in range(n_steps):
        # re-optimize at the simulated SOC with the same cost the sweep used
        cost, soc_next = _stage_costs(prob, t, np.array([soc]), value[t + 1], nearest)
        a = int(np.argmin(cost[0]))
        nxt = float(soc_next[0, a])
        if nearest:
            nxt = float(nodes[snap_to_grid(nxt, nodes)])
        records.append(_record(prob, t, soc, a, nxt, initial_soc, w, t == n_steps - 1))
        sequence.append(a)
        soc = nxt
    solution = _solution(prob, records, sequence, model, value=value, policy=policy)
    logger.info("DP optimum: fuel=%.2f g, final SOC=%.4f, MPG=%.3f", solution.total_fuel, solution.soc_final,
                solution.mpg)
    return solution


def brute_force(cycle: DriveCycle, model: PowertrainModel, cfg: DpConfig, initial_soc: float,
                weights: RewardWeights | None = None) -> DpSolution:
    """
    Exhaustive search over every action sequence with nearest-node SOC
    dynamics. Sequences are scored by the same right-to-left accumulation the
    DP backup uses and scanned in lexicographic order, so ties resolve as
    argmin does.
    """
    prob = _build_problem(cycle, model, cfg)
    n_steps, n_actions, nodes = len(cycle), len(prob.actions), prob.soc_nodes
    count = n_actions ** n_steps
    if count > BRUTE_FORCE_LIMIT:
        raise PreconditionError(f"brute force refused: {count} action sequences exceed {BRUTE_FORCE_LIMIT}")

    next_node = np.empty((n_steps, len(nodes), n_actions), dtype=int)
    infeasible = np.empty((n_steps, len(nodes), n_actions), dtype=bool)
    for t in range(n_steps):
        soc_next, bad = _transitions(prob, t, nodes)
        next_node[t] = snap_to_grid(np.clip(soc_next, nodes[0], nodes[-1]), nodes)
        infeasible[t] = bad

    start = int(snap_to_grid(initial_soc, nodes))
    best, best_seq = np.inf, None
    path = [0] * (n_steps + 1)
    for seq in itertools.product(range(n_actions), repeat=n_steps):
        path[0] = start
        for t, a in enumerate(seq):
            path[t + 1] = next_node[t, path[t], a]
        total = prob.terminal[path[n_steps]]
        for t in range(n_steps - 1, -1, -1):
            if infeasible[t, path[t], seq[t]]:
                total = prob.sentinel
            else:
                total = min(prob.stage[seq[t]] + total, prob.sentinel)
        if total < best:
            best, best_seq = total, seq
    if best >= prob.sentinel:
        raise InfeasibleError(f"no action sequence from SOC {initial_soc:.4f} reaches the terminal window")

    w = weights or RewardWeights()
    records, soc = [], float(nodes[start])
    for t, a in enumerate(best_seq):
        nxt = float(nodes[next_node[t, snap_to_grid(soc, nodes), a]])
        records.append(_record(prob, t, soc, a, nxt, initial_soc, w, t == n_steps - 1))
        soc = nxt
    return _solution(prob, records, list(best_seq), model)


def mpg_of(trace: List[StepRecord], model: PowertrainModel, dt: float = 1.0) -> FuelEconomy:
    distance = float(sum(r.v for r in trace) * dt)
    if distance <= 0:
        raise PreconditionError("mpg_of needs a trace with positive distance")
    fuel = float(sum(r.fuel_g for r in trace))
    return FuelEconomy(fuel_economy_mpg(distance, fuel, model.fuel_density), fuel == 0.0)


def export_solution(solution: DpSolution, out_dir: str | os.PathLike) -> List[Path]:
    """Value and policy grids as CSV matrices (rows: time, columns: SOC nodes) plus the trace."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [write_trace(solution.trace, out / "dp_trace.csv")]
    columns = [repr(float(s)) for s in solution.soc_nodes]
    if solution.value is not None:
        pd.DataFrame(solution.value, columns=columns).to_csv(out / "dp_value.csv", index_label="t")
        written.append(out / "dp_value.csv")
    if solution.policy is not None:
        pd.DataFrame(solution.policy, columns=columns).to_csv(out / "dp_policy.csv", index_label="t")
        pd.DataFrame(solution.actions, columns=["omega", "torque"]).to_csv(out / "dp_actions.csv",
                                                                          index_label="action")
        written += [out / "dp_policy.csv", out / "dp_actions.csv"]
    return written
