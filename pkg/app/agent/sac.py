"""
Sequence-aware Soft Actor-Critic.

FFN pairings with random sampling train on single transitions; every other
configuration trains on k-step windows from the trajectory buffer. Sequence
critics are scored per timestep and summed over the window; the actor and
temperature losses use the final timestep of each window.
"""

import copy
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from app.agent.buffer import TrajectoryBuffer
from app.agent.nets import (
    DTYPE,
    Actor,
    Critic,
    build_actor,
    build_critic,
    gaussian_head,
    load_checkpoint,
    save_checkpoint,
)
from app.core.errors import NumericError, PreconditionError, ShapeError, UsageError
from app.models.schemas import AgentSpec, NetConfig, SacConfig
from app.sim.env import ShevEnv, StepRecord
from app.utils.reporting import moving_average

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["episode", "steps", "mean_reward", "critic1_loss", "critic2_loss", "actor_loss", "alpha",
               "final_soc", "fuel_g", "failed", "wall_s"]


def soft_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    t_params, o_params = list(target.parameters()), list(online.parameters())
    if len(t_params) != len(o_params) or any(t.shape != o.shape for t, o in zip(t_params, o_params)):
        raise ShapeError("soft_update: target and online networks differ in shape")
    with torch.no_grad():
        for t, o in zip(t_params, o_params):
            t.mul_(1.0 - tau).add_(o, alpha=tau)


class EpisodeHistory:
    """Normalized per-episode records that action selection conditions on."""

    def __init__(self):
        self.obs: List[np.ndarray] = []
        self.actions: List[np.ndarray] = []
        self.rewards: List[float] = []
        self.returns: List[float] = []  # scaled return-to-go per step
        self.hidden: Optional[torch.Tensor] = None

    def start(self, obs, initial_return: float = 0.0):
        self.__init__()
        self.obs.append(np.asarray(obs, dtype=float))
        self.returns.append(float(initial_return))

    def record(self, action, reward: float, next_obs, reward_scale: float = 1.0):
        self.actions.append(np.asarray(action, dtype=float))
        self.rewards.append(float(reward))
        self.obs.append(np.asarray(next_obs, dtype=float))
        self.returns.append(self.returns[-1] - reward * reward_scale)

    def __len__(self) -> int:
        return len(self.obs)


class SacAgent:
    """Actor, twin critics, their targets and the auto-tuned temperature."""

    def __init__(self, spec: AgentSpec, cfg: SacConfig, seed: int = 1, obs_dim: int = 3, action_dim: int = 2):
        self.spec = spec
        self.cfg = cfg
        self.seed = seed
        self.k = spec.context_k
        self.action_dim = action_dim
        self.actor_cfg = NetConfig(family=spec.actor, hidden_width=spec.hidden_width,
                                   attention_heads=spec.attention_heads, context_k=spec.context_k,
                                   input_dim=obs_dim, output_dim=action_dim)
        self.critic_cfg = self.actor_cfg.model_copy(update={"family": spec.critic})

        self.actor: Actor = build_actor(self.actor_cfg, seed)
        self.critic1: Critic = build_critic(self.critic_cfg, seed + 1)
        self.critic2: Critic = build_critic(self.critic_cfg, seed + 2)
        self.target1 = copy.deepcopy(self.critic1)
        self.target2 = copy.deepcopy(self.critic2)
        for p in list(self.target1.parameters()) + list(self.target2.parameters()):
            p.requires_grad_(False)
        self.log_alpha = torch.tensor(cfg.initial_log_alpha, dtype=DTYPE, requires_grad=True)

        adam = dict(lr=cfg.lr, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), **adam)
        self.critic1_opt = torch.optim.Adam(self.critic1.parameters(), **adam)
        self.critic2_opt = torch.optim.Adam(self.critic2.parameters(), **adam)
        self.alpha_opt = torch.optim.Adam([self.log_alpha], **adam)
        self.generator = torch.Generator().manual_seed(seed + 3)
        self.best_return: Optional[float] = None
        self.episodes_done = 0

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.exp())

    @property
    def uses_windows(self) -> bool:
        return self.spec.is_sequential or self.cfg.sampling == "sequential"

    @property
    def label(self) -> str:
        return self.spec.label

    def initial_return(self) -> float:
        """Scaled R_0 for decision-transformer conditioning."""
        if self.cfg.dt_target_return is not None:
            return self.cfg.dt_target_return * self.cfg.reward_scale
        return (self.best_return or 0.0) * self.cfg.reward_scale

    # --- network evaluation on batches ---

    def _policy(self, obs, actions=None, returns=None, timesteps=None, deterministic=False):
        """Per-step policy outputs over (..., obs) or (batch, k, obs) windows."""
        mean, log_std, _ = self.actor(obs, actions=actions, returns=returns, timesteps=timesteps)
        return gaussian_head(mean, log_std, deterministic=deterministic, generator=self.generator)

    @staticmethod
    def _q(critic: Critic, obs, actions, returns=None, timesteps=None) -> torch.Tensor:
        return critic(obs, actions, returns=returns, timesteps=timesteps).squeeze(-1)

    def to_tensors(self, batch: Dict[str, np.ndarray]) -> Dict[str, torch.Tensor]:
        out = {}
        scale = self.cfg.reward_scale
        for name, value in batch.items():
            if name in ("timesteps", "next_timesteps", "episode"):
                out[name] = torch.as_tensor(value, dtype=torch.long)
            else:
                out[name] = torch.as_tensor(value, dtype=DTYPE)
        out["rewards"] = out["rewards"] * scale
        for name in ("rtg", "next_rtg"):
            if name in out:
                out[name] = out[name] * scale
        return out

    # --- losses ---

    def critic_targets(self, b: Dict[str, torch.Tensor]) -> torch.Tensor:
        with torch.no_grad():
            if self.spec.critic == "DT":
                q1 = self._q(self.target1, b["next_obs"], b["next_actions"], b["next_rtg"], b["next_timesteps"])
                q2 = self._q(self.target2, b["next_obs"], b["next_actions"], b["next_rtg"], b["next_timesteps"])
                return (1.0 - b["dones"]) * torch.min(q1, q2)
            if "timesteps" in b:
                pol = self._policy(b["next_obs"], actions=b["next_actions"], returns=b["next_rtg"],
                                   timesteps=b["next_timesteps"])
            else:
                pol = self._policy(b["next_obs"])
            q1 = self._q(self.target1, b["next_obs"], pol.action)
            q2 = self._q(self.target2, b["next_obs"], pol.action)
            soft_value = torch.min(q1, q2) - self.log_alpha.exp() * pol.log_prob
            return b["rewards"] + self.cfg.gamma * (1.0 - b["dones"]) * soft_value

    def _reduce(self, q: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if q.dim() == 1:
            return ((q - y) ** 2).mean()
        if self.spec.critic == "DT":
            return ((q[:, -1] - y[:, -1]) ** 2).mean()
        return ((q - y) ** 2).sum(dim=1).mean()

    def critic_loss(self, b: Dict[str, torch.Tensor], y: torch.Tensor | None = None):
        if y is None:
            y = self.critic_targets(b)
        rtg, ts = b.get("rtg"), b.get("timesteps")
        q1 = self._q(self.critic1, b["obs"], b["actions"], rtg, ts)
        q2 = self._q(self.critic2, b["obs"], b["actions"], rtg, ts)
        return self._reduce(q1, y), self._reduce(q2, y)

    def actor_and_alpha_losses(self, b: Dict[str, torch.Tensor]):
        obs, actions = b["obs"], b["actions"]
        q_ret = q_ts = None
        if obs.dim() == 2:
            pol = self._policy(obs)
            q_obs, q_act = obs, pol.action
        else:
            if self.spec.actor == "FFN":
                pol = self._policy(obs[:, -1])
            else:
                full = self._policy(obs, actions=actions, returns=b["rtg"], timesteps=b["timesteps"])
                pol = type(full)(*(x[:, -1] for x in full))
            if self.spec.critic == "FFN":
                q_obs, q_act = obs[:, -1], pol.action
            else:
                # stored actions with the final one resampled
                q_act = torch.cat([actions[:, :-1], pol.action.unsqueeze(1)], dim=1)
                q_obs, q_ret, q_ts = obs, b["rtg"], b["timesteps"]
        qs = [self._q(c, q_obs, q_act, q_ret, q_ts) for c in (self.critic1, self.critic2)]
        q = torch.min(*[x[:, -1] if x.dim() == 2 else x for x in qs])
        alpha = self.log_alpha.exp().detach()
        actor_loss = (alpha * pol.log_prob - q).mean()
        alpha_loss = -(self.log_alpha.exp() * (pol.log_prob.detach() + self.cfg.target_entropy)).mean()
        return actor_loss, alpha_loss

    # --- updates ---

    def _step(self, opt: torch.optim.Optimizer, loss: torch.Tensor, params, family: str | None):
        opt.zero_grad()
        loss.backward()
        clip = self.cfg.resolved_grad_clip(family) if family else None
        if clip is not None:
            torch.nn.utils.clip_grad_norm_(params, clip)
        opt.step()

    def sample(self, buffer: TrajectoryBuffer, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        if self.uses_windows:
            return buffer.sample_windows(self.cfg.batch_size, self.k, rng)
        return buffer.sample_transitions(self.cfg.batch_size, rng)

    def update(self, batch: Dict[str, np.ndarray], dump_dir: str | os.PathLike | None = None) -> Dict[str, float]:
        b = self.to_tensors(batch)
        l1, l2 = self.critic_loss(b)
        self._guard(batch, dump_dir, critic1=l1, critic2=l2)
        self._step(self.critic1_opt, l1, self.critic1.parameters(), self.spec.critic)
        self._step(self.critic2_opt, l2, self.critic2.parameters(), self.spec.critic)

        actor_loss, alpha_loss = self.actor_and_alpha_losses(b)
        self._guard(batch, dump_dir, actor=actor_loss, alpha=alpha_loss)
        self._step(self.actor_opt, actor_loss, self.actor.parameters(), self.spec.actor)
        self._step(self.alpha_opt, alpha_loss, [self.log_alpha], None)

        soft_update(self.target1, self.critic1, self.cfg.tau)
        soft_update(self.target2, self.critic2, self.cfg.tau)
        return {"critic1_loss": l1.item(), "critic2_loss": l2.item(), "actor_loss": actor_loss.item(),
                "alpha": self.alpha}

    @staticmethod
    def _guard(batch, dump_dir, **losses):
        bad = [name for name, loss in losses.items() if not torch.isfinite(loss)]
        if not bad:
            return
        dump = None
        if dump_dir is not None:
            dump = Path(dump_dir) / "nonfinite_batch.npz"
            dump.parent.mkdir(parents=True, exist_ok=True)
            np.savez(dump, **batch)
        raise NumericError(f"non-finite {', '.join(bad)} loss", dump_path=str(dump) if dump else None)

    # --- acting ---

    def _window_index(self, t: int) -> np.ndarray:
        """Last k step indices ending at t, left-padded with step 0."""
        return np.maximum(np.arange(t - self.k + 1, t + 1), 0)

    def select_action(self, history: EpisodeHistory, deterministic: bool = False) -> np.ndarray:
        if len(history) == 0:
            raise UsageError("select_action needs at least the current observation")
        t = len(history) - 1
        with torch.no_grad():
            if self.spec.actor == "FFN":
                obs = torch.as_tensor(history.obs[t], dtype=DTYPE).unsqueeze(0)
                pol = self._policy(obs, deterministic=deterministic)
            elif self.spec.actor == "GRU" and self.spec.persistent_hidden:
                obs = torch.as_tensor(history.obs[t], dtype=DTYPE).view(1, 1, -1)
                mean, log_std, history.hidden = self.actor(obs, hidden=history.hidden)
                pol = gaussian_head(mean[:, -1], log_std[:, -1], deterministic=deterministic,
                                    generator=self.generator)
            else:
                idx = self._window_index(t)
                obs = torch.as_tensor(np.stack([history.obs[i] for i in idx]), dtype=DTYPE).unsqueeze(0)
                returns = actions = timesteps = None
                if self.spec.actor == "DT":
                    blank = np.zeros(self.action_dim)
                    actions = torch.as_tensor(np.stack([history.actions[i] if i < len(history.actions) else blank
                                                        for i in idx]), dtype=DTYPE).unsqueeze(0)
                    returns = torch.as_tensor([history.returns[i] for i in idx], dtype=DTYPE).view(1, -1, 1)
                    timesteps = torch.as_tensor(idx, dtype=torch.long).unsqueeze(0)
                mean, log_std, _ = self.actor(obs, actions=actions, returns=returns, timesteps=timesteps)
                pol = gaussian_head(mean[:, -1], log_std[:, -1], deterministic=deterministic,
                                    generator=self.generator)
        return pol.action.squeeze(0).numpy().copy()

    # --- checkpoints ---

    def nets(self) -> Dict[str, nn.Module]:
        return {"actor": self.actor, "critic1": self.critic1, "critic2": self.critic2,
                "target1": self.target1, "target2": self.target2}

    def save(self, path: str | os.PathLike, **meta) -> Path:
        configs = {"actor": self.actor_cfg, "critic1": self.critic_cfg, "critic2": self.critic_cfg,
                   "target1": self.critic_cfg, "target2": self.critic_cfg}
        meta = {"spec": self.spec.model_dump(), "log_alpha": float(self.log_alpha), "seed": self.seed,
                "best_return": self.best_return, "episodes_done": self.episodes_done, **meta}
        return save_checkpoint(path, self.nets(), configs, meta)

    def load_weights(self, path: str | os.PathLike) -> Dict:
        payload = load_checkpoint(path)
        saved = AgentSpec.model_validate(payload["meta"]["spec"])
        if (saved.actor, saved.critic, saved.hidden_width) != (self.spec.actor, self.spec.critic,
                                                               self.spec.hidden_width):
            raise PreconditionError(f"checkpoint {path} holds {saved.label}, not {self.spec.label}")
        for name, net in self.nets().items():
            net.load_state_dict(payload["state"][name])
        with torch.no_grad():
            self.log_alpha.fill_(payload["meta"]["log_alpha"])
        self.best_return = payload["meta"].get("best_return")
        self.episodes_done = int(payload["meta"].get("episodes_done", 0))
        return payload["meta"]

    @classmethod
    def from_checkpoint(cls, path: str | os.PathLike, cfg: SacConfig | None = None) -> "SacAgent":
        payload = load_checkpoint(path)
        spec = AgentSpec.model_validate(payload["meta"]["spec"])
        agent = cls(spec, cfg or SacConfig(), seed=int(payload["meta"].get("seed", 1)))
        agent.load_weights(path)
        return agent


# --- Training ---

@dataclass
class TrainingLog:
    rows: List[Dict] = field(default_factory=list)
    path: Optional[Path] = None

    def append(self, row: Dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            frame = pd.DataFrame([row], columns=LOG_COLUMNS)
            frame.to_csv(self.path, mode="a", header=not self.path.exists(), index=False)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=LOG_COLUMNS)

    def __len__(self) -> int:
        return len(self.rows)


def _mean_or_none(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def rollout(env: ShevEnv, agent: SacAgent, rng: np.random.Generator | None = None,
            deterministic: bool = True) -> List[StepRecord]:
    """One episode with the current policy and no learning."""
    env.reset(rng)
    history = EpisodeHistory()
    history.start(env.normalized_observation(), agent.initial_return())
    while not env.done:
        u = agent.select_action(history, deterministic=deterministic)
        _, reward, _, _ = env.step_normalized(u)
        history.record(u, reward, env.normalized_observation(), agent.cfg.reward_scale)
    return list(env.records)


def train(env: ShevEnv, agent: SacAgent, cfg: SacConfig, episodes: int, rng: np.random.Generator,
          out_dir: str | os.PathLike | None = None, buffer: TrajectoryBuffer | None = None,
          on_episode: Callable[[Dict], None] | None = None) -> TrainingLog:
    """
    Interleave rollouts and updates. Appends to training_log.csv and keeps the
    best checkpoint by moving-average reward when out_dir is given. Episode
    numbering continues from agent.episodes_done; a log that ends at that
    episode is continued, any other existing log is replaced.
    """
    out = Path(out_dir) if out_dir is not None else None
    log = TrainingLog(path=(out / "training_log.csv") if out is not None else None)
    window = cfg.moving_average_window
    rewards: List[float] = []
    best_ma = -np.inf
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if log.path.exists():
            prior = pd.read_csv(log.path)
            if len(prior) and int(prior["episode"].iloc[-1]) == agent.episodes_done:
                rewards = prior["mean_reward"].astype(float).tolist()
                if (out / "best.pt").exists():
                    best_ma = float(moving_average(rewards, window).max())
                logger.info("Continuing %s after episode %d (best moving average %.4f)", log.path,
                            agent.episodes_done, best_ma)
            else:
                log.path.unlink()
    if episodes == 0:
        return log

    if buffer is None:
        buffer = TrajectoryBuffer(cfg.buffer_capacity)
    train_freq = cfg.resolved_train_freq(agent.spec.actor)
    total_steps = 0
    # warm-started agents act on-policy from the first step
    warmup = cfg.warmup_steps if agent.episodes_done == 0 else 0
    logger.info("Training %s (k=%d) for %d episodes, update every %d steps", agent.label, agent.k, episodes,
                train_freq)

    for _ in range(episodes):
        started = time.perf_counter()
        env.reset(rng)
        x = env.normalized_observation()
        history = EpisodeHistory()
        history.start(x, agent.initial_return())
        losses: Dict[str, List[float]] = {"critic1_loss": [], "critic2_loss": [], "actor_loss": []}
        episode_return = 0.0

        while not env.done:
            if total_steps < warmup:
                u = rng.uniform(-1.0, 1.0, size=agent.action_dim)
            else:
                u = agent.select_action(history)
            _, reward, done, _ = env.step_normalized(u)
            x_next = env.normalized_observation()
            buffer.add(x, u, reward, x_next, done)
            history.record(u, reward, x_next, cfg.reward_scale)
            episode_return += reward
            total_steps += 1
            x = x_next

            if (cfg.learn and total_steps >= warmup and total_steps % train_freq == 0
                    and buffer.num_episodes > 0 and len(buffer) >= cfg.batch_size):
                for _ in range(cfg.updates_per_round):
                    result = agent.update(agent.sample(buffer, rng), dump_dir=out)
                    for name in losses:
                        losses[name].append(result[name])
        buffer.end_episode()

        records = env.records
        agent.episodes_done += 1
        if agent.best_return is None or episode_return > agent.best_return:
            agent.best_return = episode_return
        row = {
            "episode": agent.episodes_done,
            "steps": len(records),
            "mean_reward": episode_return / len(records),
            "critic1_loss": _mean_or_none(losses["critic1_loss"]),
            "critic2_loss": _mean_or_none(losses["critic2_loss"]),
            "actor_loss": _mean_or_none(losses["actor_loss"]),
            "alpha": agent.alpha,
            "final_soc": records[-1].soc_next,
            "fuel_g": float(sum(r.fuel_g for r in records)),
            "failed": any(r.failed for r in records),
            "wall_s": time.perf_counter() - started,
        }
        log.append(row)
        if on_episode is not None:
            on_episode(row)

        rewards.append(row["mean_reward"])
        recent = rewards[-window:]
        ma = float(np.mean(recent))
        if out is not None and ma > best_ma:
            best_ma = ma
            agent.save(out / "best.pt", episode=row["episode"], moving_average=ma)
        logger.info("Episode %d: steps=%d mean_reward=%.4f ma%d=%.4f alpha=%.4f soc_f=%.3f",
                    row["episode"], row["steps"], row["mean_reward"], window, ma, row["alpha"],
                    row["final_soc"])

    if out is not None:
        agent.save(out / "last.pt", episode=agent.episodes_done)
    return log
