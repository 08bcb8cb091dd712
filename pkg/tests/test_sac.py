import numpy as np
import pandas as pd
import pytest
import torch

from app.agent.buffer import TrajectoryBuffer
from app.agent.nets import DTYPE, PolicyOutput, build_critic, flat_params, gaussian_head, load_checkpoint
from app.agent.sac import EpisodeHistory, SacAgent, rollout, soft_update, train
from app.core.errors import NumericError, PreconditionError, ShapeError
from app.models.schemas import AgentSpec, NetConfig, SacConfig
from app.sim.env import EpisodeConfig, ShevEnv
from app.utils.reporting import moving_average

CFG = SacConfig(batch_size=8, warmup_steps=10, buffer_capacity=10_000)


def _agent(actor="FFN", critic="FFN", k=1, cfg=CFG, seed=1, **spec):
    return SacAgent(AgentSpec(actor=actor, critic=critic, context_k=k, hidden_width=16, **spec), cfg, seed=seed)


def _buffer(episodes=3, length=12, seed=0):
    rng = np.random.default_rng(seed)
    buffer = TrajectoryBuffer(10_000)
    for _ in range(episodes):
        for t in range(length):
            buffer.add(rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 2), float(rng.normal(-5, 2)),
                       rng.uniform(-1, 1, 3), t == length - 1)
        buffer.end_episode()
    return buffer


class TestCriticLosses:
    def test_gru_at_k1_matches_transition_formula(self):
        agent = _agent("GRU", "GRU", k=1)
        b = agent.to_tensors(_buffer().sample_windows(8, 1, np.random.default_rng(0)))
        with torch.no_grad():
            y = agent.critic_targets(b)
            l1, _ = agent.critic_loss(b, y)
            q = agent.critic1(b["obs"], b["actions"]).squeeze(-1)
        manual = ((q[:, 0] - y[:, 0]) ** 2).mean()
        assert abs(l1.item() - manual.item()) <= 1e-12

    @pytest.mark.parametrize("k", [1, 4, 10])
    def test_constant_offset_sums_over_window(self, k):
        agent = _agent("GRU", "GRU", k=k)
        b = agent.to_tensors(_buffer().sample_windows(8, k, np.random.default_rng(1)))
        c = 0.3
        with torch.no_grad():
            q = agent.critic1(b["obs"], b["actions"]).squeeze(-1)
            l1, _ = agent.critic_loss(b, q - c)
        assert l1.item() == pytest.approx(k * c ** 2, rel=1e-10)

    def test_constant_offset_on_transitions(self):
        agent = _agent()
        b = agent.to_tensors(_buffer().sample_transitions(8, np.random.default_rng(1)))
        c = 0.3
        with torch.no_grad():
            q = agent.critic1(b["obs"], b["actions"]).squeeze(-1)
            l1, _ = agent.critic_loss(b, q - c)
        assert l1.item() == pytest.approx(c ** 2, rel=1e-10)

    def test_terminal_target_is_the_reward(self):
        agent = _agent()
        batch = _buffer().sample_transitions(8, np.random.default_rng(2))
        batch["dones"] = np.ones(8)
        b = agent.to_tensors(batch)
        y = agent.critic_targets(b)
        assert torch.equal(y, torch.as_tensor(batch["rewards"], dtype=DTYPE) * CFG.reward_scale)

    def test_dt_critic_target_masks_terminal_steps(self):
        agent = _agent("DT", "DT", k=4)
        batch = _buffer(length=4).sample_windows(4, 4, np.random.default_rng(0))
        y = agent.critic_targets(agent.to_tensors(batch))
        assert y.shape == (4, 4)
        assert torch.all(y[:, -1] == 0)


class TestSoftUpdate:
    def test_tau_one_copies(self):
        cfg = NetConfig(hidden_width=8, input_dim=5, output_dim=1)
        a, b = build_critic(cfg, 1), build_critic(cfg, 2)
        soft_update(a, b, 1.0)
        assert torch.equal(flat_params(a), flat_params(b))

    def test_interpolates(self):
        cfg = NetConfig(hidden_width=8)
        a, b = build_critic(cfg, 1), build_critic(cfg, 2)
        expected = 0.75 * flat_params(a) + 0.25 * flat_params(b)
        soft_update(a, b, 0.25)
        assert torch.allclose(flat_params(a), expected, rtol=1e-14, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            soft_update(build_critic(NetConfig(hidden_width=8), 1), build_critic(NetConfig(hidden_width=4), 1), 0.5)


@pytest.mark.parametrize("actor,critic,k", [("FFN", "FFN", 1), ("GRU", "FFN", 3), ("GRU", "GRU", 3),
                                            ("DT", "GRU", 3), ("DT", "DT", 3)])
def test_update_runs_for_every_pairing(actor, critic, k):
    agent = _agent(actor, critic, k=k)
    before = flat_params(agent.target1)
    losses = agent.update(agent.sample(_buffer(), np.random.default_rng(0)))
    assert all(np.isfinite(v) for v in losses.values())
    assert not torch.equal(before, flat_params(agent.target1))


def test_nonfinite_loss_dumps_batch(tmp_path):
    agent = _agent()
    batch = _buffer().sample_transitions(8, np.random.default_rng(0))
    batch["rewards"][0] = np.nan
    with pytest.raises(NumericError) as err:
        agent.update(batch, dump_dir=tmp_path)
    assert (tmp_path / "nonfinite_batch.npz").exists()
    assert err.value.exit_code == 4


class TestActing:
    @pytest.mark.parametrize("actor,critic", [("FFN", "FFN"), ("GRU", "GRU"), ("DT", "GRU")])
    def test_deterministic_action_in_range(self, actor, critic):
        agent = _agent(actor, critic, k=10)
        history = EpisodeHistory()
        history.start(np.zeros(3), agent.initial_return())
        a1 = agent.select_action(history, deterministic=True)
        a2 = agent.select_action(history, deterministic=True)
        assert a1.shape == (2,) and np.all(np.abs(a1) <= 1)
        assert np.array_equal(a1, a2)

    def test_persistent_hidden_is_carried(self):
        agent = _agent("GRU", "GRU", k=1, persistent_hidden=True)
        history = EpisodeHistory()
        history.start(np.zeros(3))
        agent.select_action(history, deterministic=True)
        assert history.hidden is not None

    def test_history_returns_decrease_by_scaled_reward(self):
        history = EpisodeHistory()
        history.start(np.zeros(3), 1.0)
        history.record(np.zeros(2), -20.0, np.zeros(3), reward_scale=0.01)
        assert history.returns == pytest.approx([1.0, 1.2], abs=1e-15)


class TestCheckpoints:
    def test_round_trip_preserves_policy(self, tmp_path):
        agent = _agent("DT", "GRU", k=4)
        agent.best_return = -12.5
        agent.episodes_done = 7
        path = agent.save(tmp_path / "a.pt")
        clone = SacAgent.from_checkpoint(path, CFG)
        assert clone.label == "DT-GRU" and clone.k == 4
        assert clone.episodes_done == 7 and clone.best_return == -12.5
        assert torch.equal(flat_params(clone.actor), flat_params(agent.actor))
        assert clone.alpha == agent.alpha

    def test_pairing_mismatch(self, tmp_path):
        path = _agent("GRU", "GRU", k=2).save(tmp_path / "g.pt")
        with pytest.raises(PreconditionError):
            _agent().load_weights(path)


class TestTraining:
    def _env(self, model, cycle):
        return ShevEnv(model, EpisodeConfig(cycle=cycle, initial_soc_choices=(0.85,)))

    def test_log_rows_and_checkpoints(self, model, short_cycle, tmp_path):
        agent = _agent()
        log = train(self._env(model, short_cycle), agent, CFG, 3, np.random.default_rng(1), out_dir=tmp_path)
        frame = log.frame()
        assert frame["episode"].tolist() == [1, 2, 3]
        assert (tmp_path / "training_log.csv").exists()
        assert (tmp_path / "best.pt").exists() and (tmp_path / "last.pt").exists()
        assert (frame["steps"] == len(short_cycle)).all()

    def test_continuation_keeps_numbering(self, model, short_cycle, tmp_path):
        agent = _agent()
        env = self._env(model, short_cycle)
        train(env, agent, CFG, 2, np.random.default_rng(1), out_dir=tmp_path / "a")
        resumed = SacAgent.from_checkpoint(tmp_path / "a" / "last.pt", CFG)
        log = train(env, resumed, CFG, 2, np.random.default_rng(2), out_dir=tmp_path / "b")
        assert log.frame()["episode"].tolist() == [3, 4]

    def test_identical_seeds_give_identical_logs(self, model, short_cycle):
        frames = []
        for _ in range(2):
            agent = _agent("GRU", "GRU", k=3)
            log = train(self._env(model, short_cycle), agent, CFG, 2, np.random.default_rng(5))
            frames.append(log.frame().drop(columns="wall_s"))
        assert frames[0].equals(frames[1])

    def test_rollout_is_deterministic(self, model, short_cycle):
        agent = _agent("DT", "GRU", k=3)
        env = self._env(model, short_cycle)
        a = rollout(env, agent, np.random.default_rng(0))
        b = rollout(env, agent, np.random.default_rng(0))
        assert a == b

    def test_resume_in_place_appends_and_keeps_best(self, model, short_cycle, tmp_path):
        env = self._env(model, short_cycle)
        train(env, _agent(), CFG, 3, np.random.default_rng(1), out_dir=tmp_path)
        resumed = SacAgent.from_checkpoint(tmp_path / "last.pt", CFG)
        train(env, resumed, CFG, 3, np.random.default_rng(2), out_dir=tmp_path)
        frame = pd.read_csv(tmp_path / "training_log.csv")
        assert frame["episode"].tolist() == [1, 2, 3, 4, 5, 6]
        best = load_checkpoint(tmp_path / "best.pt")["meta"]
        expected = moving_average(frame["mean_reward"], CFG.moving_average_window).max()
        assert best["moving_average"] == pytest.approx(expected, rel=1e-12)

    def test_fresh_run_replaces_an_old_log(self, model, short_cycle, tmp_path):
        env = self._env(model, short_cycle)
        train(env, _agent(), CFG, 3, np.random.default_rng(1), out_dir=tmp_path)
        train(env, _agent(seed=2), CFG, 2, np.random.default_rng(1), out_dir=tmp_path)
        assert pd.read_csv(tmp_path / "training_log.csv")["episode"].tolist() == [1, 2]


class TestActorAndAlphaLosses:
    def _batch(self, agent, n=8):
        return agent.to_tensors(_buffer().sample_transitions(n, np.random.default_rng(4)))

    def _fix_policy(self, agent, action, log_prob):
        def policy(obs, **_):
            shape = obs.shape[:-1]
            a = torch.as_tensor(action, dtype=DTYPE).expand(*shape, 2)
            lp = torch.full(shape, log_prob, dtype=DTYPE)
            return PolicyOutput(a, torch.zeros_like(a), a, lp, a)
        agent._policy = policy

    def test_zero_temperature_maximizes_q(self):
        agent = _agent()
        with torch.no_grad():
            agent.log_alpha.fill_(-np.inf)
        b = self._batch(agent)
        state = agent.generator.get_state()
        actor_loss, alpha_loss = agent.actor_and_alpha_losses(b)
        agent.generator.set_state(state)
        with torch.no_grad():
            pol = agent._policy(b["obs"])
            q = torch.min(agent.critic1(b["obs"], pol.action), agent.critic2(b["obs"], pol.action)).squeeze(-1)
        assert abs(actor_loss.item() + q.mean().item()) <= 1e-12
        assert alpha_loss.item() == 0.0

    def test_entropy_on_target_leaves_alpha_alone(self):
        agent = _agent()
        self._fix_policy(agent, [0.1, -0.4], -CFG.target_entropy)
        _, alpha_loss = agent.actor_and_alpha_losses(self._batch(agent))
        assert alpha_loss.item() == 0.0

    def test_single_sample_by_hand(self):
        agent = _agent()
        with torch.no_grad():
            agent.log_alpha.fill_(np.log(0.5))
        self._fix_policy(agent, [0.25, -0.5], -1.3)
        b = self._batch(agent, n=1)
        actor_loss, alpha_loss = agent.actor_and_alpha_losses(b)
        a = torch.tensor([[0.25, -0.5]], dtype=DTYPE)
        with torch.no_grad():
            q = min(agent.critic1(b["obs"], a).item(), agent.critic2(b["obs"], a).item())
        alpha = float(agent.log_alpha.exp())
        assert actor_loss.item() == pytest.approx(alpha * -1.3 - q, abs=1e-12)
        assert alpha_loss.item() == pytest.approx(-alpha * (-1.3 + CFG.target_entropy), abs=1e-12)


def test_window_loss_at_k1_matches_transition_loss():
    ffn = _agent()
    gru = _agent("GRU", "GRU", k=1)
    gru.critic1, gru.critic2 = ffn.critic1, ffn.critic2
    batch = _buffer().sample_transitions(8, np.random.default_rng(6))
    windows = {name: value[:, None] for name, value in batch.items() if name != "episode"}
    b_flat, b_win = ffn.to_tensors(batch), gru.to_tensors(windows)
    with torch.no_grad():
        y = ffn.critic_targets(b_flat)
        flat = ffn.critic_loss(b_flat, y)
        win = gru.critic_loss(b_win, y[:, None])
    for lf, lw in zip(flat, win):
        assert abs(lf.item() - lw.item()) <= 1e-12


def test_squashed_density_has_unit_mass():
    n = 200_000
    a = torch.linspace(-1, 1, n + 1, dtype=DTYPE)
    mid = (0.5 * (a[1:] + a[:-1])).unsqueeze(-1)
    mean, log_std = torch.full_like(mid, 0.3), torch.full_like(mid, -0.5)
    noise = (torch.atanh(mid) - mean) / log_std.exp()
    log_prob = gaussian_head(mean, log_std, noise=noise).log_prob
    mass = (log_prob.exp() * (2.0 / n)).sum().item()
    assert abs(mass - 1.0) <= 1e-3


def test_training_without_learning_is_a_rollout(model, short_cycle):
    cfg = CFG.model_copy(update={"learn": False, "warmup_steps": 0})
    env_a = ShevEnv(model, EpisodeConfig(cycle=short_cycle, initial_soc_choices=(0.6,)))
    env_b = ShevEnv(model, EpisodeConfig(cycle=short_cycle, initial_soc_choices=(0.6,)))
    agent_a, agent_b = _agent(cfg=cfg), _agent(cfg=cfg)
    before = flat_params(agent_a.actor).clone()
    buffer = TrajectoryBuffer(10_000)
    train(env_a, agent_a, cfg, 1, np.random.default_rng(9), buffer=buffer)
    expected = rollout(env_b, agent_b, np.random.default_rng(9), deterministic=False)
    assert list(env_a.records) == expected
    assert torch.equal(flat_params(agent_a.actor), before)
    stored = buffer.episode(0)
    assert stored["rewards"].tolist() == [r.reward for r in expected]
    assert stored["dones"].tolist() == [float(r.done) for r in expected]
