import numpy as np
import pytest

from app.agent.buffer import TrajectoryBuffer, returns_to_go
from app.core.errors import UsageError


def _fill(buffer, lengths, seed=0):
    """Episodes whose obs encode (episode id, step) so windows can be checked."""
    rng = np.random.default_rng(seed)
    for e, n in enumerate(lengths):
        for t in range(n):
            buffer.add([e, t, 0.0], rng.uniform(-1, 1, 2), float(rng.normal()), [e, t + 1, 0.0], t == n - 1)
        buffer.end_episode()


def test_returns_to_go_recursion():
    rewards = np.array([1.5, -2.0, 0.25, 3.0])
    rtg = returns_to_go(rewards)
    assert rtg[0] == rewards.sum()
    for t in range(3):
        assert rtg[t + 1] == rtg[t] - rewards[t]


def test_windows_are_contiguous_and_single_episode():
    buffer = TrajectoryBuffer(100_000)
    _fill(buffer, [30, 55, 12, 80])
    rng = np.random.default_rng(1)
    k = 10
    for _ in range(100):
        b = buffer.sample_windows(100, k, rng)
        ep_col, step_col = b["obs"][..., 0], b["obs"][..., 1]
        assert np.all(ep_col == ep_col[:, :1])
        long_enough = np.array([len(buffer.episode(int(e))["rewards"]) >= k for e in ep_col[:, 0]])
        steps = step_col[long_enough]
        assert np.all(np.diff(steps, axis=1) == 1)
        rec = b["rtg"][long_enough]
        assert np.array_equal(rec[:, 1:], rec[:, :-1] - b["rewards"][long_enough][:, :-1])
        assert np.array_equal(b["next_obs"][:, :-1][long_enough], b["obs"][:, 1:][long_enough])
        assert np.array_equal(b["timesteps"][long_enough], step_col[long_enough].astype(int))


def test_short_episode_is_left_padded():
    buffer = TrajectoryBuffer(1000)
    _fill(buffer, [3])
    b = buffer.sample_windows(2, 5, np.random.default_rng(0))
    assert b["obs"][0, :, 1].tolist() == [0, 0, 0, 1, 2]
    assert b["timesteps"][0].tolist() == [0, 0, 0, 1, 2]


def test_shifted_fields_past_episode_end():
    buffer = TrajectoryBuffer(1000)
    _fill(buffer, [4])
    b = buffer.sample_windows(1, 4, np.random.default_rng(0))
    assert b["next_rtg"][0, -1] == 0.0
    assert np.array_equal(b["next_actions"][0, -1], b["actions"][0, -1])
    assert b["next_timesteps"][0].tolist() == [1, 2, 3, 4]
    assert b["dones"][0].tolist() == [0.0, 0.0, 0.0, 1.0]


def test_transitions_carry_episode_ids():
    buffer = TrajectoryBuffer(1000)
    _fill(buffer, [5, 7])
    b = buffer.sample_transitions(32, np.random.default_rng(3))
    assert np.array_equal(b["episode"], b["obs"][:, 0].astype(int))
    assert np.array_equal(b["next_obs"][:, 1], b["obs"][:, 1] + 1)


def test_eviction_drops_whole_oldest_episodes():
    buffer = TrajectoryBuffer(20)
    _fill(buffer, [8, 8, 8])
    assert buffer.num_episodes == 2
    assert len(buffer) == 16
    assert buffer.episode(0)["id"] == 1


def test_oversized_episode_is_kept_alone():
    buffer = TrajectoryBuffer(5)
    _fill(buffer, [3, 9])
    assert buffer.num_episodes == 1 and len(buffer) == 9


def test_open_episode_is_not_sampleable():
    buffer = TrajectoryBuffer(100)
    buffer.add([0, 0, 0], [0, 0], 1.0, [0, 1, 0], False)
    with pytest.raises(UsageError):
        buffer.sample_transitions(1, np.random.default_rng(0))


def test_batch_larger_than_occupancy():
    buffer = TrajectoryBuffer(100)
    _fill(buffer, [4])
    with pytest.raises(UsageError):
        buffer.sample_windows(5, 2, np.random.default_rng(0))


def test_empty_end_episode_returns_none():
    assert TrajectoryBuffer(10).end_episode() is None
