import math

import numpy as np
import pytest
import torch

from app.core.errors import PreconditionError, ShapeError
from app.agent.nets import (
    DTYPE,
    FFN,
    LOG_STD_MAX,
    LOG_STD_MIN,
    DecisionTransformer,
    GRUCell,
    GRUNet,
    build_actor,
    build_critic,
    flat_params,
    gaussian_head,
    grad_check,
    init_params,
    load_checkpoint,
    load_flat_params,
    save_checkpoint,
)
from app.models.schemas import NetConfig


def _randn(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, dtype=DTYPE, generator=g)


def _dt(blocks=1, heads=4, readout="state"):
    return init_params(DecisionTransformer(3, 2, 16, heads, blocks, 4, 50, 4, readout=readout), seed=3)


def _dt_inputs(b=2, k=5, seed=0):
    return (_randn(b, k, seed=seed), _randn(b, k, 3, seed=seed + 1), _randn(b, k, 2, seed=seed + 2),
            torch.arange(k).repeat(b, 1))


class TestGradCheck:
    def test_ffn(self):
        net = init_params(FFN(3, 16, 2, 2), seed=1)
        x = _randn(8, 3)
        err = grad_check(lambda: torch.tanh(net(x)).pow(2).sum(), list(net.parameters()), n_coords=200)
        assert err < 1e-4

    def test_gru_two_layers(self):
        net = init_params(GRUNet(3, 8, 2, 2), seed=1)
        x = _randn(4, 6, 3)
        err = grad_check(lambda: net(x)[0].pow(2).sum(), list(net.parameters()), n_coords=200)
        assert err < 1e-4

    def test_decision_transformer(self):
        net = _dt(blocks=1, heads=4)
        inputs = _dt_inputs()
        err = grad_check(lambda: net(*inputs).pow(2).sum(), list(net.parameters()), n_coords=200)
        assert err < 1e-4

    def test_eps_must_be_positive(self):
        net = init_params(FFN(3, 4, 1, 1), seed=1)
        with pytest.raises(PreconditionError):
            grad_check(lambda: net(_randn(2, 3)).sum(), list(net.parameters()), eps=0.0)


class TestCausality:
    def test_decision_transformer_prefix_is_bitwise_invariant(self):
        net = _dt(blocks=2)
        rng = np.random.default_rng(0)
        k = 6
        with torch.no_grad():
            for trial in range(100):
                returns, states, actions, timesteps = _dt_inputs(b=1, k=k, seed=trial)
                base = net(returns, states, actions, timesteps)
                t = int(rng.integers(0, k - 1))
                states2, actions2, returns2 = states.clone(), actions.clone(), returns.clone()
                states2[:, t + 1:] += _randn(1, k - t - 1, 3, seed=1000 + trial)
                actions2[:, t + 1:] += 1.0
                returns2[:, t + 1:] -= 2.0
                out = net(returns2, states2, actions2, timesteps)
                assert torch.equal(out[:, :t + 1], base[:, :t + 1])

    def test_action_readout_sees_its_own_action(self):
        net = _dt(readout="action")
        returns, states, actions, timesteps = _dt_inputs(b=1, k=3)
        with torch.no_grad():
            base = net(returns, states, actions, timesteps)
            actions2 = actions.clone()
            actions2[:, 1] += 1.0
            out = net(returns, states, actions2, timesteps)
        assert torch.equal(out[:, 0], base[:, 0])
        assert not torch.equal(out[:, 1], base[:, 1])

    def test_gru_prefix_is_bitwise_invariant(self):
        net = init_params(GRUNet(3, 8, 2, 2), seed=2)
        rng = np.random.default_rng(1)
        with torch.no_grad():
            for trial in range(100):
                x = _randn(1, 7, 3, seed=trial)
                base, _ = net(x)
                t = int(rng.integers(0, 6))
                x2 = x.clone()
                x2[:, t + 1:] = _randn(1, 6 - t, 3, seed=500 + trial)
                out, _ = net(x2)
                assert torch.equal(out[:, :t + 1], base[:, :t + 1])


class TestTimestepTable:
    def test_overflow_warns_once_and_shares_last_row(self, caplog):
        net = _dt()
        returns, states, actions, _ = _dt_inputs(b=1, k=2)
        past = torch.tensor([[60, 70]])
        with torch.no_grad(), caplog.at_level("WARNING", logger="app.agent.nets"):
            a = net(returns, states, actions, past)
            b = net(returns, states, actions, torch.tensor([[49, 49]]))
            net(returns, states, actions, past)
        assert torch.equal(a, b)
        warnings = [r for r in caplog.records if "embedding table" in r.getMessage()]
        assert len(warnings) == 1

    def test_in_range_is_silent(self, caplog):
        with torch.no_grad(), caplog.at_level("WARNING", logger="app.agent.nets"):
            _dt()(*_dt_inputs())
        assert not caplog.records


class TestGRUCell:
    def test_hand_computed_step(self):
        cell = GRUCell(2, 1).to(DTYPE)
        with torch.no_grad():
            for p in cell.parameters():
                p.zero_()
            cell.x2h.bias.copy_(torch.tensor([0.0, 0.0, 0.7], dtype=DTYPE))
        h = torch.tensor([[0.4]], dtype=DTYPE)
        out = cell(torch.zeros(1, 2, dtype=DTYPE), h)
        # z = r = sigmoid(0) = 0.5, n = tanh(0.7)
        assert out.item() == pytest.approx(0.5 * math.tanh(0.7) + 0.5 * 0.4, abs=1e-15)

    def test_zero_weights_halve_the_hidden_state(self):
        cell = GRUCell(3, 4).to(DTYPE)
        with torch.no_grad():
            for p in cell.parameters():
                p.zero_()
        h = _randn(2, 4)
        assert torch.allclose(cell(_randn(2, 3), h), 0.5 * h, atol=0, rtol=0)

    def test_padded_window_output_defined(self):
        net = init_params(GRUNet(3, 8, 1, 2), seed=0)
        x = _randn(1, 1, 3).repeat(1, 10, 1)
        y, h = net(x)
        assert y.shape == (1, 10, 2) and h.shape == (1, 1, 8)
        assert torch.isfinite(y).all()

    def test_bad_hidden_shape(self):
        net = init_params(GRUNet(3, 8, 2, 2), seed=0)
        with pytest.raises(ShapeError):
            net(_randn(1, 4, 3), torch.zeros(1, 1, 8, dtype=DTYPE))


class TestGaussianHead:
    def test_log_std_is_clamped(self):
        mean = torch.zeros(1, 2, dtype=DTYPE)
        out = gaussian_head(mean, torch.tensor([[-20.0, 20.0]], dtype=DTYPE), deterministic=True)
        assert out.log_std.tolist() == [[LOG_STD_MIN, LOG_STD_MAX]]

    def test_log_prob_matches_change_of_variables(self):
        mean = torch.tensor([[0.3, -0.2]], dtype=DTYPE)
        log_std = torch.tensor([[-1.0, -0.5]], dtype=DTYPE)
        noise = torch.tensor([[0.5, -1.5]], dtype=DTYPE)
        out = gaussian_head(mean, log_std, noise=noise)
        u = mean + log_std.exp() * noise
        gauss = -0.5 * noise ** 2 - log_std - 0.5 * math.log(2 * math.pi)
        expected = (gauss - torch.log(1 - torch.tanh(u) ** 2 + 1e-6)).sum(-1)
        assert torch.allclose(out.log_prob, expected, rtol=1e-12)
        assert torch.equal(out.action, torch.tanh(u))

    def test_deterministic_uses_mean(self):
        mean = torch.tensor([[0.3, -0.2]], dtype=DTYPE)
        out = gaussian_head(mean, torch.zeros_like(mean), deterministic=True)
        assert torch.equal(out.action, torch.tanh(mean))


class TestActorCritic:
    @pytest.mark.parametrize("family", ["FFN", "GRU"])
    def test_zero_parameters_predict_zero_action(self, family):
        actor = build_actor(NetConfig(family=family, hidden_width=8), seed=1)
        load_flat_params(actor, torch.zeros_like(flat_params(actor)))
        obs = _randn(1, 1, 3) if family == "GRU" else _randn(1, 3)
        mean, log_std, _ = actor(obs)
        assert torch.equal(gaussian_head(mean, log_std, deterministic=True).action, torch.zeros_like(mean))

    def test_initialization_is_seeded(self):
        cfg = NetConfig(family="DT", hidden_width=16)
        a = flat_params(build_critic(cfg, seed=5))
        b = flat_params(build_critic(cfg, seed=5))
        c = flat_params(build_critic(cfg, seed=6))
        assert torch.equal(a, b) and not torch.equal(a, c)
        assert a.dtype == DTYPE

    def test_dt_critic_shape(self):
        critic = build_critic(NetConfig(family="DT", hidden_width=16), seed=1)
        returns, states, actions, timesteps = _dt_inputs(b=3, k=4)
        assert critic(states, actions, returns, timesteps).shape == (3, 4, 1)

    def test_ffn_rejects_wrong_input(self):
        actor = build_actor(NetConfig(family="FFN", hidden_width=8), seed=1)
        with pytest.raises(ShapeError):
            actor(_randn(2, 5))

    def test_flat_vector_length_checked(self):
        actor = build_actor(NetConfig(hidden_width=8), seed=1)
        with pytest.raises(ShapeError):
            load_flat_params(actor, torch.zeros(3, dtype=DTYPE))


def test_checkpoint_round_trip(tmp_path):
    cfg = NetConfig(family="GRU", hidden_width=8)
    actor = build_actor(cfg, seed=1)
    path = save_checkpoint(tmp_path / "a.pt", {"actor": actor}, {"actor": cfg}, {"episode": 3})
    payload = load_checkpoint(path)
    assert payload["configs"]["actor"] == cfg
    assert payload["meta"]["episode"] == 3
    clone = build_actor(cfg, seed=99)
    clone.load_state_dict(payload["state"]["actor"])
    assert torch.equal(flat_params(clone), flat_params(actor))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(PreconditionError):
        load_checkpoint(tmp_path / "missing.pt")
