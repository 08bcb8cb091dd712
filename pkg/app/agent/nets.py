"""
Actor and critic networks: feedforward, gated-recurrent and decision-transformer
families, the squashed-Gaussian policy head, seeded initialization, flat
parameter views, a finite-difference gradient check and checkpoint files.

Everything runs in float64.
"""

import logging
import math
import os
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from app.core.errors import NumericError, PreconditionError, ShapeError, WorkbenchError
from app.models.schemas import NetConfig

logger = logging.getLogger(__name__)

DTYPE = torch.float64
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
SQUASH_EPS = 1e-6
CHECKPOINT_VERSION = 1


def _check_last_dim(x: torch.Tensor, expected: int, what: str):
    if x.shape[-1] != expected:
        raise ShapeError(f"{what}: expected last dimension {expected}, got {tuple(x.shape)}")


# --- Feedforward ---

class FFN(nn.Module):
    """ReLU hidden layers and a linear output; applied along the last axis."""

    def __init__(self, input_dim: int, hidden_width: int, depth: int, output_dim: int):
        super().__init__()
        self.input_dim = input_dim
        dims = [input_dim] + [hidden_width] * depth
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(dims[-1], output_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_last_dim(x, self.input_dim, "FFN input")
        for layer in self.hidden:
            x = F.relu(layer(x))
        return self.out(x)


# --- Gated recurrent ---

class GRUCell(nn.Module):
    """
    z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r)
    n = tanh(W_h x + U_h (r * h) + b_h), h' = (1 - z) * n + z * h
    """

    def __init__(self, input_dim: int, hidden_width: int):
        super().__init__()
        self.hidden_width = hidden_width
        self.x2h = nn.Linear(input_dim, 3 * hidden_width)
        self.h2zr = nn.Linear(hidden_width, 2 * hidden_width, bias=False)
        self.h2n = nn.Linear(hidden_width, hidden_width, bias=False)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        gx_z, gx_r, gx_n = self.x2h(x).chunk(3, dim=-1)
        gh_z, gh_r = self.h2zr(h).chunk(2, dim=-1)
        z = torch.sigmoid(gx_z + gh_z)
        r = torch.sigmoid(gx_r + gh_r)
        n = torch.tanh(gx_n + self.h2n(r * h))
        return (1.0 - z) * n + z * h


class GRUNet(nn.Module):
    """Stacked GRU cells with a linear read-out at every timestep."""

    def __init__(self, input_dim: int, hidden_width: int, layers: int, output_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_width = hidden_width
        self.cells = nn.ModuleList(
            GRUCell(input_dim if i == 0 else hidden_width, hidden_width) for i in range(layers))
        self.out = nn.Linear(hidden_width, output_dim)

    def initial_hidden(self, batch: int) -> torch.Tensor:
        return torch.zeros(len(self.cells), batch, self.hidden_width, dtype=DTYPE)

    def encode(self, x_seq: torch.Tensor, h0: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """(batch, T, in) -> top-layer hidden sequence (batch, T, width) and final hidden (layers, batch, width)."""
        if x_seq.dim() != 3 or x_seq.shape[1] < 1:
            raise ShapeError(f"GRU input must be (batch, T >= 1, features), got {tuple(x_seq.shape)}")
        _check_last_dim(x_seq, self.input_dim, "GRU input")
        batch = x_seq.shape[0]
        if h0 is None:
            h0 = self.initial_hidden(batch)
        elif tuple(h0.shape) != (len(self.cells), batch, self.hidden_width):
            raise ShapeError(f"h0 must be {(len(self.cells), batch, self.hidden_width)}, got {tuple(h0.shape)}")
        layer_in = x_seq
        finals = []
        for i, cell in enumerate(self.cells):
            h = h0[i]
            outputs = []
            for t in range(layer_in.shape[1]):
                h = cell(layer_in[:, t], h)
                outputs.append(h)
            layer_in = torch.stack(outputs, dim=1)
            finals.append(h)
        return layer_in, torch.stack(finals, dim=0)

    def forward(self, x_seq: torch.Tensor, h0: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        y, h = self.encode(x_seq, h0)
        return self.out(y), h


# --- Decision transformer ---

class CausalSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ShapeError("attention heads must divide the width")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, w = x.shape
        d = w // self.heads
        q, k, v = self.qkv(x).split(w, dim=-1)
        q, k, v = (t.view(b, n, self.heads, d).transpose(1, 2) for t in (q, k, v))
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(d)
        future = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(future, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, w)
        return self.proj(y)


class TransformerBlock(nn.Module):
    """Pre-LayerNorm block: causal attention and a GELU feedforward, both residual."""

    def __init__(self, width: int, heads: int, ff_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = CausalSelfAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, ff_mult * width), nn.GELU(), nn.Linear(ff_mult * width, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))


class DecisionTransformer(nn.Module):
    """
    Tokens are interleaved (R_1, s_1, a_1, ..., R_k, s_k, a_k). Predictions are
    read from the state tokens (actor) or the action tokens (critic).
    """

    def __init__(self, state_dim: int, action_dim: int, width: int, heads: int, blocks: int,
                 ff_mult: int, max_timestep: int, output_dim: int, readout: str = "state"):
        super().__init__()
        if readout not in ("state", "action"):
            raise WorkbenchError(f"unknown readout '{readout}'")
        self.state_dim, self.action_dim = state_dim, action_dim
        self.max_timestep = max_timestep
        self.readout = readout
        self._warned_overflow = False
        self.embed_return = nn.Linear(1, width)
        self.embed_state = nn.Linear(state_dim, width)
        self.embed_action = nn.Linear(action_dim, width)
        self.embed_timestep = nn.Embedding(max_timestep, width)
        self.blocks = nn.ModuleList(TransformerBlock(width, heads, ff_mult) for _ in range(blocks))
        self.ln_f = nn.LayerNorm(width)
        self.out = nn.Linear(width, output_dim)

    def embed(self, returns, states, actions, timesteps) -> torch.Tensor:
        if returns.dim() == 2:
            returns = returns.unsqueeze(-1)
        _check_last_dim(states, self.state_dim, "DT states")
        _check_last_dim(actions, self.action_dim, "DT actions")
        b, k = states.shape[:2]
        if returns.shape[:2] != (b, k) or actions.shape[:2] != (b, k) or tuple(timesteps.shape) != (b, k):
            raise ShapeError("returns, states, actions and timesteps must share (batch, k)")
        if torch.any(timesteps < 0):
            raise PreconditionError("timesteps must be non-negative")
        if not self._warned_overflow and bool(torch.any(timesteps >= self.max_timestep)):
            logger.warning("Timestep %d is past the embedding table (%d rows); later steps share its last row",
                           int(timesteps.max()), self.max_timestep)
            self._warned_overflow = True
        time = self.embed_timestep(timesteps.clamp(max=self.max_timestep - 1))
        tokens = torch.stack([self.embed_return(returns) + time, self.embed_state(states) + time,
                              self.embed_action(actions) + time], dim=2)
        return tokens.reshape(b, 3 * k, -1)

    def trunk(self, tokens: torch.Tensor) -> torch.Tensor:
        """Run the blocks over embedded tokens and return the per-step read-out."""
        if tokens.shape[1] % 3:
            raise ShapeError(f"token count {tokens.shape[1]} is not a multiple of 3")
        x = tokens
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x)
        picked = x[:, 1::3] if self.readout == "state" else x[:, 2::3]
        return self.out(picked)

    def forward(self, returns, states, actions, timesteps) -> torch.Tensor:
        return self.trunk(self.embed(returns, states, actions, timesteps))


# --- Policy head ---

class PolicyOutput(NamedTuple):
    mean: torch.Tensor
    log_std: torch.Tensor
    action: torch.Tensor
    log_prob: torch.Tensor
    pre_tanh: torch.Tensor


def gaussian_head(mean: torch.Tensor, log_std: torch.Tensor, noise: Optional[torch.Tensor] = None,
                  deterministic: bool = False, generator: Optional[torch.Generator] = None) -> PolicyOutput:
    log_std = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
    std = log_std.exp()
    if deterministic:
        u = mean
    else:
        if noise is None:
            noise = torch.randn(mean.shape, dtype=mean.dtype, generator=generator)
        u = mean + std * noise
    action = torch.tanh(u)
    log_prob = torch.distributions.Normal(mean, std).log_prob(u) - torch.log(1.0 - action.pow(2) + SQUASH_EPS)
    return PolicyOutput(mean, log_std, action, log_prob.sum(dim=-1), u)


# --- Actor / critic wrappers ---

def _body(cfg: NetConfig, input_dim: int, output_dim: int, readout: str) -> nn.Module:
    if cfg.family == "FFN":
        return FFN(input_dim, cfg.hidden_width, cfg.layers, output_dim)
    if cfg.family == "GRU":
        return GRUNet(input_dim, cfg.hidden_width, cfg.layers, output_dim)
    return DecisionTransformer(cfg.input_dim, cfg.output_dim, cfg.hidden_width, cfg.attention_heads, cfg.layers,
                               cfg.ff_mult, cfg.max_timestep, output_dim, readout=readout)


class Actor(nn.Module):
    """
    FFN: obs (..., s). GRU: obs (batch, T, s) plus optional hidden.
    DT: (returns, obs, actions, timesteps) windows. Returns per-step
    (mean, log_std) and the GRU hidden state (None otherwise).
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.family = cfg.family
        self.body = _body(cfg, cfg.input_dim, 2 * cfg.output_dim, "state")

    def forward(self, obs, actions=None, returns=None, timesteps=None, hidden=None):
        if self.family == "FFN":
            out = self.body(obs)
        elif self.family == "GRU":
            out, hidden = self.body(obs, hidden)
        else:
            out = self.body(returns, obs, actions, timesteps)
        mean, log_std = out.chunk(2, dim=-1)
        return mean, log_std, hidden


class Critic(nn.Module):
    """Q(s, a) per timestep; the DT critic reads its value at the action token."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.family = cfg.family
        self.body = _body(cfg, cfg.input_dim + cfg.output_dim, 1, "action")

    def forward(self, obs, actions, returns=None, timesteps=None) -> torch.Tensor:
        if self.family == "DT":
            return self.body(returns, obs, actions, timesteps)
        x = torch.cat([obs, actions], dim=-1)
        if self.family == "GRU":
            return self.body(x)[0]
        return self.body(x)


# --- Initialization ---

def _init_module(module: nn.Module):
    if isinstance(module, nn.Linear):
        # uniform with bound sqrt(6 / fan_in)
        nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, mean=0.0, std=0.02)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Deterministic per seed; leaves the global torch RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module.apply(_init_module)
    return module.to(DTYPE)


def build_actor(cfg: NetConfig, seed: int) -> Actor:
    return init_params(Actor(cfg), seed)


def build_critic(cfg: NetConfig, seed: int) -> Critic:
    return init_params(Critic(cfg), seed)


# --- Flat parameter views ---

def flat_params(module: nn.Module) -> torch.Tensor:
    return parameters_to_vector(module.parameters()).detach().clone()


def load_flat_params(module: nn.Module, vector: torch.Tensor) -> None:
    expected = sum(p.numel() for p in module.parameters())
    if vector.numel() != expected:
        raise ShapeError(f"flat vector has {vector.numel()} entries, module has {expected}")
    with torch.no_grad():
        vector_to_parameters(vector.to(DTYPE), module.parameters())


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-5,
               n_coords: int = 200, seed: int = 0) -> float:
    """
    Max relative error between autograd and central differences over a random
    subsample of coordinates: |a - n| / max(1e-8, |a| + |n|).
    """
    if eps <= 0:
        raise PreconditionError("eps must be positive")
    params = list(params)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError("grad_check: loss is not finite at the base point")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1)
                          for g, p in zip(grads, params)]).detach()

    index: List[Tuple[int, int]] = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(index), size=min(n_coords, len(index)), replace=False)
    offsets = np.cumsum([0] + [p.numel() for p in params])

    worst = 0.0
    with torch.no_grad():
        for pick in picks:
            i, j = index[pick]
            flat = params[i].view(-1)
            original = flat[j].item()
            flat[j] = original + eps
            f_plus = loss_fn().item()
            flat[j] = original - eps
            f_minus = loss_fn().item()
            flat[j] = original
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError(f"grad_check: non-finite loss while perturbing coordinate {pick}")
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic[offsets[i] + j].item()
            worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    return worst


# --- Checkpoints ---

def save_checkpoint(path: str | os.PathLike, nets: Dict[str, nn.Module], configs: Dict[str, NetConfig],
                    meta: Dict | None = None) -> Path:
    """Named state dicts plus the NetConfig of every network, versioned."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "configs": {name: cfg.model_dump() for name, cfg in configs.items()},
        "state": {name: net.state_dict() for name, net in nets.items()},
        "meta": meta or {},
    }
    torch.save(payload, p)
    return p


def load_checkpoint(path: str | os.PathLike) -> Dict:
    p = Path(path)
    if not p.is_file():
        raise PreconditionError(f"checkpoint not found: {p}")
    payload = torch.load(p, map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise PreconditionError(f"{p}: unsupported checkpoint version {payload.get('version')!r}")
    payload["configs"] = {name: NetConfig.model_validate(cfg) for name, cfg in payload["configs"].items()}
    return payload
