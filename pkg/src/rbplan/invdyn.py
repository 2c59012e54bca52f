"""Autoregressive RB-grid decoder: inverse dynamics f(s, s') and the behavior-cloning head f(s)."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .neuralcore import init_params


class ActionDecoder(nn.Module):
    """Encodes the input state(s), then emits one node choice per RB.

    Positions run row-major over (channel, slot).  A GRU carries the choices
    made so far; its input at position ``j`` is the embedding of the node
    picked at ``j - 1`` (a start token at ``j = 0``) plus a position embedding.
    """

    def __init__(self, input_dim: int, n_nodes: int, n_channels: int, n_slots: int,
                 state_embed: int = 128, action_embed: int = 32, seed: int = 0):
        super().__init__()
        self.input_dim = input_dim
        self.n_nodes = n_nodes
        self.grid_shape = (n_channels, n_slots)
        self.n_positions = n_channels * n_slots
        self.encoder = nn.Sequential(
            nn.Linear(input_dim, state_embed), nn.Mish(),
            nn.Linear(state_embed, state_embed), nn.Mish(),
            nn.Linear(state_embed, state_embed),
        )
        self.action_embed = nn.Embedding(n_nodes + 1, action_embed)  # last row = start token
        self.position_embed = nn.Embedding(self.n_positions, action_embed)
        self.rnn = nn.GRU(action_embed, state_embed, batch_first=True)
        self.head = nn.Sequential(nn.Linear(2 * state_embed, state_embed), nn.Mish(),
                                  nn.Linear(state_embed, n_nodes))
        init_params(self, seed)

    def encode(self, inputs: torch.Tensor) -> torch.Tensor:
        if inputs.shape[-1] != self.input_dim:
            raise ValueError(f"dimension-mismatch: expected {self.input_dim} input features, got {inputs.shape[-1]}")
        return self.encoder(inputs)

    def _step_input(self, prev: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        return self.action_embed(prev) + self.position_embed(positions)

    def teacher_logits(self, inputs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        """Logits (B, P, N) with ground-truth previous choices fed back."""
        b = inputs.shape[0]
        flat = actions.reshape(b, self.n_positions).long()
        enc = self.encode(inputs)
        start = torch.full((b, 1), self.n_nodes, dtype=torch.long)
        prev = torch.cat([start, flat[:, :-1]], dim=1)
        pos = torch.arange(self.n_positions).expand(b, -1)
        out, _ = self.rnn(self._step_input(prev, pos), enc[None].contiguous())
        return self.head(torch.cat([out, enc[:, None].expand(-1, self.n_positions, -1)], dim=-1))

    # incremental interface used by greedy decoding
    def start(self, inputs: torch.Tensor):
        enc = self.encode(inputs)
        return {"enc": enc, "h": enc[None].contiguous()}

    def step(self, ctx, prev: torch.Tensor, j: int):
        pos = torch.full_like(prev, j)
        out, ctx["h"] = self.rnn(self._step_input(prev, pos)[:, None], ctx["h"])
        logits = self.head(torch.cat([out[:, 0], ctx["enc"]], dim=-1))
        return logits, ctx


class InverseDynamics(ActionDecoder):
    def __init__(self, state_dim: int, n_nodes: int, n_channels: int, n_slots: int, **kwargs):
        super().__init__(2 * state_dim, n_nodes, n_channels, n_slots, **kwargs)
        self.state_dim = state_dim


class BehaviorCloning(ActionDecoder):
    def __init__(self, state_dim: int, n_nodes: int, n_channels: int, n_slots: int, **kwargs):
        super().__init__(state_dim, n_nodes, n_channels, n_slots, **kwargs)
        self.state_dim = state_dim


@torch.no_grad()
def greedy_decode(model, inputs: torch.Tensor) -> np.ndarray:
    """Argmax at every position (first maximum wins, i.e. lowest node index)."""
    inputs = torch.as_tensor(inputs, dtype=_dtype(model))
    single = inputs.ndim == 1
    if single:
        inputs = inputs[None]
    b = inputs.shape[0]
    ctx = model.start(inputs)
    prev = torch.full((b,), model.n_nodes, dtype=torch.long)
    picks = []
    for j in range(model.n_positions):
        logits, ctx = model.step(ctx, prev, j)
        prev = torch.argmax(logits, dim=-1)
        picks.append(prev)
    grid = torch.stack(picks, dim=1).reshape(b, *model.grid_shape).numpy().astype(np.int64)
    return grid[0] if single else grid


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def _pair(model, s, s_next):
    s = torch.as_tensor(s, dtype=_dtype(model))
    s_next = torch.as_tensor(s_next, dtype=_dtype(model))
    if s.shape != s_next.shape or s.shape[-1] != model.state_dim:
        raise ValueError(f"dimension-mismatch: states must both have {model.state_dim} features")
    return torch.cat([s, s_next], dim=-1)


def predict_action(model, s, s_next) -> np.ndarray:
    return greedy_decode(model, _pair(model, s, s_next))


def invdyn_loss(model, s, a, s_next) -> torch.Tensor:
    """Teacher-forced cross-entropy averaged over every RB position."""
    inputs = _pair(model, s, s_next)
    if inputs.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    logits = model.teacher_logits(inputs, torch.as_tensor(a))
    target = torch.as_tensor(a).reshape(inputs.shape[0], -1).long()
    return F.cross_entropy(logits.reshape(-1, model.n_nodes), target.reshape(-1))


def bc_loss(model, s, a) -> torch.Tensor:
    s = torch.as_tensor(s, dtype=_dtype(model))
    logits = model.teacher_logits(s, torch.as_tensor(a))
    target = torch.as_tensor(a).reshape(s.shape[0], -1).long()
    return F.cross_entropy(logits.reshape(-1, model.n_nodes), target.reshape(-1))


def per_rb_accuracy(model, inputs, actions) -> float:
    """Fraction of RB entries the greedy decode gets right."""
    pred = greedy_decode(model, inputs)
    return float(np.mean(pred == np.asarray(actions).reshape(pred.shape)))
