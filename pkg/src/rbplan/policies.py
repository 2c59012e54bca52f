"""Batch policies for evaluation, plus the behavior-cloning baseline."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .dataset import NormStats, OfflineDataset, normalize_state
from .invdyn import BehaviorCloning, bc_loss, greedy_decode
from .neuralcore import Adam, Ema, load_checkpoint, save_checkpoint
from .netsim import behavior_policy, oracle_policy, random_policy, uniform_policy

log = logging.getLogger(__name__)


def oracle(seed=None):
    return lambda states, sims: np.stack([oracle_policy(s.config, s.high_set) for s in sims])


def uniform(seed=None):
    return lambda states, sims: np.stack([uniform_policy(s.config) for s in sims])


def random(seed: int = 0):
    rng = np.random.default_rng(seed)
    return lambda states, sims: np.stack([random_policy(s.config, rng) for s in sims])


def behavior(seed: int = 0, swap_prob: float = 0.2):
    rng = np.random.default_rng(seed)
    return lambda states, sims: np.stack([behavior_policy(s.config, s.high_set, swap_prob, rng) for s in sims])


@dataclass
class BCConfig:
    epochs: int = 20
    steps_per_epoch: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    ema_decay: float = 0.995
    state_embed_dim: int = 64
    action_embed_dim: int = 32
    seed: int = 0


class BCModel:
    def __init__(self, model: BehaviorCloning, norm: NormStats, config: BCConfig, history=None):
        self.model = model.eval()
        self.norm = norm
        self.config = config
        self.history = history or []

    def act(self, states) -> np.ndarray:
        s = torch.as_tensor(normalize_state(np.atleast_2d(states), self.norm), dtype=torch.float32)
        return greedy_decode(self.model, s)

    def policy(self, seed=None):
        return lambda states, sims: self.act(states)

    def save(self, directory):
        manifest = {"bc_config": asdict(self.config), "norm": self.norm.to_dict(), "history": self.history,
                    "n_nodes": self.model.n_nodes, "grid_shape": list(self.model.grid_shape),
                    "state_dim": self.model.state_dim}
        save_checkpoint(directory, {"bc": self.model}, manifest)

    @classmethod
    def load(cls, directory) -> "BCModel":
        weights, manifest = load_checkpoint(directory)
        cfg = BCConfig(**manifest["bc_config"])
        model = BehaviorCloning(manifest["state_dim"], manifest["n_nodes"], *manifest["grid_shape"],
                                state_embed=cfg.state_embed_dim, action_embed=cfg.action_embed_dim)
        model.load_state_dict(weights["bc"])
        return cls(model, NormStats.from_dict(manifest["norm"]), cfg, manifest.get("history"))


def train_bc(dataset: OfflineDataset, cfg: BCConfig, transitions=None) -> BCModel:
    """Cross-entropy fit of state -> RB grid with the autoregressive head, no diffusion."""
    s, a, _ = transitions if transitions is not None else dataset.transitions()
    s = torch.as_tensor(s, dtype=torch.float32)
    a = torch.as_tensor(a.reshape(len(a), -1))
    n_ch, n_sl = dataset.action_shape
    model = BehaviorCloning(dataset.state_dim, dataset.state_dim // 4, n_ch, n_sl,
                            state_embed=cfg.state_embed_dim, action_embed=cfg.action_embed_dim, seed=cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    ema = Ema(model, cfg.ema_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(cfg.steps_per_epoch):
            idx = torch.randint(0, len(s), (min(cfg.batch_size, len(s)),), generator=gen)
            loss = bc_loss(model, s[idx], a[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            ema.update(model)
            losses.append(loss.item())
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
        log.info("bc epoch %d loss=%.4f", epoch, history[-1]["loss"])
    return BCModel(ema.shadow, dataset.norm, cfg, history)
