"""Joint training of denoiser + inverse dynamics, and the receding-horizon planner."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .dataset import OfflineDataset, NormStats, normalize_state, sample_windows
from .diffusion import (Denoiser, DenoiserConfig, diffusion_loss, make_schedule, parse_sampler,
                        sample_trajectory)
from .invdyn import InverseDynamics, invdyn_loss, predict_action
from .neuralcore import Adam, Ema, load_checkpoint, save_checkpoint
from .netsim import Simulator, reward
from .ood import ood_penalty

log = logging.getLogger(__name__)

VARIANTS = ("cdmp", "cdmp_pen")


@dataclass
class TrainConfig:
    variant: str = "cdmp"
    K: int = 64
    H: int = 4
    gamma: float = 0.99
    beta_drop: float = 0.25
    zeta: float = 1.0
    epochs: int = 20
    steps_per_epoch: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    ema_decay: float = 0.995
    seed: int = 0
    schedule: str = "cosine"
    base_channels: int = 64
    step_embed_dim: int = 64
    cond_embed_dim: int = 64
    state_embed_dim: int = 64
    action_embed_dim: int = 32
    penalty_clip: float | None = None  # optionally clamp reconstructions in the OOD penalty like the sampler

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        base = dict(K=200, H=12, epochs=100, steps_per_epoch=1000, lr=1e-4, step_embed_dim=256,
                    cond_embed_dim=256, state_embed_dim=256, action_embed_dim=128)
        base.update(kw)
        return cls(**base)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.H < 2:
            raise ValueError("H must be >= 2 so a window holds at least one transition")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if not 0 <= self.beta_drop <= 1:
            raise ValueError("beta_drop must be in [0, 1]")
        if self.zeta < 0 or self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("zeta, epochs must be >= 0; steps_per_epoch, batch_size >= 1")


@dataclass
class PlannerConfig:
    omega: float = 1.6
    xi: float = 0.0
    y_target: float = 1.0
    sampler: str = "ddpm"

    def validate(self):
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if not 0 <= self.xi < 1:
            raise ValueError("xi must be in [0, 1)")
        if not 0 <= self.y_target <= 1:
            raise ValueError("y_target must be in [0, 1]")
        parse_sampler(self.sampler)


@dataclass
class TrainedModels:
    denoiser: Denoiser
    invdyn: InverseDynamics
    norm: NormStats
    config: TrainConfig
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.schedule = make_schedule(self.config.K, self.config.schedule)
        self.denoiser.eval()
        self.invdyn.eval()

    def save(self, directory, extra: dict | None = None):
        manifest = {"train_config": asdict(self.config), "norm": self.norm.to_dict(),
                    "denoiser_config": asdict(self.denoiser.cfg),
                    "invdyn": {"n_nodes": self.invdyn.n_nodes, "grid_shape": list(self.invdyn.grid_shape)},
                    "history": self.history}
        manifest.update(extra or {})
        save_checkpoint(directory, {"denoiser": self.denoiser, "invdyn": self.invdyn}, manifest)

    @classmethod
    def load(cls, directory) -> "TrainedModels":
        weights, manifest = load_checkpoint(directory)
        cfg = TrainConfig(**manifest["train_config"])
        den = Denoiser(DenoiserConfig(**manifest["denoiser_config"]))
        den.load_state_dict(weights["denoiser"])
        n_ch, n_sl = manifest["invdyn"]["grid_shape"]
        idm = InverseDynamics(den.cfg.state_dim, manifest["invdyn"]["n_nodes"], n_ch, n_sl,
                              state_embed=cfg.state_embed_dim, action_embed=cfg.action_embed_dim)
        idm.load_state_dict(weights["invdyn"])
        return cls(den, idm, NormStats.from_dict(manifest["norm"]), cfg, manifest.get("history", []))


class Trainer:
    """Algorithm-1 training loop with every random stream held on the object.

    ``state_dict``/``load_state_dict`` capture weights, optimizer moments, EMA
    shadows and RNG positions, so a resumed run continues bit-identically.
    """

    def __init__(self, dataset: OfflineDataset, cfg: TrainConfig):
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset.with_horizon(cfg.H, cfg.gamma)
        n_ch, n_sl = dataset.action_shape
        n_nodes = dataset.state_dim // 4
        self.schedule = make_schedule(cfg.K, cfg.schedule)
        self.denoiser = Denoiser(DenoiserConfig(horizon=cfg.H, state_dim=dataset.state_dim,
                                                base_channels=cfg.base_channels,
                                                step_embed_dim=cfg.step_embed_dim,
                                                cond_embed_dim=cfg.cond_embed_dim), seed=cfg.seed)
        self.invdyn = InverseDynamics(dataset.state_dim, n_nodes, n_ch, n_sl, state_embed=cfg.state_embed_dim,
                                      action_embed=cfg.action_embed_dim, seed=cfg.seed + 1)
        self.opt = Adam(list(self.denoiser.parameters()) + list(self.invdyn.parameters()), lr=cfg.lr)
        self.ema_denoiser = Ema(self.denoiser, cfg.ema_decay)
        self.ema_invdyn = Ema(self.invdyn, cfg.ema_decay)
        self.np_rng = np.random.default_rng(cfg.seed)
        self.torch_gen = torch.Generator().manual_seed(cfg.seed)
        self.epoch = 0
        self.history = []
        self.step_log = []

    def losses(self, batch):
        cfg = self.cfg
        x0 = torch.as_tensor(batch.x0, dtype=torch.float32)
        y = torch.as_tensor(batch.y, dtype=torch.float32)
        s, s_next = x0[:, :-1].reshape(-1, x0.shape[-1]), x0[:, 1:].reshape(-1, x0.shape[-1])
        acts = torch.as_tensor(batch.actions).reshape(s.shape[0], -1)
        l_inv = invdyn_loss(self.invdyn, s, acts, s_next)
        out = diffusion_loss(self.denoiser, x0, y, self.schedule, cfg.beta_drop, self.torch_gen)
        l_ood = torch.zeros(())
        if cfg.variant == "cdmp_pen":
            l_ood = ood_penalty(x0, out.x_k, out.eps_hat, out.k, self.schedule, cfg.penalty_clip)
        total = l_inv + out.loss + cfg.zeta * l_ood if cfg.variant == "cdmp_pen" else l_inv + out.loss
        return total, out.loss, l_inv, l_ood

    def train_step(self) -> dict:
        batch = sample_windows(self.dataset, self.cfg.H, self.cfg.batch_size, self.np_rng)
        self.denoiser.train()
        self.invdyn.train()
        total, l_diff, l_inv, l_ood = self.losses(batch)
        if not torch.isfinite(total):
            raise FloatingPointError(
                f"non-finite-loss at epoch {self.epoch}: diffusion={l_diff.item()}, "
                f"invdyn={l_inv.item()}, ood={l_ood.item()}")
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        self.ema_denoiser.update(self.denoiser)
        self.ema_invdyn.update(self.invdyn)
        rec = {"total": total.item(), "diffusion_loss": l_diff.item(), "invdyn_loss": l_inv.item(),
               "ood_penalty": l_ood.item()}
        self.step_log.append(rec)
        return rec

    def run_epoch(self) -> dict:
        t0 = time.time()
        recs = [self.train_step() for _ in range(self.cfg.steps_per_epoch)]
        row = {"epoch": self.epoch}
        for key in ("diffusion_loss", "invdyn_loss", "ood_penalty", "total"):
            row[key] = float(np.mean([r[key] for r in recs]))
        self.history.append(row)
        self.epoch += 1
        log.info("epoch %d total=%.4f diff=%.4f inv=%.4f ood=%.4f (%.1fs)", row["epoch"], row["total"],
                 row["diffusion_loss"], row["invdyn_loss"], row["ood_penalty"], time.time() - t0)
        return row

    def fit(self, epochs: int | None = None) -> TrainedModels:
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            self.run_epoch()
        return self.models()

    def models(self) -> TrainedModels:
        return TrainedModels(self.ema_denoiser.shadow, self.ema_invdyn.shadow, self.dataset.norm,
                             self.cfg, list(self.history))

    def state_dict(self) -> dict:
        return {
            "denoiser": self.denoiser.state_dict(), "invdyn": self.invdyn.state_dict(),
            "ema_denoiser": self.ema_denoiser.shadow.state_dict(),
            "ema_invdyn": self.ema_invdyn.shadow.state_dict(),
            "opt": self.opt.state_dict(), "np_rng": self.np_rng.bit_generator.state,
            "torch_gen": self.torch_gen.get_state(), "epoch": self.epoch, "history": self.history,
        }

    def load_state_dict(self, state: dict):
        self.denoiser.load_state_dict(state["denoiser"])
        self.invdyn.load_state_dict(state["invdyn"])
        self.ema_denoiser.shadow.load_state_dict(state["ema_denoiser"])
        self.ema_invdyn.shadow.load_state_dict(state["ema_invdyn"])
        self.opt.load_state_dict(state["opt"])
        self.np_rng.bit_generator.state = state["np_rng"]
        self.torch_gen.set_state(state["torch_gen"])
        self.epoch = state["epoch"]
        self.history = list(state["history"])

    def save_state(self, path):
        torch.save(self.state_dict(), path)

    def load_state(self, path):
        self.load_state_dict(torch.load(path, weights_only=False))


def train(dataset: OfflineDataset, cfg: TrainConfig) -> TrainedModels:
    return Trainer(dataset, cfg).fit()


# --- planning -------------------------------------------------------------

def plan_batch(models: TrainedModels, planner: PlannerConfig, s_raw: np.ndarray,
               generator: torch.Generator | None = None) -> np.ndarray:
    """One receding-horizon decision for each row of ``s_raw`` (B, 4N) -> (B, L, M)."""
    s_raw = np.atleast_2d(np.asarray(s_raw, dtype=np.float64))
    s_norm = torch.as_tensor(normalize_state(s_raw, models.norm), dtype=torch.float32)
    x0 = sample_trajectory(models.denoiser, models.schedule, planner.y_target, planner.omega, planner.xi,
                           s_norm, planner.sampler, generator, horizon=models.config.H)
    return predict_action(models.invdyn, x0[:, 0], x0[:, 1])


def plan_step(models: TrainedModels, planner: PlannerConfig, s_raw, generator=None) -> np.ndarray:
    return plan_batch(models, planner, np.asarray(s_raw)[None], generator)[0]


class PlannerPolicy:
    def __init__(self, models: TrainedModels, planner: PlannerConfig, seed: int = 0):
        planner.validate()
        self.models = models
        self.planner = planner
        self.generator = torch.Generator().manual_seed(seed)
        self.n_calls = 0
        self.time_spent = 0.0

    def __call__(self, states, sims):
        t0 = time.perf_counter()
        out = plan_batch(self.models, self.planner, states, self.generator)
        self.time_spent += time.perf_counter() - t0
        self.n_calls += 1
        return out


@dataclass
class EpisodeResult:
    rewards: np.ndarray
    metrics: list
    actions: np.ndarray

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards))

    def qos(self) -> dict:
        delivered = sum(m.delivered for m in self.metrics)
        dropped = sum(m.dropped for m in self.metrics)
        total_delay = sum(float(m.delay.sum()) for m in self.metrics)
        return {
            "reward": self.mean_reward,
            "throughput": delivered / len(self.metrics),
            "delay": total_delay / delivered if delivered else 0.0,
            "loss_rate": dropped / (delivered + dropped) if delivered + dropped else 0.0,
        }


def rollout_many(sims: list, policy, n_frames: int) -> list:
    """Step every simulator in lock-step; ``policy(states (B, 4N), sims)`` returns (B, L, M)."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    states = np.stack([s.state for s in sims])
    rewards = [[] for _ in sims]
    metrics = [[] for _ in sims]
    actions = [[] for _ in sims]
    for _ in range(n_frames):
        grids = np.asarray(policy(states, sims))
        nxt = []
        for i, sim in enumerate(sims):
            st, m = sim.step_frame(grids[i])
            nxt.append(st)
            rewards[i].append(reward(m))
            metrics[i].append(m)
            actions[i].append(grids[i])
        states = np.stack(nxt)
    return [EpisodeResult(np.array(r), m, np.array(a)) for r, m, a in zip(rewards, metrics, actions)]


def rollout(sim: Simulator, policy, n_frames: int) -> EpisodeResult:
    """Single-episode loop: observe, decide, step.

    ``policy`` is either a batch policy (see :func:`rollout_many`) or a
    :class:`TrainedModels`, in which case ``PlannerConfig()`` defaults apply.
    """
    if isinstance(policy, TrainedModels):
        policy = PlannerPolicy(policy, PlannerConfig())
    return rollout_many([sim], policy, n_frames)[0]


FRAMES_PER_SECOND = 20  # one frame = 50 ms of simulated time


def episode_seeds(seed: int, n_episodes: int) -> list[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n_episodes)]


def evaluate(policy_factory, config, scenario, seeds, episodes_per_seed: int = 5,
             n_frames: int = 100, joint: bool = False) -> dict:
    """Run ``episodes_per_seed`` episodes for every seed.

    ``policy_factory(seed)`` builds a fresh policy per seed so each seed owns its
    random stream.  With ``joint=True`` a single policy (built from the first
    seed) steps all episodes in one batch, which is much faster for the planner.
    Returns per-seed lists of :class:`EpisodeResult`.
    """
    seeds = list(seeds)
    sims = {seed: [Simulator(config, scenario, s) for s in episode_seeds(seed, episodes_per_seed)]
            for seed in seeds}
    if joint:
        flat = [sim for seed in seeds for sim in sims[seed]]
        eps = rollout_many(flat, policy_factory(seeds[0]), n_frames)
        return {seed: eps[i * episodes_per_seed:(i + 1) * episodes_per_seed] for i, seed in enumerate(seeds)}
    return {seed: rollout_many(sims[seed], policy_factory(seed), n_frames) for seed in seeds}


def summarize(results: dict) -> dict:
    """Mean/population-std of episode QoS across all episodes, plus per-seed means."""
    episodes = [ep for eps in results.values() for ep in eps]
    qos = [ep.qos() for ep in episodes]
    out = {}
    for key in ("reward", "throughput", "delay", "loss_rate"):
        vals = np.array([q[key] for q in qos])
        out[f"{key}_mean"] = float(vals.mean())
        out[f"{key}_std"] = float(vals.std())
    per_seed = {str(s): float(np.mean([ep.mean_reward for ep in eps])) for s, eps in results.items()}
    out["per_seed_reward"] = per_seed
    out["seed_reward_std"] = float(np.std(list(per_seed.values())))
    out["n_episodes"] = len(episodes)
    return out
