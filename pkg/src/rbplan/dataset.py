"""Offline trajectory dataset: collection, normalization, window sampling, storage."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .netsim import Simulator, behavior_policy, reward


@dataclass
class Trajectory:
    states: np.ndarray  # (T + 1, 4N)
    actions: np.ndarray  # (T, L, M) int
    rewards: np.ndarray  # (T,)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if len(self.states) != len(self.actions) + 1 or len(self.actions) != len(self.rewards):
            raise ValueError("need |states| = |actions| + 1 = |rewards| + 1")

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass
class NormStats:
    state_min: np.ndarray
    state_max: np.ndarray
    return_min: float
    return_max: float
    horizon: int
    gamma: float

    def to_dict(self) -> dict:
        return {
            "state_min": self.state_min.tolist(),
            "state_max": self.state_max.tolist(),
            "return_min": float(self.return_min),
            "return_max": float(self.return_max),
            "horizon": int(self.horizon),
            "gamma": float(self.gamma),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            state_min=np.asarray(d["state_min"], dtype=np.float64),
            state_max=np.asarray(d["state_max"], dtype=np.float64),
            return_min=float(d["return_min"]),
            return_max=float(d["return_max"]),
            horizon=int(d["horizon"]),
            gamma=float(d["gamma"]),
        )

    def normalize_return(self, ret):
        span = self.return_max - self.return_min
        if span <= 0:
            return np.zeros_like(np.asarray(ret, dtype=np.float64))
        return (np.asarray(ret, dtype=np.float64) - self.return_min) / span


def discounted_return(rewards, gamma: float) -> float:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("empty-sequence: need at least one reward")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    return float(np.sum(gamma ** np.arange(rewards.size) * rewards))


def window_returns(rewards: np.ndarray, horizon: int, gamma: float) -> np.ndarray:
    """Discounted return of the ``horizon`` rewards starting at each offset.

    Only offsets with all ``horizon`` rewards inside the episode are kept, so the
    windows that would run past the terminal state are dropped.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    n_off = len(rewards) + 1 - horizon
    if n_off < 1:
        return np.zeros(0)
    out = np.zeros(n_off)
    for k in range(horizon):
        out += gamma ** k * rewards[k:k + n_off]
    return out


def normalize_state(s, norm: NormStats) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != norm.state_min.shape[0]:
        raise ValueError(f"dimension-mismatch: state has {s.shape[-1]} dims, stats have {norm.state_min.shape[0]}")
    span = norm.state_max - norm.state_min
    safe = np.where(span > 0, span, 1.0)
    out = 2.0 * (s - norm.state_min) / safe - 1.0
    return np.where(span > 0, out, 0.0)


def denormalize_state(v, norm: NormStats) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != norm.state_min.shape[0]:
        raise ValueError(f"dimension-mismatch: vector has {v.shape[-1]} dims, stats have {norm.state_min.shape[0]}")
    span = norm.state_max - norm.state_min
    return np.where(span > 0, (v + 1.0) / 2.0 * span + norm.state_min, norm.state_min)


def compute_norm_stats(trajectories, horizon: int, gamma: float) -> NormStats:
    states = np.concatenate([t.states for t in trajectories])
    rets = np.concatenate([window_returns(t.rewards, horizon, gamma) for t in trajectories])
    if rets.size == 0:
        raise ValueError(f"H-too-large: no trajectory has a full window of {horizon} states")
    return NormStats(states.min(axis=0), states.max(axis=0), float(rets.min()), float(rets.max()),
                     horizon, gamma)


@dataclass
class WindowBatch:
    """A mini-batch of normalized state windows with their return condition."""

    x0: np.ndarray  # (B, H, D) normalized states
    y: np.ndarray  # (B,) normalized return in [0, 1]
    actions: np.ndarray  # (B, H - 1, L, M) actions between consecutive window states
    source: np.ndarray  # (B, 2) trajectory id, offset

    def __len__(self):
        return len(self.y)


@dataclass
class OfflineDataset:
    trajectories: list
    norm: NormStats
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("dataset must contain at least one trajectory")
        dim = self.trajectories[0].states.shape[1]
        ashape = self.trajectories[0].actions.shape[1:]
        for t in self.trajectories:
            if t.states.shape[1] != dim or t.actions.shape[1:] != ashape:
                raise ValueError("all trajectories must share state dimension and action shape")
        self._cache = {}

    @property
    def state_dim(self) -> int:
        return self.trajectories[0].states.shape[1]

    @property
    def action_shape(self) -> tuple:
        return tuple(self.trajectories[0].actions.shape[1:])

    def with_horizon(self, horizon: int, gamma: float) -> "OfflineDataset":
        """Same trajectories, return statistics recomputed for another window length."""
        if horizon == self.norm.horizon and gamma == self.norm.gamma:
            return self
        return OfflineDataset(self.trajectories, compute_norm_stats(self.trajectories, horizon, gamma),
                              dict(self.meta))

    def state_dataset(self) -> np.ndarray:
        """All normalized states, one row each (a multiset, duplicates kept)."""
        return normalize_state(np.concatenate([t.states for t in self.trajectories]), self.norm)

    def transitions(self, normalized: bool = True):
        s = np.concatenate([t.states[:-1] for t in self.trajectories])
        s_next = np.concatenate([t.states[1:] for t in self.trajectories])
        a = np.concatenate([t.actions for t in self.trajectories])
        if normalized:
            s, s_next = normalize_state(s, self.norm), normalize_state(s_next, self.norm)
        return s, a, s_next

    def mean_reward(self) -> float:
        return float(np.mean(np.concatenate([t.rewards for t in self.trajectories])))

    def _windows(self, horizon: int):
        key = ("windows", horizon, self.norm.horizon, self.norm.gamma)
        if key not in self._cache:
            shortest = min(t.length for t in self.trajectories)
            if horizon > shortest:
                raise ValueError(f"H-too-large: H={horizon} exceeds shortest trajectory length {shortest}")
            index, returns = [], []
            for i, t in enumerate(self.trajectories):
                r = window_returns(t.rewards, horizon, self.norm.gamma)
                index.extend((i, o) for o in range(len(r)))
                returns.append(r)
            normed = [normalize_state(t.states, self.norm) for t in self.trajectories]
            self._cache[key] = (np.array(index, dtype=np.int64),
                                self.norm.normalize_return(np.concatenate(returns)), normed)
        return self._cache[key]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {"meta": self.meta, "norm": self.norm.to_dict()}
        (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        with open(directory / "trajectories.jsonl", "w") as fh:
            for t in self.trajectories:
                rec = {
                    "states": t.states.tolist(),
                    "actions": t.actions.reshape(len(t.actions), -1).tolist(),
                    "rewards": t.rewards.tolist(),
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, directory) -> "OfflineDataset":
        directory = Path(directory)
        if not (directory / "meta.json").exists():
            raise FileNotFoundError(f"missing-dataset: no meta.json in {directory}")
        meta = json.loads((directory / "meta.json").read_text())
        ashape = tuple(meta["meta"]["action_shape"])
        trajs = []
        with open(directory / "trajectories.jsonl") as fh:
            for line in fh:
                rec = json.loads(line)
                actions = np.asarray(rec["actions"], dtype=np.int64).reshape((-1,) + ashape)
                trajs.append(Trajectory(rec["states"], actions, rec["rewards"]))
        return cls(trajs, NormStats.from_dict(meta["norm"]), meta["meta"])


def sample_windows(dataset: OfflineDataset, horizon: int, batch_size: int,
                   rng: np.random.Generator) -> WindowBatch:
    if horizon != dataset.norm.horizon:
        dataset = dataset.with_horizon(horizon, dataset.norm.gamma)
    index, y_all, normed = dataset._windows(horizon)
    pick = rng.integers(0, len(index), size=batch_size)
    src = index[pick]
    x0 = np.stack([normed[i][o:o + horizon] for i, o in src])
    acts = np.stack([dataset.trajectories[i].actions[o:o + horizon - 1] for i, o in src])
    return WindowBatch(x0=x0, y=y_all[pick], actions=acts, source=src)


def behavior_actor(swap_prob: float = 0.2) -> Callable:
    def act(state, sim: Simulator, rng):
        return behavior_policy(sim.config, sim.high_set, swap_prob, rng)
    return act


def collect_dataset(sim_factory: Callable[[int, int], Simulator], policy: Callable, n_episodes: int,
                    episode_len: int, seed: int, horizon: int = 8, gamma: float = 0.99,
                    meta: dict | None = None) -> OfflineDataset:
    """Roll ``policy`` over fresh simulators and record raw trajectories.

    ``sim_factory(episode, seed)`` builds the simulator for one episode and
    ``policy(state, sim, rng)`` returns the RB grid for the next frame.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if episode_len < 2:
        raise ValueError("episode_len must be >= 2")
    trajs = []
    for ep, child in enumerate(np.random.SeedSequence(seed).spawn(n_episodes)):
        sim_seed, policy_seed = (int(x) for x in child.generate_state(2))
        sim = sim_factory(ep, sim_seed)
        rng = np.random.default_rng(policy_seed)
        state = sim.state.copy()
        states, actions, rewards = [state], [], []
        for _ in range(episode_len):
            a = np.asarray(policy(state, sim, rng), dtype=np.int64)
            state, metrics = sim.step_frame(a)
            states.append(state)
            actions.append(a)
            rewards.append(reward(metrics))
        trajs.append(Trajectory(np.array(states), np.array(actions), np.array(rewards)))
    info = dict(meta or {})
    info.update({"seed": seed, "n_episodes": n_episodes, "episode_len": episode_len,
                 "action_shape": list(trajs[0].actions.shape[1:])})
    return OfflineDataset(trajs, compute_norm_stats(trajs, horizon, gamma), info)


def paper_ratios(n_nodes: int) -> list[int]:
    """High-speed node counts matching 4:12, 6:10 and 8:8 at 16 nodes, rescaled."""
    return sorted({max(1, round(n_nodes * f)) for f in (0.25, 0.375, 0.5)})


def random_context_factory(config, ratios=None, switch_frame: int | None = 150,
                           switch_prob: float = 0.5, **scenario_kwargs) -> Callable:
    """Simulator factory drawing a fresh traffic context per episode.

    Each episode picks a high-speed node count from ``ratios`` and a random set
    of that size; with probability ``switch_prob`` the set is redrawn at
    ``switch_frame`` to give a dynamic-service episode.
    """
    from .netsim import ScenarioSpec

    ratios = list(ratios or paper_ratios(config.n_nodes))

    def factory(episode: int, seed: int) -> Simulator:
        rng = np.random.default_rng([seed, 1])
        def draw():
            k = ratios[rng.integers(len(ratios))]
            return frozenset(rng.choice(config.n_nodes, size=k, replace=False).tolist())
        schedule = [(0, draw())]
        if switch_frame is not None and rng.random() < switch_prob:
            schedule.append((switch_frame, draw()))
        return Simulator(config, ScenarioSpec(ratio_schedule=schedule, **scenario_kwargs), seed)

    return factory
