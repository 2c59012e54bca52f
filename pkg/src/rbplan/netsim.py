"""Frame-stepped MF-TDMA cluster simulator.

One call to :meth:`Simulator.step_frame` plays out a whole frame of ``M`` slots
on ``L`` channels under a resource-block grid chosen by the agent.  Traffic and
interference come from two independent random streams, so two policies run
under the same seed see exactly the same packet arrivals and jamming pattern.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

FEATURES_PER_NODE = 4  # gen, sen, T, Tmax


class InvalidConfigError(ValueError):
    pass


class ActionError(ValueError):
    pass


@dataclass
class SimConfig:
    n_nodes: int = 8
    n_slots: int = 6
    n_channels: int = 2
    rb_capacity: int = 1
    queue_capacity: int = 50
    packet_size: int = 1000
    rate_high: float = 2.0
    rate_low: float = 0.5
    loss_age_penalty: float = 5.0

    @classmethod
    def paper_scale(cls) -> "SimConfig":
        return cls(n_nodes=16, n_slots=10, n_channels=4, rate_high=3.0, rate_low=1.0)

    @property
    def n_rbs(self) -> int:
        return self.n_slots * self.n_channels

    @property
    def state_dim(self) -> int:
        return FEATURES_PER_NODE * self.n_nodes

    def validate(self) -> None:
        problems = []
        if self.n_nodes < 2:
            problems.append(f"n_nodes must be >= 2, got {self.n_nodes}")
        for name in ("n_slots", "n_channels", "rb_capacity", "queue_capacity", "packet_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("rate_high", "rate_low", "loss_age_penalty"):
            if not getattr(self, name) >= 0:
                problems.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if problems:
            raise InvalidConfigError("; ".join(problems))

    def rates(self, high_set: Iterable[int]) -> np.ndarray:
        high = set(high_set)
        return np.array(
            [self.rate_high if i in high else self.rate_low for i in range(self.n_nodes)],
            dtype=np.float64,
        )


@dataclass
class ScenarioSpec:
    """Traffic mix over time plus the jamming pattern.

    ``ratio_schedule`` is a list of ``(start_frame, high_speed_nodes)``; the
    entry with the largest start frame not after the current frame is active.
    """

    ratio_schedule: list = field(default_factory=lambda: [(0, frozenset({0, 1}))])
    interference_channels: frozenset = frozenset()
    interference_duty: float = 0.0
    destination_rule: str = "uniform"

    def __post_init__(self):
        self.ratio_schedule = [(int(f), frozenset(int(i) for i in s)) for f, s in self.ratio_schedule]
        self.interference_channels = frozenset(int(c) for c in self.interference_channels)

    @classmethod
    def static(cls, n_high: int, **kwargs) -> "ScenarioSpec":
        """High-speed nodes are the first ``n_high`` indices for the whole run."""
        return cls(ratio_schedule=[(0, frozenset(range(n_high)))], **kwargs)

    def validate(self, config: SimConfig) -> None:
        problems = []
        if not self.ratio_schedule:
            problems.append("ratio_schedule is empty")
        else:
            starts = [f for f, _ in self.ratio_schedule]
            if starts[0] != 0:
                problems.append("ratio_schedule must start at frame 0")
            if any(b <= a for a, b in zip(starts, starts[1:])):
                problems.append("ratio_schedule frames must be strictly increasing")
            for _, high in self.ratio_schedule:
                if any(i < 0 or i >= config.n_nodes for i in high):
                    problems.append(f"high-speed set {sorted(high)} has out-of-range nodes")
        if not 0.0 <= self.interference_duty <= 1.0:
            problems.append(f"interference_duty must be in [0, 1], got {self.interference_duty}")
        if any(c < 0 or c >= config.n_channels for c in self.interference_channels):
            problems.append(f"interference_channels {sorted(self.interference_channels)} out of range")
        if self.destination_rule != "uniform":
            problems.append(f"unknown destination_rule {self.destination_rule!r}")
        if problems:
            raise InvalidConfigError("; ".join(problems))

    def high_set_at(self, frame: int) -> frozenset:
        active = self.ratio_schedule[0][1]
        for start, high in self.ratio_schedule:
            if start <= frame:
                active = high
            else:
                break
        return active


class Packet:
    __slots__ = ("id", "source", "destination", "created_slot", "size")

    def __init__(self, id, source, destination, created_slot, size):
        self.id = id
        self.source = source
        self.destination = destination
        self.created_slot = created_slot
        self.size = size

    def __repr__(self):
        return (f"Packet(id={self.id}, source={self.source}, destination={self.destination}, "
                f"created_slot={self.created_slot})")


@dataclass
class FrameMetrics:
    delay: np.ndarray  # per receiving node, frames
    throughput: np.ndarray  # per receiving node, packets this frame
    loss_rate: float
    generated: int
    delivered: int
    dropped: int
    queued: int
    generated_total: int
    delivered_total: int
    dropped_total: int

    @property
    def mean_delay(self) -> float:
        """Average delay per delivered packet this frame (0 when nothing arrived)."""
        return float(self.delay.sum() / self.delivered) if self.delivered else 0.0


def reward(metrics: FrameMetrics) -> float:
    return -float(np.sum(metrics.delay))


def reward_weighted(metrics: FrameMetrics, lam: float, eta: float) -> float:
    """QoS-weighted variant: sum_i(lam * u_i - d_i) - eta * loss_rate."""
    if lam < 0 or eta < 0:
        raise ValueError("lam and eta must be non-negative")
    return float(np.sum(lam * metrics.throughput - metrics.delay) - eta * metrics.loss_rate)


def check_grid(action, config: SimConfig) -> np.ndarray:
    grid = np.asarray(action)
    if grid.shape != (config.n_channels, config.n_slots):
        raise ActionError(f"shape-mismatch: expected {(config.n_channels, config.n_slots)}, got {grid.shape}")
    if not np.issubdtype(grid.dtype, np.integer):
        if not np.all(np.equal(np.mod(grid, 1), 0)):
            raise ActionError("node indices must be integers")
        grid = grid.astype(np.int64)
    if grid.size and (grid.min() < 0 or grid.max() >= config.n_nodes):
        raise ActionError(f"node-index-out-of-range: entries must lie in [0, {config.n_nodes - 1}]")
    return grid.astype(np.int64, copy=False)


class Simulator:
    def __init__(self, config: SimConfig, scenario: ScenarioSpec, seed: int,
                 record_events: bool = False):
        config.validate()
        scenario.validate(config)
        self.config = config
        self.scenario = scenario
        self.seed = int(seed)
        traffic_seq, jam_seq = np.random.SeedSequence(self.seed).spawn(2)
        self._traffic_rng = np.random.default_rng(traffic_seq)
        self._jam_rng = np.random.default_rng(jam_seq)
        self.frame = 0
        self.queues = [deque() for _ in range(config.n_nodes)]
        self._next_id = 0
        self.generated_total = 0
        self.delivered_total = 0
        self.dropped_total = 0
        self.events = [] if record_events else None
        self.state = np.zeros(config.state_dim, dtype=np.float64)

    @property
    def high_set(self) -> frozenset:
        return self.scenario.high_set_at(self.frame)

    @property
    def queue_lengths(self) -> np.ndarray:
        return np.array([len(q) for q in self.queues], dtype=np.int64)

    def push_packet(self, source: int, destination: int, created_slot: int) -> Packet:
        """Place a packet directly into a node's queue (used to stage test scenarios)."""
        if source == destination:
            raise ValueError("source and destination must differ")
        if created_slot < 0:
            raise ValueError("created_slot must be >= 0")
        pkt = Packet(self._next_id, source, destination, created_slot, self.config.packet_size)
        self._next_id += 1
        self.queues[source].append(pkt)
        self.generated_total += 1
        return pkt

    def _log(self, slot, channel, node, event, packet_id):
        if self.events is not None:
            self.events.append((self.frame, slot, channel, node, event, packet_id))

    def _draw_arrivals(self):
        cfg = self.config
        rng = self._traffic_rng
        rates = cfg.rates(self.high_set)
        counts = rng.poisson(rates)
        total = int(counts.sum())
        slots = rng.integers(0, cfg.n_slots, size=total)
        offsets = rng.integers(1, cfg.n_nodes, size=total)
        by_slot = [[] for _ in range(cfg.n_slots)]
        pos = 0
        for node in range(cfg.n_nodes):
            c = int(counts[node])
            for s, off in sorted(zip(slots[pos:pos + c].tolist(), offsets[pos:pos + c].tolist())):
                by_slot[s].append((node, (node + off) % cfg.n_nodes))
            pos += c
        return by_slot

    def step_frame(self, action):
        cfg = self.config
        grid = check_grid(action, cfg)
        arrivals = self._draw_arrivals()
        jammed = np.zeros((cfg.n_channels, cfg.n_slots), dtype=bool)
        if self.scenario.interference_duty > 0 and self.scenario.interference_channels:
            chans = sorted(self.scenario.interference_channels)
            draws = self._jam_rng.random((len(chans), cfg.n_slots))
            jammed[chans] = draws < self.scenario.interference_duty

        n = cfg.n_nodes
        gen = np.zeros(n, dtype=np.int64)
        sen = np.zeros(n, dtype=np.int64)
        qmax = self.queue_lengths
        delay = np.zeros(n, dtype=np.float64)
        throughput = np.zeros(n, dtype=np.float64)
        delivered = dropped = 0
        base = self.frame * cfg.n_slots

        for m in range(cfg.n_slots):
            now = base + m
            for src, dst in arrivals[m]:
                gen[src] += 1
                self.generated_total += 1
                pid = self._next_id
                self._next_id += 1
                q = self.queues[src]
                if len(q) >= cfg.queue_capacity:
                    dropped += 1
                    delay[dst] += cfg.loss_age_penalty
                    self._log(m, -1, src, "drop", pid)
                    continue
                q.append(Packet(pid, src, dst, now, cfg.packet_size))
                self._log(m, -1, src, "arrive", pid)
                if len(q) > qmax[src]:
                    qmax[src] = len(q)
            for ch in range(cfg.n_channels):
                node = int(grid[ch, m])
                q = self.queues[node]
                burst = [q.popleft() for _ in range(min(cfg.rb_capacity, len(q)))]
                if not burst:
                    continue
                if jammed[ch, m]:
                    for pkt in burst:
                        q.append(pkt)
                        self._log(m, ch, node, "fail", pkt.id)
                    continue
                for pkt in burst:
                    d = (now - pkt.created_slot) / cfg.n_slots
                    delay[pkt.destination] += d
                    throughput[pkt.destination] += 1
                    sen[node] += 1
                    delivered += 1
                    self._log(m, ch, node, "deliver", pkt.id)

        self.delivered_total += delivered
        self.dropped_total += dropped
        qlen = self.queue_lengths
        traffic = delivered + dropped
        metrics = FrameMetrics(
            delay=delay,
            throughput=throughput,
            loss_rate=dropped / traffic if traffic else 0.0,
            generated=int(gen.sum()),
            delivered=delivered,
            dropped=dropped,
            queued=int(qlen.sum()),
            generated_total=self.generated_total,
            delivered_total=self.delivered_total,
            dropped_total=self.dropped_total,
        )
        state = np.stack([gen, sen, qlen, np.maximum(qmax, qlen)], axis=1).reshape(-1)
        self.state = state.astype(np.float64)
        self.frame += 1
        return self.state.copy(), metrics

    def dump_events(self, path) -> None:
        """Write the event log as JSON lines: frame, slot, channel, node, event, packet_id."""
        if self.events is None:
            raise RuntimeError("simulator was created without record_events=True")
        keys = ("frame", "slot", "channel", "node", "event", "packet_id")
        with open(path, "w") as fh:
            for rec in self.events:
                fh.write(json.dumps(dict(zip(keys, rec))) + "\n")


def new_simulator(config: SimConfig, scenario: ScenarioSpec, seed: int, **kwargs) -> Simulator:
    return Simulator(config, scenario, seed, **kwargs)


def reward_from_events(events: Sequence[tuple], config: SimConfig, frame: int | None = None) -> float:
    """Recompute the delay reward from an event log, independent of FrameMetrics."""
    created = {}
    total = 0.0
    for fr, slot, _ch, _node, event, pid in events:
        g = fr * config.n_slots + slot
        if event == "arrive":
            created[pid] = g
        elif frame is not None and fr != frame:
            continue
        elif event == "deliver":
            total += (g - created[pid]) / config.n_slots
        elif event == "drop":
            total += config.loss_age_penalty
    return -total


# --- fixed policies -------------------------------------------------------

def proportional_counts(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` units; ties go to lower indices."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() <= 0:
        weights = np.ones_like(weights)
    quota = weights * total / weights.sum()
    counts = np.floor(quota + 1e-12).astype(np.int64)
    remainder = quota - counts
    left = total - int(counts.sum())
    order = sorted(range(len(weights)), key=lambda i: (-round(remainder[i], 12), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def place_round_robin(counts: np.ndarray, n_channels: int, n_slots: int) -> np.ndarray:
    """Fill cells row-major (channel, slot), cycling over nodes with quota left."""
    left = np.array(counts, dtype=np.int64)
    cells = []
    while left.sum() > 0:
        for node in range(len(left)):
            if left[node] > 0:
                cells.append(node)
                left[node] -= 1
    return np.array(cells, dtype=np.int64).reshape(n_channels, n_slots)


def oracle_policy(config: SimConfig, high_set) -> np.ndarray:
    counts = proportional_counts(config.rates(high_set), config.n_rbs)
    return place_round_robin(counts, config.n_channels, config.n_slots)


def uniform_policy(config: SimConfig) -> np.ndarray:
    return oracle_policy(config, high_set=())


def random_policy(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, config.n_nodes, size=(config.n_channels, config.n_slots))


def behavior_policy(config: SimConfig, high_set, swap_prob: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= swap_prob <= 1.0:
        raise ValueError(f"swap_prob must be in [0, 1], got {swap_prob}")
    grid = oracle_policy(config, high_set)
    shape = grid.shape
    swap = rng.random(shape) < swap_prob
    replacement = rng.integers(0, config.n_nodes, size=shape)
    return np.where(swap, replacement, grid)


# --- config files ---------------------------------------------------------

def _scenario_from_flat(raw: dict, config: SimConfig) -> ScenarioSpec:
    kwargs = {}
    if "ratio_schedule" in raw:
        kwargs["ratio_schedule"] = [(int(f), frozenset(h)) for f, h in raw["ratio_schedule"]]
    elif "n_high" in raw:
        kwargs["ratio_schedule"] = [(0, frozenset(range(int(raw["n_high"]))))]
    if "interference_channels" in raw:
        kwargs["interference_channels"] = frozenset(raw["interference_channels"])
    if "interference_duty" in raw:
        kwargs["interference_duty"] = float(raw["interference_duty"])
    if "destination_rule" in raw:
        kwargs["destination_rule"] = raw["destination_rule"]
    scenario = ScenarioSpec(**kwargs)
    scenario.validate(config)
    return scenario


def load_sim_config(path) -> tuple[SimConfig, ScenarioSpec, dict]:
    """Read a flat ``key: value`` file holding SimConfig and ScenarioSpec fields.

    Unknown keys are returned untouched so callers can layer their own options
    (seeds, episode counts) on the same file.
    """
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise InvalidConfigError(f"{path}: expected a flat mapping of keys")
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> tuple[SimConfig, ScenarioSpec, dict]:
    sim_keys = set(SimConfig.__dataclass_fields__)
    scen_keys = {"ratio_schedule", "n_high", "interference_channels", "interference_duty", "destination_rule"}
    try:
        config = SimConfig(**{k: v for k, v in raw.items() if k in sim_keys})
    except TypeError as exc:
        raise InvalidConfigError(str(exc)) from exc
    config.validate()
    scenario = _scenario_from_flat({k: v for k, v in raw.items() if k in scen_keys}, config)
    rest = {k: v for k, v in raw.items() if k not in sim_keys | scen_keys}
    return config, scenario, rest


def scenario_to_dict(scenario: ScenarioSpec) -> dict:
    return {
        "ratio_schedule": [[f, sorted(h)] for f, h in scenario.ratio_schedule],
        "interference_channels": sorted(scenario.interference_channels),
        "interference_duty": scenario.interference_duty,
        "destination_rule": scenario.destination_rule,
    }


def config_to_dict(config: SimConfig) -> dict:
    return asdict(config)
