"""
Congestion-control MDP on top of the simulator: observations, actions, rewards and
epsilon-greedy experience collection from an expert policy.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

import netsim
from config import (
    ACTION_HIGH,
    ACTION_LOW,
    COLLECTION_CAPACITY_MBPS,
    COLLECTION_DURATION_S,
    DEFAULT_ACCESS_PROPAGATION_S,
    DEFAULT_ACK_PACKET_SIZE,
    DEFAULT_BOTTLENECK_PROPAGATION_S,
    DEFAULT_DATA_PACKET_SIZE,
    DEFAULT_EPSILON,
    DEFAULT_LOSS_TIMEOUT_FACTOR,
    DEFAULT_QUEUE_CAPACITY,
    DEFAULT_WINDOW_S,
    INTERSEND_MAX_S,
    REWARD_LOSS_HIGH,
    REWARD_RTT_MULTIPLIER,
    UNIT_SCALE,
    SymccError,
    require,
)
from policies import PolicyError
from utils import convert_df_to_csv

logger = logging.getLogger(__name__)

DATASET_COLUMNS = ["x1", "x2", "x3", "x4", "action"]
HOLD_TOLERANCE = 0.02


class ExpertUnavailable(SymccError):
    """The expert policy handle failed while labelling experiences."""


@dataclass(frozen=True)
class Observation:
    """x1 intersend (s), x2 window-average RTT (s), x3 RTT ratio, x4 loss ratio."""

    x1: float
    x2: float
    x3: float
    x4: float

    def __post_init__(self):
        values = (self.x1, self.x2, self.x3, self.x4)
        if any(math.isnan(v) for v in values):
            raise ValueError(f"observation contains NaN: {values}")
        if self.x1 <= 0:
            raise ValueError(f"intersend time must be positive, got {self.x1}")
        if self.x3 < 1.0:
            raise ValueError(f"RTT ratio below 1: {self.x3}")
        if not 0.0 <= self.x4 <= 1.0:
            raise ValueError(f"loss ratio outside [0, 1]: {self.x4}")

    def as_array(self, units="s"):
        scale = UNIT_SCALE[units]
        return np.array([self.x1 * scale, self.x2 * scale, self.x3, self.x4], dtype=np.float64)


def check_action(a):
    """Validate an ActionValue: a dimensionless multiplier in [0.8, 1.5]."""
    if not ACTION_LOW <= a <= ACTION_HIGH:
        raise ValueError(f"action {a} outside [{ACTION_LOW}, {ACTION_HIGH}]")
    return float(a)


@dataclass(frozen=True)
class RewardSpec:
    """Normalisation bounds (lo, hi): acks per window, RTT in seconds, losses per window."""

    ack_bounds: tuple
    rtt_bounds: tuple
    loss_bounds: tuple

    def __post_init__(self):
        for name in ("ack_bounds", "rtt_bounds", "loss_bounds"):
            lo, hi = getattr(self, name)
            require(hi > lo, name, f"hi ({hi}) must exceed lo ({lo})")

    def as_dict(self):
        return {
            "ack_bounds": list(self.ack_bounds),
            "rtt_bounds": list(self.rtt_bounds),
            "loss_bounds": list(self.loss_bounds),
            "eta": "clip((v - lo) / (hi - lo), 0, 1)",
        }


def default_reward_spec(topology, window=DEFAULT_WINDOW_S):
    c = netsim.analytic_min_rtt(topology)
    return RewardSpec(
        ack_bounds=(0.0, window / topology.bottleneck_serialization),
        rtt_bounds=(c, REWARD_RTT_MULTIPLIER * c),
        loss_bounds=(0.0, REWARD_LOSS_HIGH),
    )


def eta(value, bounds):
    lo, hi = bounds
    return min(1.0, max(0.0, (value - lo) / (hi - lo)))


def reward(acks, avg_rtt, losses, spec):
    """η(acks, A) − η(rtt, R) − η(losses, L); always within [−2, 1]."""
    return eta(acks, spec.ack_bounds) - eta(avg_rtt, spec.rtt_bounds) - eta(losses, spec.loss_bounds)


def build_observation(stats, previous_rtt=None, fallback_min_rtt=None):
    """
    Turn one window's measurements into an Observation.

    Windows without RTT samples carry the previous average forward; before the
    first sample the flow falls back to `fallback_min_rtt`.
    """
    min_rtt = stats.min_rtt if math.isfinite(stats.min_rtt) else fallback_min_rtt
    if min_rtt is None or min_rtt <= 0:
        raise ValueError("no positive minimum RTT available")
    if stats.rtt_samples:
        x2 = stats.rtt_sum / stats.rtt_samples
    elif previous_rtt is not None:
        x2 = previous_rtt
    else:
        x2 = min_rtt
    x2 = max(x2, min_rtt)
    x3 = max(1.0, x2 / min_rtt)
    x4 = min(1.0, stats.losses / max(1, stats.sent))
    return Observation(stats.intersend, x2, x3, x4)


def apply_action(x1, a, x1_min=0.0, x1_max=INTERSEND_MAX_S):
    """x1 ← x1 / a, clamped to [x1_min, x1_max]; a > 1 raises the sending rate."""
    if x1 <= 0:
        raise ValueError(f"intersend time must be positive, got {x1}")
    return min(x1_max, max(x1_min, x1 / a))


class FlowAgent:
    """Per-flow MDP glue between a sender and its policy."""

    def __init__(self, policy, topology, reward_spec):
        self.policy = policy
        self.reward_spec = reward_spec
        self.x1_min = topology.access_serialization
        self.fallback_min_rtt = netsim.analytic_min_rtt(topology)
        self.previous_rtt = None

    def on_window(self, stats):
        obs = build_observation(stats, self.previous_rtt, self.fallback_min_rtt)
        self.previous_rtt = obs.x2
        action = check_action(self.policy.act(obs))
        r = reward(stats.acks, obs.x2, stats.losses, self.reward_spec)
        x1 = apply_action(obs.x1, action, self.x1_min)
        return netsim.WindowDecision(obs, action, r, x1)


@dataclass(frozen=True)
class Scenario:
    """Scenario config section: topology and run fields in human units."""

    bottleneck_capacity_mbps: float = COLLECTION_CAPACITY_MBPS
    pair_count: int = 1
    access_capacity_gbps: float = 20.0
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    data_packet_size: float = DEFAULT_DATA_PACKET_SIZE
    ack_packet_size: float = DEFAULT_ACK_PACKET_SIZE
    access_propagation_s: float = DEFAULT_ACCESS_PROPAGATION_S
    bottleneck_propagation_s: float = DEFAULT_BOTTLENECK_PROPAGATION_S
    duration_s: float = COLLECTION_DURATION_S
    window_s: float = DEFAULT_WINDOW_S
    initial_intersend_s: float | None = None
    start_jitter: bool = True
    loss_timeout_factor: float = DEFAULT_LOSS_TIMEOUT_FACTOR

    def __post_init__(self):
        require(self.bottleneck_capacity_mbps > 0, "bottleneck_capacity_mbps", "must be > 0")
        require(self.access_capacity_gbps > 0, "access_capacity_gbps", "must be > 0")
        require(self.pair_count >= 1, "pair_count", "must be >= 1")
        require(self.queue_capacity >= 1, "queue_capacity", "must be >= 1")
        require(self.duration_s > 0, "duration_s", "must be > 0")
        require(self.window_s > 0, "window_s", "must be > 0")
        require(self.window_s <= self.duration_s, "window_s", "must not exceed duration_s")
        require(self.initial_intersend_s is None or self.initial_intersend_s > 0,
                "initial_intersend_s", "must be > 0")
        require(self.loss_timeout_factor > 0, "loss_timeout_factor", "must be > 0")

    def topology(self):
        return netsim.Topology(
            bottleneck_capacity=self.bottleneck_capacity_mbps * 1e6,
            pair_count=self.pair_count,
            access_capacity=self.access_capacity_gbps * 1e9,
            queue_capacity=self.queue_capacity,
            data_packet_size=self.data_packet_size,
            ack_packet_size=self.ack_packet_size,
            access_propagation=self.access_propagation_s,
            bottleneck_propagation=self.bottleneck_propagation_s,
        )

    def sim_options(self):
        return {
            "initial_intersend": self.initial_intersend_s,
            "start_jitter": self.start_jitter,
            "loss_timeout_factor": self.loss_timeout_factor,
        }

    def describe(self):
        return f"C={self.bottleneck_capacity_mbps:g}Mbps p={self.pair_count} T={self.duration_s:g}s"

    def with_overrides(self, **changes):
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def simulate(scenario, policy, seed=0):
    """Run one scenario with `policy` on every flow."""
    return netsim.run(
        scenario.topology(), policy, scenario.duration_s, scenario.window_s, seed,
        **scenario.sim_options(),
    )


@dataclass(frozen=True)
class CollectionConfig:
    """
    Collection config section. `pair_counts` collects every listed pair count once;
    `pair_choices` and `capacity_range_mbps` draw `episodes` random scenarios instead.
    With neither, the scenario is used as given.
    """

    epsilon: float = DEFAULT_EPSILON
    expert: str = "scripted-expert"
    pair_counts: tuple[int, ...] = ()
    pair_choices: tuple[int, ...] = ()
    capacity_range_mbps: tuple[float, ...] = ()
    episodes: int = 1

    def __post_init__(self):
        require(0.0 <= self.epsilon <= 1.0, "epsilon", "must be within [0, 1]")
        require(self.episodes >= 1, "episodes", "must be >= 1")
        require(all(p >= 1 for p in self.pair_counts), "pair_counts", "pair counts must be >= 1")
        require(all(p >= 1 for p in self.pair_choices), "pair_choices", "pair counts must be >= 1")
        require(len(self.capacity_range_mbps) in (0, 2), "capacity_range_mbps", "expected [lo, hi]")
        if self.capacity_range_mbps:
            lo, hi = self.capacity_range_mbps
            require(0 < lo <= hi, "capacity_range_mbps", "need 0 < lo <= hi")

    @property
    def randomized(self):
        return bool(self.pair_choices or self.capacity_range_mbps)

    def scenarios(self, base, seed=0):
        if self.pair_counts:
            return [replace(base, pair_count=p) for p in self.pair_counts]
        if self.randomized:
            return sample_scenarios(base, self, seed)
        return [base] * self.episodes


class EpsilonGreedy:
    """
    Executes a uniform random action with probability ε, the expert's otherwise.
    Every visited state is stored with the expert's proposed action as its label.
    """

    def __init__(self, expert, epsilon, rng):
        self.expert = expert
        self.epsilon = epsilon
        self.rng = rng
        self.rows = []
        self.executed = []

    def act(self, obs):
        try:
            label = check_action(self.expert.act(obs))
        except (PolicyError, ValueError) as e:
            raise ExpertUnavailable(f"expert failed on {obs}: {e}") from e
        explore = self.rng.random() < self.epsilon
        action = float(self.rng.uniform(ACTION_LOW, ACTION_HIGH)) if explore else label
        self.rows.append((obs.x1, obs.x2, obs.x3, obs.x4, label))
        self.executed.append(action)
        return action


class ExperienceDataset:
    """State-action rows (seconds for x1/x2) with provenance."""

    def __init__(self, rows, provenance=None):
        frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=DATASET_COLUMNS)
        self.rows = frame[DATASET_COLUMNS].astype(np.float64).reset_index(drop=True)
        self.provenance = dict(provenance or {})

    def __len__(self):
        return len(self.rows)

    def validate(self):
        r = self.rows
        bad = (
            (r.x1 <= 0) | (r.x3 < 1.0) | (r.x4 < 0) | (r.x4 > 1)
            | (r.action < ACTION_LOW) | (r.action > ACTION_HIGH) | r.isna().any(axis=1)
        )
        if bad.any():
            raise ValueError(f"{int(bad.sum())} dataset rows violate observation/action bounds")
        return self

    def matrix(self, units="s"):
        """(n, 4) observation matrix with x1, x2 converted to `units`."""
        m = self.rows[["x1", "x2", "x3", "x4"]].to_numpy(dtype=np.float64, copy=True)
        m[:, :2] *= UNIT_SCALE[units]
        return m

    @property
    def actions(self):
        return self.rows["action"].to_numpy(dtype=np.float64)

    def behaviour_classes(self):
        """Label counts: decrease (a<1), stabilise (|a−1|≤tol), increase (a>1)."""
        a = self.actions
        hold = np.abs(a - 1.0) <= HOLD_TOLERANCE
        return {
            "decrease": int(np.sum((a < 1.0) & ~hold)),
            "stabilize": int(np.sum(hold)),
            "increase": int(np.sum((a > 1.0) & ~hold)),
        }

    def split(self, fraction, seed=0):
        """Random (first, second) partition with `fraction` of rows in the first."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        cut = int(round(fraction * len(self)))
        first = self.rows.iloc[np.sort(order[:cut])]
        second = self.rows.iloc[np.sort(order[cut:])]
        return (ExperienceDataset(first, {**self.provenance, "split": "first"}),
                ExperienceDataset(second, {**self.provenance, "split": "second"}))

    @classmethod
    def merge(cls, *datasets):
        """Sequential union; row count is the sum of the parts."""
        frame = pd.concat([d.rows for d in datasets], ignore_index=True)
        return cls(frame, {"union_of": [d.provenance for d in datasets]})

    def sidecar(self):
        return {**self.provenance, "rows": len(self), "classes": self.behaviour_classes(),
                "columns": DATASET_COLUMNS, "time_units": "s"}

    def save(self, csv_path):
        csv_path = Path(csv_path)
        csv_path.write_bytes(convert_df_to_csv(self.rows))
        csv_path.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True))
        return csv_path

    @classmethod
    def load(cls, csv_path):
        csv_path = Path(csv_path)
        frame = pd.read_csv(csv_path)
        missing = [c for c in DATASET_COLUMNS if c not in frame.columns]
        if missing:
            raise ValueError(f"{csv_path}: missing columns {missing}")
        sidecar = csv_path.with_suffix(".json")
        provenance = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        for key in ("rows", "classes", "columns", "time_units"):
            provenance.pop(key, None)
        return cls(frame, provenance).validate()


def collect(expert, scenario, epsilon=DEFAULT_EPSILON, seed=0):
    """Run `scenario` under ε-greedy exploration around `expert`; returns labelled rows."""
    require(0.0 <= epsilon <= 1.0, "epsilon", "must be within [0, 1]")
    streams = np.random.SeedSequence(seed).spawn(scenario.pair_count)
    explorers = [EpsilonGreedy(expert, epsilon, np.random.default_rng(s)) for s in streams]
    trace = simulate(scenario, explorers, seed)
    rows = [row for explorer in explorers for row in explorer.rows]
    provenance = {
        "scenario": asdict(scenario),
        "seed": seed,
        "epsilon": epsilon,
        "expert": getattr(expert, "name", type(expert).__name__),
        "rows_per_flow": [len(e.rows) for e in explorers],
        "reward_spec": trace.metadata["reward_spec"],
    }
    logger.info("collected %d rows from %s (ε=%.2f, seed=%d)", len(rows), scenario.describe(), epsilon, seed)
    return ExperienceDataset(rows, provenance).validate()


def sample_scenarios(base, config, seed):
    """Domain randomisation: C log-uniform over the range, p uniform over the choices."""
    rng = np.random.default_rng(seed)
    scenarios = []
    for _ in range(config.episodes):
        changes = {}
        if config.capacity_range_mbps:
            lo, hi = config.capacity_range_mbps
            changes["bottleneck_capacity_mbps"] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        if config.pair_choices:
            changes["pair_count"] = int(rng.choice(config.pair_choices))
        scenarios.append(replace(base, **changes))
    return scenarios


def _collect_job(job):
    expert = job[0]
    try:
        return collect(*job)
    finally:
        expert.close()


def collect_many(expert, scenarios, epsilon=DEFAULT_EPSILON, seed=0, jobs=1):
    """Collect each scenario with its own derived seed and merge the results in order."""
    seeds = np.random.SeedSequence(seed).generate_state(len(scenarios))
    work = [(expert, s, epsilon, int(k)) for s, k in zip(scenarios, seeds)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_collect_job, work))
    else:
        parts = [collect(*job) for job in work]
    return parts[0] if len(parts) == 1 else ExperienceDataset.merge(*parts)
