"""
Phase experiment matrices and performance metrics: link utilization, packet delay,
packet losses and Jain fairness, with a min-max normalised aggregate per grid cell.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from cc_env import Scenario, simulate
from config import (
    PHASE_CAPACITIES_MBPS,
    PHASE_ONE_DURATION_S,
    PHASE_ONE_PAIRS,
    PHASE_TWO_DURATION_S,
    PHASE_TWO_PAIRS,
    UTILIZATION_SLACK,
    WARMUP_FRACTION,
    SymccError,
    progress_enabled,
    require,
)
from utils import convert_df_to_csv, convert_df_to_excel, convert_df_to_pdf, write_json

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["utilization", "mean_rtt_s", "loss_count", "jain"]
ROW_COLUMNS = [
    "scenario_id", "capacity_mbps", "pair_count", "repetition", "seed", "duration_s",
    "utilization", "mean_rtt_s", "loss_count", "drops", "jain", "min_action", "max_action",
]
AGGREGATION_NOTE = (
    "per metric m over all rows: (m - min) / (max - min), 0 when max == min; "
    "then mean and std of the normalised values per (capacity_mbps, pair_count)"
)
PHASES = ("one", "two", "custom")


class AllZero(SymccError):
    """Every flow had zero throughput; the fairness index is undefined."""


def jain_index(throughputs):
    """(Σx)² / (n·Σx²) over per-flow throughputs; within [1/n, 1]."""
    x = np.asarray(throughputs, dtype=np.float64)
    if x.size == 0:
        raise ValueError("need at least one flow")
    if (x < 0).any() or not np.isfinite(x).all():
        raise ValueError("throughputs must be finite and non-negative")
    total = x.sum()
    if total == 0:
        raise AllZero("all flows have zero throughput")
    return float(min(1.0, total * total / (x.size * np.sum(x * x))))


@dataclass(frozen=True)
class PhaseSpec:
    """One experiment matrix: every (capacity, pair count, repetition) runs once."""

    name: str
    duration_s: float
    capacities_mbps: tuple
    pair_counts: tuple
    repetitions: int = 1
    seed: int = 0
    warmup_fraction: float = WARMUP_FRACTION
    base: Scenario = Scenario()

    def __post_init__(self):
        require(self.duration_s > 0, "duration_s", "must be > 0")
        require(len(self.capacities_mbps) > 0, "capacities_mbps", "grid must not be empty")
        require(len(self.pair_counts) > 0, "pair_counts", "grid must not be empty")
        require(self.repetitions >= 1, "repetitions", "must be >= 1")
        require(0.0 <= self.warmup_fraction < 1.0, "warmup_fraction", "must be within [0, 1)")
        require(len(set(self.seeds)) == len(self.seeds), "seed", "repetition seeds must be distinct")

    @classmethod
    def phase_one(cls, **overrides):
        return cls("one", PHASE_ONE_DURATION_S, PHASE_CAPACITIES_MBPS, PHASE_ONE_PAIRS, **overrides)

    @classmethod
    def phase_two(cls, **overrides):
        return cls("two", PHASE_TWO_DURATION_S, PHASE_CAPACITIES_MBPS, PHASE_TWO_PAIRS, **overrides)

    @property
    def seeds(self):
        return tuple(self.seed + r for r in range(self.repetitions))

    def scenarios(self):
        """(scenario id, capacity, pairs, repetition, seed, Scenario) in sorted order."""
        for capacity in sorted(self.capacities_mbps):
            for pairs in sorted(self.pair_counts):
                for repetition, seed in enumerate(self.seeds):
                    scenario = replace(self.base, bottleneck_capacity_mbps=float(capacity),
                                       pair_count=int(pairs), duration_s=self.duration_s)
                    yield scenario_id(capacity, pairs, repetition), capacity, pairs, repetition, seed, scenario

    def __len__(self):
        return len(self.capacities_mbps) * len(self.pair_counts) * self.repetitions


def scenario_id(capacity, pairs, repetition):
    return f"C{capacity:06.0f}-p{pairs:03d}-r{repetition:02d}"


@dataclass(frozen=True)
class EvaluationConfig:
    """Evaluation config section; empty grids fall back to the phase defaults."""

    phase: str = "one"
    policy: str = "sp1"
    capacities_mbps: tuple[float, ...] = ()
    pair_counts: tuple[int, ...] = ()
    duration_s: float | None = None
    repetitions: int = 1
    warmup_fraction: float = WARMUP_FRACTION
    jobs: int = 1

    def __post_init__(self):
        require(self.phase in PHASES, "phase", f"expected one of {', '.join(PHASES)}")
        require(self.jobs >= 1, "jobs", "must be >= 1")
        require(self.phase != "custom" or (self.capacities_mbps and self.pair_counts and self.duration_s),
                "phase", "custom phase needs capacities_mbps, pair_counts and duration_s")

    def phase_spec(self, base, seed):
        if self.phase == "two":
            spec = PhaseSpec.phase_two(base=base, seed=seed)
        else:
            spec = PhaseSpec.phase_one(base=base, seed=seed)
        changes = {"repetitions": self.repetitions, "warmup_fraction": self.warmup_fraction}
        if self.phase == "custom":
            changes["name"] = "custom"
        if self.capacities_mbps:
            changes["capacities_mbps"] = self.capacities_mbps
        if self.pair_counts:
            changes["pair_counts"] = self.pair_counts
        if self.duration_s:
            changes["duration_s"] = self.duration_s
        return replace(spec, **changes)


def compute_metrics(trace, warmup_fraction=WARMUP_FRACTION):
    """
    Metrics over the windows ending after the warm-up. Utilization counts data bits
    leaving the bottleneck; Jain uses delivered payload bits per flow, late ACKs included.
    """
    meta = trace.metadata
    window = meta["window_s"]
    capacity = meta["topology"]["bottleneck_capacity"]
    data_bits = meta["topology"]["data_packet_size"] * 8.0
    warmup = warmup_fraction * meta["duration_s"]

    link = trace.link[trace.link.time_s > warmup + 1e-12]
    windows = trace.windows[trace.windows.time_s > warmup + 1e-12]
    measured = len(link) * window
    if measured <= 0:
        raise ValueError("no measurement windows after the warm-up")

    utilization = float(link.bottleneck_bits.sum() / (capacity * measured))
    if utilization > 1.0 + UTILIZATION_SLACK:
        logger.warning("utilization %.4f exceeds the measurement slack", utilization)

    samples = windows.rtt_samples.sum()
    mean_rtt = float((windows.x2 * windows.rtt_samples).sum() / samples) if samples else math.nan

    per_flow = windows.groupby("flow_id").delivered.sum().reindex(range(meta["topology"]["pair_count"]), fill_value=0)
    try:
        jain = jain_index(per_flow.to_numpy() * data_bits / measured)
    except AllZero:
        logger.warning("no flow delivered data after the warm-up; Jain index undefined")
        jain = math.nan

    return {
        "utilization": utilization,
        "mean_rtt_s": mean_rtt,
        "loss_count": int(trace.windows.losses.sum()),
        "drops": int(sum(p["drops"] for p in trace.ports.values())),
        "jain": jain,
        "min_action": float(trace.windows.action.min()),
        "max_action": float(trace.windows.action.max()),
    }


def run_scenario(job):
    """Worker entry point: one simulation and its metrics row."""
    sid, capacity, pairs, repetition, seed, scenario, policy, warmup_fraction = job
    try:
        trace = simulate(scenario, policy, seed)
    finally:
        policy.close()
    row = {"scenario_id": sid, "capacity_mbps": float(capacity), "pair_count": int(pairs),
           "repetition": repetition, "seed": seed, "duration_s": scenario.duration_s}
    row.update(compute_metrics(trace, warmup_fraction))
    return row


@dataclass
class PhaseResult:
    rows: pd.DataFrame
    aggregate: pd.DataFrame
    metadata: dict

    def summary(self):
        return {**self.metadata, "scenarios": len(self.rows),
                "loss_free": bool(loss_report(self.rows).lossless.all())}


def aggregate(rows):
    """Min-max normalised metric means and stds per (capacity, pair count)."""
    frame = rows[["capacity_mbps", "pair_count"] + METRIC_COLUMNS].copy()
    for metric in METRIC_COLUMNS:
        values = frame[metric].astype(float)
        lo, hi = values.min(), values.max()
        frame[f"{metric}_norm"] = 0.0 if not hi > lo else (values - lo) / (hi - lo)
    grouped = frame.groupby(["capacity_mbps", "pair_count"], sort=True)
    norm = [f"{m}_norm" for m in METRIC_COLUMNS]
    means = grouped[METRIC_COLUMNS + norm].mean()
    stds = grouped[norm].std(ddof=0).add_suffix("_std")
    return means.join(stds).reset_index()


def run_phase(spec, policy, jobs=1):
    """Run every scenario of `spec` under `policy`; rows are sorted by scenario id."""
    work = [(*s, policy, spec.warmup_fraction) for s in spec.scenarios()]
    logger.info("phase %s: %d scenarios, %d job(s)", spec.name, len(work), jobs)
    progress = dict(total=len(work), desc=f"phase {spec.name}", disable=not progress_enabled())
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(tqdm(pool.map(run_scenario, work), **progress))
    else:
        results = [run_scenario(job) for job in tqdm(work, **progress)]

    rows = pd.DataFrame(results, columns=ROW_COLUMNS).sort_values("scenario_id", ignore_index=True)
    metadata = {
        "phase": spec.name,
        "policy": policy.describe(),
        "spec": {k: v for k, v in asdict(spec).items() if k != "base"},
        "scenario": asdict(spec.base),
        "aggregation": AGGREGATION_NOTE,
        "warmup_fraction": spec.warmup_fraction,
    }
    return PhaseResult(rows, aggregate(rows), metadata)


def loss_report(rows):
    """Per-scenario losses and whether the scenario stayed loss-free."""
    report = rows[["scenario_id", "capacity_mbps", "pair_count", "seed", "loss_count", "drops"]].copy()
    report["lossless"] = (report.loss_count == 0) & (report.drops == 0)
    return report


def loss_observation(rows):
    """Check the 'never any packet losses' observation; deviations are reported, not raised."""
    report = loss_report(rows)
    lossy = report[~report.lossless]
    if lossy.empty:
        return True, "no packet losses in any scenario"
    message = (
        f"{len(lossy)} of {len(report)} scenarios lost packets "
        f"(first: {lossy.scenario_id.iloc[0]}). This simulator's queues, pacing and loss "
        "timeout are simplified relative to a full packet-level stack, so the comparison "
        "is indicative only."
    )
    logger.warning(message)
    return False, message


def write_phase_outputs(result, out_dir):
    """metrics.csv, aggregate.csv, metrics.xlsx, loss_report.pdf and summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    holds, message = loss_observation(result.rows)
    report = loss_report(result.rows)
    (out_dir / "metrics.csv").write_bytes(convert_df_to_csv(result.rows))
    (out_dir / "aggregate.csv").write_bytes(convert_df_to_csv(result.aggregate))
    (out_dir / "metrics.xlsx").write_bytes(convert_df_to_excel(
        {"metrics": result.rows, "aggregate": result.aggregate, "losses": report}))
    (out_dir / "loss_report.pdf").write_bytes(convert_df_to_pdf(
        report, title=f"Phase {result.metadata['phase']} packet losses", notes=[message]))
    write_json(out_dir / "summary.json", {**result.summary(), "loss_observation": message,
                                          "loss_observation_holds": holds})
    return out_dir
