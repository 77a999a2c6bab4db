"""
Interpretability analyses of a policy over the (intersend ratio, RTT ratio) plane.

Observations are built from a minimum RTT c (seconds): x1 = i_ratio·c, x2 = rtt_ratio·c,
x3 = rtt_ratio and a fixed loss ratio x4. Outputs are long-format tables for plotting
elsewhere.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from cc_env import Observation, Scenario
from config import I_RATIO_RANGE, RTT_RATIO_RANGE, UNIT_SCALE, SymccError, require
from expr_core import evaluate_batch
from netsim import analytic_min_rtt

logger = logging.getLogger(__name__)

FIGURES = ("contour", "cosine", "intersend")
LEVEL = 1.0
TWO_PI = 2.0 * math.pi


class NotCosineRooted(SymccError):
    """The policy's expression is not of the form cos(...)."""


def min_rtt_for_capacity(capacity_mbps, base=None):
    """Analytic minimum RTT c (seconds) of the default topology at `capacity_mbps`."""
    base = base or Scenario()
    return analytic_min_rtt(replace(base, bottleneck_capacity_mbps=float(capacity_mbps)).topology())


def observation_matrix(i_ratios, rtt_ratios, c, x4=0.0):
    """(n, 4) matrix in seconds for paired i_ratio / rtt_ratio arrays."""
    i_ratios = np.asarray(i_ratios, dtype=np.float64)
    rtt_ratios = np.broadcast_to(np.asarray(rtt_ratios, dtype=np.float64), i_ratios.shape)
    return np.column_stack([i_ratios * c, rtt_ratios * c, rtt_ratios, np.full(i_ratios.shape, x4)])


def policy_actions(policy, matrix_s):
    """Actions for every row of a seconds-based observation matrix."""
    if hasattr(policy, "act_matrix"):
        scaled = matrix_s.copy()
        scaled[:, :2] *= UNIT_SCALE[policy.units]
        return np.asarray(policy.act_matrix(scaled), dtype=np.float64)
    return np.array([policy.act(Observation(*row)) for row in matrix_s], dtype=np.float64)


@dataclass
class AnalysisGrid:
    """Mapped actions over rtt_ratio (rows) × i_ratio (columns)."""

    i_ratios: np.ndarray
    rtt_ratios: np.ndarray
    c: float
    x4: float
    values: np.ndarray
    policy: str = ""
    capacity_mbps: float | None = None
    level: float = LEVEL
    level_set: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.level_set = level_set_mask(self.values, self.level)

    def to_frame(self):
        ii, rr = np.meshgrid(self.i_ratios, self.rtt_ratios)
        return pd.DataFrame({
            "i_ratio": ii.ravel(),
            "rtt_ratio": rr.ravel(),
            "action": self.values.ravel(),
            "on_level_set": self.level_set.ravel(),
        })

    @property
    def has_level_set(self):
        return bool(self.level_set.any())


def level_set_mask(values, level=LEVEL):
    """Cells where the action equals `level` or changes side of it towards a neighbour."""
    side = values >= level
    mask = np.isclose(values, level, rtol=0.0, atol=1e-9)
    flip_col = side[:, 1:] != side[:, :-1]
    flip_row = side[1:, :] != side[:-1, :]
    mask[:, :-1] |= flip_col
    mask[:, 1:] |= flip_col
    mask[:-1, :] |= flip_row
    mask[1:, :] |= flip_row
    return mask


def default_i_ratios(points=100):
    return np.linspace(*I_RATIO_RANGE, points)


def default_rtt_ratios(points=31, upper=RTT_RATIO_RANGE[1]):
    return np.linspace(RTT_RATIO_RANGE[0], upper, points)


def contour_grid(policy, c, i_ratios=None, rtt_ratios=None, x4=0.0, capacity_mbps=None):
    """n(expr(i·c, r·c, r, x4)) on the grid; `c` in seconds."""
    if c <= 0:
        raise ValueError(f"minimum RTT must be positive, got {c}")
    i_ratios = default_i_ratios() if i_ratios is None else np.asarray(i_ratios, dtype=np.float64)
    rtt_ratios = default_rtt_ratios() if rtt_ratios is None else np.asarray(rtt_ratios, dtype=np.float64)
    ii, rr = np.meshgrid(i_ratios, rtt_ratios)
    actions = policy_actions(policy, observation_matrix(ii.ravel(), rr.ravel(), c, x4))
    grid = AnalysisGrid(i_ratios, rtt_ratios, c, x4, actions.reshape(ii.shape), policy.name, capacity_mbps)
    logger.info("contour grid %dx%d for %s: level set %s", len(rtt_ratios), len(i_ratios), policy.name,
                "present" if grid.has_level_set else "absent")
    return grid


def _require_cosine(policy):
    expression = getattr(policy, "expression", None)
    if expression is None or expression.root.symbol != "cos":
        raise NotCosineRooted(f"{policy.name} is not rooted at cos")
    return expression.subtree(1)


def cosine_span(policy, slices, i_ratios=None):
    """
    For each (rtt_ratio, c) slice: the cos argument reduced to [0, 2π) and the mapped
    action across the intersend ratios.
    """
    argument = _require_cosine(policy)
    i_ratios = default_i_ratios() if i_ratios is None else np.asarray(i_ratios, dtype=np.float64)
    frames = []
    for index, (rtt_ratio, c) in enumerate(slices):
        matrix = observation_matrix(i_ratios, rtt_ratio, c)
        scaled = matrix.copy()
        scaled[:, :2] *= UNIT_SCALE[policy.units]
        raw, _ = evaluate_batch(argument, scaled)
        frames.append(pd.DataFrame({
            "slice": index,
            "rtt_ratio": rtt_ratio,
            "c_s": c,
            "i_ratio": i_ratios,
            "argument": np.mod(raw, TWO_PI),
            "action": policy_actions(policy, matrix),
        }))
    return pd.concat(frames, ignore_index=True)


def intersend_response(policy, slices, i_ratios=None):
    """Per slice, the intersend ratio after one action: i_ratio / a."""
    i_ratios = default_i_ratios() if i_ratios is None else np.asarray(i_ratios, dtype=np.float64)
    frames = []
    for index, (rtt_ratio, c) in enumerate(slices):
        actions = policy_actions(policy, observation_matrix(i_ratios, rtt_ratio, c))
        frames.append(pd.DataFrame({
            "slice": index,
            "rtt_ratio": rtt_ratio,
            "c_s": c,
            "i_ratio": i_ratios,
            "action": actions,
            "next_i_ratio": i_ratios / actions,
        }))
    return pd.concat(frames, ignore_index=True)


def increase_fraction(frame):
    """Share of rows whose action raises the load."""
    return float((frame.action > LEVEL).mean())


def max_action_gap(frames, by="rtt_ratio"):
    """
    Largest pointwise action difference between slices that share `by` and i_ratio,
    e.g. the same RTT ratio at different capacities.
    """
    rows = []
    for key, group in frames.groupby(by):
        table = group.pivot_table(index="i_ratio", columns="c_s", values="action")
        if table.shape[1] < 2:
            continue
        gap = float((table.max(axis=1) - table.min(axis=1)).max())
        rows.append({by: key, "slices": table.shape[1], "max_action_gap": gap})
    return pd.DataFrame(rows, columns=[by, "slices", "max_action_gap"])


def grid_gap(first, second):
    """Largest cellwise action difference between two grids on the same axes."""
    if first.values.shape != second.values.shape:
        raise ValueError("grids have different shapes")
    return float(np.max(np.abs(first.values - second.values)))


@dataclass(frozen=True)
class AnalysisConfig:
    """Analysis config section."""

    policy: str = "sp1"
    figure: str = "contour"
    capacities_mbps: tuple[float, ...] = (1000.0, 100.0)
    rtt_ratios: tuple[float, ...] = (1.0, 1.5, 2.0)
    i_ratio_points: int = 100
    rtt_ratio_points: int = 31
    rtt_ratio_max: float = RTT_RATIO_RANGE[1]
    x4: float = 0.0

    def __post_init__(self):
        require(self.figure in FIGURES, "figure", f"expected one of {', '.join(FIGURES)}")
        require(len(self.capacities_mbps) > 0, "capacities_mbps", "need at least one capacity")
        require(all(c > 0 for c in self.capacities_mbps), "capacities_mbps", "must be > 0")
        require(all(r >= 1.0 for r in self.rtt_ratios), "rtt_ratios", "must be >= 1")
        require(self.i_ratio_points >= 1, "i_ratio_points", "must be >= 1")
        require(self.rtt_ratio_points >= 1, "rtt_ratio_points", "must be >= 1")
        require(self.rtt_ratio_max >= 1.0, "rtt_ratio_max", "must be >= 1")
        require(0.0 <= self.x4 <= 1.0, "x4", "must be within [0, 1]")

    def slices(self, base=None):
        return [(r, min_rtt_for_capacity(cap, base)) for cap in self.capacities_mbps for r in self.rtt_ratios]


def run_analysis(policy, cfg, base=None):
    """
    Tables for one figure: {name: DataFrame} plus a similarity summary dict.
    Contour produces one grid per capacity; the others one long table over all slices.
    """
    i_ratios = default_i_ratios(cfg.i_ratio_points)
    tables, summary = {}, {"figure": cfg.figure, "policy": policy.name}
    if cfg.figure == "contour":
        rtt_ratios = default_rtt_ratios(cfg.rtt_ratio_points, cfg.rtt_ratio_max)
        grids = []
        for capacity in cfg.capacities_mbps:
            grid = contour_grid(policy, min_rtt_for_capacity(capacity, base), i_ratios, rtt_ratios,
                                cfg.x4, capacity)
            tables[f"contour_C{capacity:g}"] = grid.to_frame()
            summary[f"level_set_C{capacity:g}"] = grid.has_level_set
            grids.append(grid)
        if len(grids) > 1:
            summary["max_action_gap"] = max(grid_gap(grids[0], g) for g in grids[1:])
        return tables, summary

    slices = cfg.slices(base)
    if cfg.figure == "cosine":
        frame = cosine_span(policy, slices, i_ratios)
        summary["increase_fraction_by_rtt_ratio"] = {
            float(r): increase_fraction(g) for r, g in frame.groupby("rtt_ratio")
        }
        tables["cosine_span"] = frame
    else:
        frame = intersend_response(policy, slices, i_ratios)
        tables["intersend_response"] = frame
    gaps = max_action_gap(frame)
    if not gaps.empty:
        tables["similarity"] = gaps
        summary["max_action_gap"] = float(gaps.max_action_gap.max())
    return tables, summary
