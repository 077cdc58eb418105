"""Periodic-gait qualification and torque-cost landscapes.

A trajectory segment counts as a steady gait when the variation over a
window of consecutive footsteps stays under fixed thresholds; only such
segments enter the cost comparison between two models, so transient or
limping episodes never pollute the landscape.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import rollout as rollout_mod
from .planner import Task
from .rollout import EpisodeConfig, RolloutTrace, derive_seed

BOTH = "both"
GAINED_BY_A = "gained_by_a"
LOST_BY_A = "lost_by_a"
NEITHER = "neither"


@dataclass(frozen=True)
class PeriodicityCriteria:
    stride_variation: float = 0.02  # m
    pelvis_height_variation: float = 0.03  # m
    torso_pitch_variation: float = 0.1  # rad
    window: int = 4  # consecutive footsteps

    def __post_init__(self):
        if min(self.stride_variation, self.pelvis_height_variation,
               self.torso_pitch_variation) <= 0 or self.window < 2:
            raise ValueError("periodicity thresholds must be positive")


@dataclass(frozen=True)
class GaitMetrics:
    stride: float
    speed: float
    cost: float  # accumulated u'u over the window, per footstep
    window_start: int  # index into trace.footsteps


def episode_cost(window: list) -> float:
    """Accumulated torque cost of a qualifying window, per footstep."""
    if not window:
        raise ValueError("empty footstep window")
    return float(sum(f.torque_sq_sum for f in window)) / len(window)


def extract_periodic_gait(
    trace: RolloutTrace, crit: PeriodicityCriteria = PeriodicityCriteria()
):
    """Last window of footsteps below the variation thresholds, or None."""
    steps = trace.footsteps
    w = crit.window
    if len(steps) < w:
        return None
    best = None
    for i in range(len(steps) - w + 1):
        win = steps[i : i + w]
        strides = [f.stride for f in win]
        heights = [f.mean_pelvis_height for f in win]
        pitches = [f.mean_torso_pitch for f in win]
        if (
            max(strides) - min(strides) < crit.stride_variation
            and max(heights) - min(heights) < crit.pelvis_height_variation
            and max(pitches) - min(pitches) < crit.torso_pitch_variation
        ):
            duration = sum(f.duration for f in win)
            best = GaitMetrics(
                stride=float(np.mean(strides)),
                speed=float(sum(strides) / duration) if duration > 0 else 0.0,
                cost=episode_cost(win),
                window_start=i,
            )
    return best


@dataclass
class LandscapeCell:
    task: Task
    cost_a: float | None
    cost_b: float | None
    label: str

    @property
    def ratio(self) -> float | None:
        if self.label == BOTH:
            return self.cost_a / self.cost_b
        return None


@dataclass
class LandscapeGrid:
    cells: list

    def count(self, label: str) -> int:
        return sum(1 for c in self.cells if c.label == label)

    @property
    def region_size_a(self) -> int:
        return sum(1 for c in self.cells if c.cost_a is not None)

    @property
    def region_size_b(self) -> int:
        return sum(1 for c in self.cells if c.cost_b is not None)

    def mean_ratio(self) -> float | None:
        ratios = [c.ratio for c in self.cells if c.label == BOTH]
        return float(np.mean(ratios)) if ratios else None

    def region_change(self) -> float | None:
        """(|A| - |B|) / |B|: relative growth of the viable task region."""
        if self.region_size_b == 0:
            return None
        return (self.region_size_a - self.region_size_b) / self.region_size_b


def cost_landscape(
    params_a,
    params_b,
    grid: list,
    cfg: EpisodeConfig,
    crit: PeriodicityCriteria = PeriodicityCriteria(),
    **rollout_kwargs,
) -> LandscapeGrid:
    """Paired cost comparison over a task list; seeds shared per cell."""
    if not grid:
        raise ValueError("landscape task grid is empty")
    cells = []
    for i, task in enumerate(grid):
        seed = derive_seed(cfg.seed, "landscape", i)
        cell_cfg = replace(cfg, seed=seed)
        costs = []
        for params in (params_a, params_b):
            tr = rollout_mod.rollout(params, task, cell_cfg, **rollout_kwargs)
            gait = extract_periodic_gait(tr, crit) if tr.outcome == rollout_mod.COMPLETED else None
            costs.append(gait.cost if gait is not None else None)
        cost_a, cost_b = costs
        if cost_a is not None and cost_b is not None:
            label = BOTH
        elif cost_a is not None:
            label = GAINED_BY_A
        elif cost_b is not None:
            label = LOST_BY_A
        else:
            label = NEITHER
        cells.append(LandscapeCell(task=task, cost_a=cost_a, cost_b=cost_b, label=label))
    return LandscapeGrid(cells=cells)


def write_landscape_csv(grid: LandscapeGrid, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["stride", "incline", "cost_a", "cost_b", "ratio", "label"])
        for c in grid.cells:
            wr.writerow(
                [
                    repr(c.task.stride_length),
                    repr(c.task.ground_incline),
                    "" if c.cost_a is None else repr(c.cost_a),
                    "" if c.cost_b is None else repr(c.cost_b),
                    "" if c.ratio is None else repr(c.ratio),
                    c.label,
                ]
            )
