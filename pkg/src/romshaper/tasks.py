"""Discretized task domain with curriculum expansion.

Tasks live on an integer lattice (stride index, incline index) scaled by
the grid steps.  The active set starts small and grows by axis-aligned
adjacency around cells whose most recent evaluation succeeded; it never
shrinks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .planner import Task

Cell = tuple[int, int]


@dataclass
class TaskGrid:
    stride_step: float = 0.1
    incline_step: float = 0.1
    stride_bounds: tuple[float, float] = (-0.4, 0.5)
    incline_bounds: tuple[float, float] = (-0.4, 0.4)
    cells: dict = field(default_factory=dict)  # Cell -> last evaluation succeeded

    def __post_init__(self):
        if self.stride_step <= 0 or self.incline_step <= 0:
            raise ValueError("grid steps must be positive")
        for cell in self.cells:
            if not self.in_bounds(cell):
                raise ValueError(f"cell {cell} outside global bounds")
        if not self.cells:
            raise ValueError("active task set must be nonempty")

    def __len__(self) -> int:
        return len(self.cells)

    def sorted_cells(self) -> list[Cell]:
        return sorted(self.cells)

    def task_of(self, cell: Cell) -> Task:
        return Task(
            stride_length=cell[0] * self.stride_step,
            ground_incline=cell[1] * self.incline_step,
        )

    def in_bounds(self, cell: Cell) -> bool:
        s = cell[0] * self.stride_step
        g = cell[1] * self.incline_step
        eps = 1e-9
        return (
            self.stride_bounds[0] - eps <= s <= self.stride_bounds[1] + eps
            and self.incline_bounds[0] - eps <= g <= self.incline_bounds[1] + eps
        )

    def mark(self, cell: Cell, success: bool) -> None:
        if cell not in self.cells:
            raise KeyError(f"cell {cell} not in the active set")
        self.cells[cell] = bool(success)

    def copy(self) -> "TaskGrid":
        return TaskGrid(
            stride_step=self.stride_step,
            incline_step=self.incline_step,
            stride_bounds=self.stride_bounds,
            incline_bounds=self.incline_bounds,
            cells=dict(self.cells),
        )


def initial_grid(
    strides=(-0.1, 0.0, 0.1, 0.2),
    inclines=(0.0,),
    stride_step: float = 0.1,
    incline_step: float = 0.1,
    stride_bounds: tuple[float, float] = (-0.4, 0.5),
    incline_bounds: tuple[float, float] = (-0.4, 0.4),
) -> TaskGrid:
    """Active set from explicit task values snapped onto the lattice."""
    cells = {}
    for s in strides:
        for g in inclines:
            cells[(int(round(s / stride_step)), int(round(g / incline_step)))] = False
    return TaskGrid(
        stride_step=stride_step,
        incline_step=incline_step,
        stride_bounds=stride_bounds,
        incline_bounds=incline_bounds,
        cells=cells,
    )


def sample_size(grid: TaskGrid, rho: float) -> int:
    """floor(rho * |grid|), clamped to at least one task."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"sampling fraction must be in (0, 1], got {rho}")
    return max(1, int(np.floor(rho * len(grid))))


def sample_cells(grid: TaskGrid, rho: float, rng: np.random.Generator) -> list[Cell]:
    cells = grid.sorted_cells()
    n = sample_size(grid, rho)
    idx = rng.choice(len(cells), size=n, replace=False)
    return [cells[i] for i in idx]


def sample_tasks(grid: TaskGrid, rho: float, rng: np.random.Generator) -> list[Task]:
    """Distinct cell-center tasks drawn uniformly without replacement."""
    return [grid.task_of(c) for c in sample_cells(grid, rho, rng)]


def curriculum_expand(grid: TaskGrid) -> TaskGrid:
    """Grow the active set around every currently-successful cell."""
    new = grid.copy()
    for (i, j), ok in grid.cells.items():
        if not ok:
            continue
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            cand = (i + di, j + dj)
            if cand not in new.cells and new.in_bounds(cand):
                new.cells[cand] = False
    return new
