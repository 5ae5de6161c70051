"""Scene raster on a cell grid plus the deterministic grid MDP.

A scene is rasterized onto rows x cols cells. Each cell carries a feature
vector built from local raster statistics. Motion on the grid uses a fixed
9-action set (8 compass moves + STAY); moves that would leave the grid
clamp to the source cell, so transitions are total.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from scenecast.ppm import read_ppm

# Fixed action order; rollout tie-breaking and policy tensors rely on it.
ACTION_NAMES = ("N", "NE", "E", "SE", "S", "SW", "W", "NW", "STAY")
ACTION_OFFSETS = (
    (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (0, 0),
)
N_ACTIONS = 9
STAY = 8


@dataclass(frozen=True)
class GridSpec:
    """Grid geometry: cell layout and the world-coordinate anchoring."""

    rows: int
    cols: int
    cell_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.rows}x{self.cols}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def diagonal(self) -> float:
        """Grid diagonal in world units; the motion-normalization scale."""
        return float(np.hypot(self.rows * self.cell_size, self.cols * self.cell_size))


@dataclass(frozen=True)
class Cell:
    row: int
    col: int

    def flat(self, spec: GridSpec) -> int:
        return self.row * spec.cols + self.col


@dataclass(frozen=True)
class GridScene:
    """Immutable scene: raster image, grid spec, per-cell features."""

    spec: GridSpec
    raster: np.ndarray  # H_px x W_px x C_px, channels in [0,1]
    features: np.ndarray  # rows x cols x C_f
    semantic_labels: np.ndarray | None = None  # synthetic scenes only

    def __post_init__(self):
        r, c, _ = self.features.shape
        if (r, c) != (self.spec.rows, self.spec.cols):
            raise ValueError("feature grid does not match spec")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature values")


def _cell_means(raster: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Per-cell channel means over the pixel block each cell covers."""
    h, w, c = raster.shape
    row_edges = (np.arange(spec.rows + 1) * h) // spec.rows
    col_edges = (np.arange(spec.cols + 1) * w) // spec.cols
    row_sums = np.add.reduceat(raster, row_edges[:-1], axis=0)
    sums = np.add.reduceat(row_sums, col_edges[:-1], axis=1)
    areas = np.diff(row_edges)[:, None] * np.diff(col_edges)[None, :]
    return sums / areas[:, :, None]


def build_grid(raster: np.ndarray, spec: GridSpec,
               semantic_labels: np.ndarray | None = None) -> GridScene:
    """Map a raster onto the grid and compute per-cell features.

    Feature vector per cell = channel means of the cell's own pixels,
    concatenated with the mean of the 3x3 cell neighborhood's cell-means
    (out-of-bounds neighbors contribute zeros), so C_f = 2 * C_px.
    """
    raster = np.asarray(raster, dtype=np.float64)
    if raster.ndim != 3:
        raise ValueError("raster must be H x W x C")
    h, w, c = raster.shape
    if h < spec.rows or w < spec.cols:
        raise ValueError(
            f"raster {h}x{w} smaller than one pixel per cell for {spec.rows}x{spec.cols} grid"
        )
    means = _cell_means(raster, spec)
    padded = np.zeros((spec.rows + 2, spec.cols + 2, c))
    padded[1:-1, 1:-1] = means
    neigh = np.zeros_like(means)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            neigh += padded[dr:dr + spec.rows, dc:dc + spec.cols]
    neigh /= 9.0
    features = np.concatenate([means, neigh], axis=2)
    return GridScene(spec=spec, raster=raster, features=features,
                     semantic_labels=semantic_labels)


def scene_from_ppm(path, spec: GridSpec) -> GridScene:
    return build_grid(read_ppm(path), spec)


def world_to_cell(pos, spec: GridSpec) -> tuple[Cell, bool]:
    """Map a world point to its cell; out-of-grid points clamp (flagged)."""
    x, y = float(pos[0]), float(pos[1])
    col = int(np.floor((x - spec.origin[0]) / spec.cell_size))
    row = int(np.floor((y - spec.origin[1]) / spec.cell_size))
    clamped = not (0 <= row < spec.rows and 0 <= col < spec.cols)
    row = min(max(row, 0), spec.rows - 1)
    col = min(max(col, 0), spec.cols - 1)
    return Cell(row, col), clamped


def cell_to_world(cell: Cell, spec: GridSpec) -> np.ndarray:
    """World coordinates of the cell center."""
    x = spec.origin[0] + (cell.col + 0.5) * spec.cell_size
    y = spec.origin[1] + (cell.row + 0.5) * spec.cell_size
    return np.array([x, y])


def transition(cell: Cell, action: int, spec: GridSpec) -> Cell:
    """Deterministic move; off-grid results map back to the source cell."""
    dr, dc = ACTION_OFFSETS[action]
    nr, nc = cell.row + dr, cell.col + dc
    if not (0 <= nr < spec.rows and 0 <= nc < spec.cols):
        return cell
    return Cell(nr, nc)


@lru_cache(maxsize=128)
def transition_table(rows: int, cols: int) -> np.ndarray:
    """Flat destination index per (action, state); shape (9, rows*cols)."""
    r = np.arange(rows)[:, None]
    c = np.arange(cols)[None, :]
    table = np.empty((N_ACTIONS, rows * cols), dtype=np.int64)
    for a, (dr, dc) in enumerate(ACTION_OFFSETS):
        nr, nc = r + dr, c + dc
        valid = (nr >= 0) & (nr < rows) & (nc >= 0) & (nc < cols)
        nr = np.where(valid, nr, r)
        nc = np.where(valid, nc, c)
        table[a] = (nr * cols + nc).ravel()
    return table
