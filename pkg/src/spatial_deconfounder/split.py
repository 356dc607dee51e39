"""Spatially-aware train/validation split with a BFS buffer zone."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lattice import GridShape, complete_mask, queen_bfs_levels

TRAIN, VAL, BUFFER = "train", "val", "buffer"


@dataclass(frozen=True)
class SplitParams:
    alpha: float = 0.02
    levels: int = 1
    buffer: int = 1
    model_radius: int = 1

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.levels < 0 or self.buffer < 0:
            raise ValueError("levels and buffer must be nonnegative")
        if self.model_radius < 1:
            raise ValueError("model_radius must be >= 1")


@dataclass(frozen=True)
class SplitAssignment:
    """Boolean fields over the grid; the three roles are disjoint."""

    grid: GridShape
    train: np.ndarray
    validation: np.ndarray
    buffer: np.ndarray

    @property
    def in_scope(self) -> np.ndarray:
        return self.train | self.validation

    def roles(self) -> dict:
        return {TRAIN: self.train, VAL: self.validation, BUFFER: self.buffer}


class SplitError(ValueError):
    pass


def spatial_split(grid: GridShape, validity, params: SplitParams = SplitParams(), seed=0) -> SplitAssignment:
    """Pick validation seeds, grow them by BFS, and fence them off from training.

    Validation is restricted to sites with complete ``model_radius`` windows;
    expansion steps that reach other sites put them in the buffer instead.
    """
    validity = np.ones(grid.shape, dtype=bool) if validity is None else np.asarray(validity, dtype=bool)
    candidates = complete_mask(grid, params.model_radius, validity)
    idx = np.flatnonzero(candidates.ravel())
    if idx.size == 0:
        raise SplitError("no valid sites with complete neighborhoods")
    n_seeds = math.ceil(params.alpha * idx.size)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(idx, size=n_seeds, replace=False)
    seeds = np.zeros(grid.n_sites, dtype=bool)
    seeds[chosen] = True
    seeds = seeds.reshape(grid.shape)

    grown = queen_bfs_levels(grid, seeds, params.levels)
    validation = grown & candidates
    fence = queen_bfs_levels(grid, grown, params.buffer + params.model_radius)
    train = candidates & ~fence
    if not train.any():
        raise SplitError(f"alpha={params.alpha} leaves no training sites")
    buffer = validity & fence & ~validation
    return SplitAssignment(grid, train, validation, buffer)


def save_split(split: SplitAssignment, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "role"])
        for j in range(split.grid.ny):
            for i in range(split.grid.nx):
                for role, mask in split.roles().items():
                    if mask[j, i]:
                        w.writerow([i, j, role])
    return path


def load_split(path, grid: GridShape) -> SplitAssignment:
    masks = {r: np.zeros(grid.shape, dtype=bool) for r in (TRAIN, VAL, BUFFER)}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            role = row["role"]
            if role not in masks:
                raise SplitError(f"unknown role {role!r}")
            masks[role][int(row["j"]), int(row["i"])] = True
    return SplitAssignment(grid, masks[TRAIN], masks[VAL], masks[BUFFER])


def chebyshev_gap(split: SplitAssignment) -> int:
    """Minimum Chebyshev distance between any validation and any training site."""
    tj, ti = np.nonzero(split.train)
    vj, vi = np.nonzero(split.validation)
    if tj.size == 0 or vj.size == 0:
        return np.iinfo(int).max
    d = np.maximum(np.abs(ti[:, None] - vi[None, :]), np.abs(tj[:, None] - vj[None, :]))
    return int(d.min())
