"""Grid geometry shared by every other module.

Sites are ``(i, j)`` pairs with ``i`` the column in ``[0, nx)`` and ``j`` the row
in ``[0, ny)``.  Per-site fields are stored as arrays of shape ``(ny, nx)`` so
``field[j, i]`` is the value at site ``(i, j)``, and the linear (row-major)
index of a site is ``j * nx + i``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np
from scipy import sparse

ROOK = "rook"
QUEEN = "queen"
ADJACENCY_KINDS = (ROOK, QUEEN)


class SiteIndex(NamedTuple):
    i: int
    j: int


@dataclass(frozen=True)
class GridShape:
    nx: int
    ny: int

    def __post_init__(self):
        if int(self.nx) < 1 or int(self.ny) < 1:
            raise ValueError(f"grid dimensions must be positive, got {self.nx}x{self.ny}")

    @property
    def n_sites(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(ny, nx)`` of a per-site field."""
        return (self.ny, self.nx)

    def contains(self, site) -> bool:
        i, j = site
        return 0 <= i < self.nx and 0 <= j < self.ny

    def check(self, site) -> SiteIndex:
        if not self.contains(site):
            raise IndexError(f"site {tuple(site)} outside {self.nx}x{self.ny} grid")
        return SiteIndex(int(site[0]), int(site[1]))

    def index(self, site) -> int:
        i, j = self.check(site)
        return j * self.nx + i

    def site(self, index: int) -> SiteIndex:
        if not 0 <= index < self.n_sites:
            raise IndexError(f"linear index {index} outside grid with {self.n_sites} sites")
        j, i = divmod(int(index), self.nx)
        return SiteIndex(i, j)

    def sites(self) -> Iterator[SiteIndex]:
        """All sites in row-major order (j ascending, then i)."""
        for j in range(self.ny):
            for i in range(self.nx):
                yield SiteIndex(i, j)


def neighbor_offsets(radius: int) -> list[tuple[int, int]]:
    """Canonical ``(di, dj)`` offsets of the Chebyshev ball, center excluded.

    Row-major: ``dj`` ascending, then ``di``.  This ordering fixes the layout of
    every neighbor-treatment vector in the package.
    """
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    return [
        (di, dj)
        for dj in range(-radius, radius + 1)
        for di in range(-radius, radius + 1)
        if (di, dj) != (0, 0)
    ]


def n_neighbors(radius: int) -> int:
    return (2 * radius + 1) ** 2 - 1


def neighbors(site, grid: GridShape, radius: int) -> list[SiteIndex]:
    """Sites within Chebyshev distance ``radius`` of ``site`` (excluding it), row-major."""
    if radius < 1:
        raise ValueError("neighborhood radius must be >= 1")
    i, j = grid.check(site)
    out = []
    for di, dj in neighbor_offsets(radius):
        s = (i + di, j + dj)
        if grid.contains(s):
            out.append(SiteIndex(*s))
    return out


def is_complete_neighborhood(site, grid: GridShape, radius: int) -> bool:
    """True iff the full ``(2r+1) x (2r+1)`` window around ``site`` is inside the grid."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    i, j = site
    return radius <= i < grid.nx - radius and radius <= j < grid.ny - radius


def complete_mask(grid: GridShape, radius: int, validity: np.ndarray | None = None) -> np.ndarray:
    """Boolean field marking sites whose ``radius`` window lies inside the grid.

    With ``validity`` given, the site itself must also be valid.  Masked cells are
    allowed as (padded) neighbors.
    """
    mask = np.zeros(grid.shape, dtype=bool)
    if grid.ny > 2 * radius and grid.nx > 2 * radius:
        mask[radius:grid.ny - radius, radius:grid.nx - radius] = True
    if validity is not None:
        mask &= np.asarray(validity, dtype=bool)
    return mask


def _edge_offsets(kind: str) -> list[tuple[int, int]]:
    if kind == ROOK:
        return [(1, 0), (0, 1)]
    if kind == QUEEN:
        return [(1, 0), (0, 1), (1, 1), (-1, 1)]
    raise ValueError(f"unknown adjacency kind {kind!r}; expected one of {ADJACENCY_KINDS}")


def edges(grid: GridShape, kind: str = QUEEN) -> np.ndarray:
    """Undirected edge list as an ``(n_edges, 2)`` array of linear indices."""
    jj, ii = np.mgrid[0:grid.ny, 0:grid.nx]
    out = []
    for di, dj in _edge_offsets(kind):
        i2, j2 = ii + di, jj + dj
        ok = (i2 >= 0) & (i2 < grid.nx) & (j2 < grid.ny)
        a = (jj * grid.nx + ii)[ok]
        b = (j2 * grid.nx + i2)[ok]
        out.append(np.stack([a, b], axis=1))
    if not out:
        return np.zeros((0, 2), dtype=int)
    return np.concatenate(out, axis=0)


def adjacency_matrix(grid: GridShape, kind: str = QUEEN, sites: np.ndarray | None = None) -> sparse.csr_matrix:
    """Symmetric 0/1 adjacency with zero diagonal.

    ``sites`` (a boolean field or array of linear indices) restricts the matrix to
    the induced subgraph, with rows ordered by increasing linear index.
    """
    e = edges(grid, kind)
    n = grid.n_sites
    data = np.ones(2 * len(e))
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    A = sparse.csr_matrix((data, (rows, cols)), shape=(n, n))
    if sites is not None:
        idx = site_indices(grid, sites)
        A = A[idx][:, idx].tocsr()
    return A


def site_indices(grid: GridShape, sites) -> np.ndarray:
    """Normalize a boolean field or index array to sorted linear indices."""
    sites = np.asarray(sites)
    if sites.dtype == bool:
        if sites.shape != grid.shape:
            raise ValueError(f"mask shape {sites.shape} does not match grid {grid.shape}")
        return np.flatnonzero(sites.ravel())
    return np.sort(sites.astype(int).ravel())


def degree_matrix(A: sparse.spmatrix) -> sparse.dia_matrix:
    return sparse.diags(np.asarray(A.sum(axis=1)).ravel())


def laplacian(grid: GridShape, kind: str = ROOK, sites=None) -> sparse.csr_matrix:
    """Graph Laplacian ``L = D - A``."""
    A = adjacency_matrix(grid, kind, sites)
    return (degree_matrix(A) - A).tocsr()


def window_extract(field: np.ndarray, site, radius: int, pad_value: float = 0.0) -> np.ndarray:
    """Return the ``(2r+1, 2r+1, ...)`` patch centred at ``site``.

    Out-of-bounds cells are filled with ``pad_value``.  Extra trailing axes of
    ``field`` (channels) are carried through.
    """
    field = np.asarray(field)
    ny, nx = field.shape[:2]
    i, j = site
    if not (0 <= i < nx and 0 <= j < ny):
        raise IndexError(f"site {tuple(site)} outside {nx}x{ny} grid")
    w = 2 * radius + 1
    patch = np.full((w, w) + field.shape[2:], pad_value, dtype=np.result_type(field, type(pad_value)))
    j0, j1 = max(j - radius, 0), min(j + radius + 1, ny)
    i0, i1 = max(i - radius, 0), min(i + radius + 1, nx)
    patch[j0 - (j - radius):j1 - (j - radius), i0 - (i - radius):i1 - (i - radius)] = field[j0:j1, i0:i1]
    return patch


def windows(field: np.ndarray, radius: int, pad_value: float = 0.0) -> np.ndarray:
    """All windows at once: array of shape ``(ny, nx, 2r+1, 2r+1, ...)``."""
    field = np.asarray(field)
    pad = [(radius, radius), (radius, radius)] + [(0, 0)] * (field.ndim - 2)
    padded = np.pad(field, pad, constant_values=pad_value)
    ny, nx = field.shape[:2]
    w = 2 * radius + 1
    out = np.empty((ny, nx, w, w) + field.shape[2:], dtype=padded.dtype)
    for dj in range(w):
        for di in range(w):
            out[:, :, dj, di] = padded[dj:dj + ny, di:di + nx]
    return out


def neighbor_stack(field: np.ndarray, radius: int, pad_value: float = 0.0) -> np.ndarray:
    """Neighbor values of every site in canonical order.

    Returns shape ``(ny, nx, n_neighbors(radius), ...)``; the ``k``-th slot holds
    the value at offset ``neighbor_offsets(radius)[k]``.
    """
    field = np.asarray(field)
    pad = [(radius, radius), (radius, radius)] + [(0, 0)] * (field.ndim - 2)
    padded = np.pad(field, pad, constant_values=pad_value)
    ny, nx = field.shape[:2]
    offs = neighbor_offsets(radius)
    out = np.empty((ny, nx, len(offs)) + field.shape[2:], dtype=padded.dtype)
    for k, (di, dj) in enumerate(offs):
        out[:, :, k] = padded[radius + dj:radius + dj + ny, radius + di:radius + di + nx]
    return out


def queen_bfs_levels(grid: GridShape, seeds: np.ndarray, levels: int) -> np.ndarray:
    """Boolean field of all sites within ``levels`` queen steps of ``seeds``.

    On a queen lattice this is a Chebyshev dilation, done by repeated 3x3 max filtering.
    """
    mask = np.asarray(seeds, dtype=bool).copy()
    for _ in range(levels):
        padded = np.pad(mask, 1)
        grown = np.zeros_like(mask)
        for dj in range(3):
            for di in range(3):
                grown |= padded[dj:dj + grid.ny, di:di + grid.nx]
        mask = grown
    return mask
