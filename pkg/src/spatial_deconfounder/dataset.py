"""Gridded observational data: storage, file format, masking, standardization."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .lattice import GridShape, complete_mask, is_complete_neighborhood, neighbor_offsets, neighbor_stack

HIDDEN_PREFIX = "hidden."
COVARIATE_PREFIX = "X_"
OUTCOME_KEY = "Y"


class DatasetError(ValueError):
    """Raised for malformed data files or invalid dataset operations."""


def _frozen(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SpatialDataset:
    """Covariates, binary treatment and outcome on an ``nx x ny`` lattice.

    Arrays are indexed ``[j, i]``.  ``covariates`` has shape ``(ny, nx, d_x)`` and
    only holds the model-visible columns; masked columns live in ``hidden`` and
    are read exclusively by the scenario oracle.  Cells with ``validity`` false
    carry treatment 0, covariates 0 and outcome NaN so they act as zero padding.
    """

    grid: GridShape
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    treatment: np.ndarray
    outcome: np.ndarray
    validity: np.ndarray
    hidden: np.ndarray = None
    hidden_names: tuple[str, ...] = ()
    moments: dict = field(default_factory=dict)
    units: dict = field(default_factory=dict)
    provenance: str = ""
    seed: int | None = None

    def __post_init__(self):
        g = self.grid
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 2:
            cov = cov[:, :, None] if cov.shape == g.shape else cov.reshape(g.shape + (-1,))
        hid = np.zeros(g.shape + (0,)) if self.hidden is None else np.asarray(self.hidden, dtype=float)
        if hid.ndim == 2:
            hid = hid[:, :, None]
        A = np.asarray(self.treatment)
        Y = np.asarray(self.outcome, dtype=float)
        V = np.asarray(self.validity, dtype=bool)
        for name, arr in (("treatment", A), ("outcome", Y), ("validity", V)):
            if arr.shape != g.shape:
                raise DatasetError(f"{name} has shape {arr.shape}, grid is {g.shape}")
        if cov.shape[:2] != g.shape or hid.shape[:2] != g.shape:
            raise DatasetError("covariate arrays do not match the grid shape")
        names = tuple(self.covariate_names)
        hnames = tuple(self.hidden_names)
        if len(names) != cov.shape[2] or len(hnames) != hid.shape[2]:
            raise DatasetError("covariate names do not match the number of columns")
        if len(set(names + hnames)) != len(names) + len(hnames):
            raise DatasetError("covariate names must be unique across visible and hidden columns")
        if not np.isin(A[V], (0, 1)).all():
            raise DatasetError("treatment must be 0/1 on valid sites")
        object.__setattr__(self, "covariates", _frozen(cov, float))
        object.__setattr__(self, "hidden", _frozen(hid, float))
        object.__setattr__(self, "treatment", _frozen(np.where(V, A, 0), np.int64))
        object.__setattr__(self, "outcome", _frozen(Y, float))
        object.__setattr__(self, "validity", _frozen(V, bool))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "hidden_names", hnames)

    @property
    def d_x(self) -> int:
        return len(self.covariate_names)

    @property
    def n_valid(self) -> int:
        return int(self.validity.sum())

    def column(self, name: str) -> np.ndarray:
        """A covariate field by name, visible or hidden (oracle access)."""
        if name in self.covariate_names:
            return self.covariates[:, :, self.covariate_names.index(name)]
        if name in self.hidden_names:
            return self.hidden[:, :, self.hidden_names.index(name)]
        raise KeyError(name)

    def all_covariates(self) -> tuple[np.ndarray, tuple[str, ...]]:
        """Visible then hidden columns, for the data-generating oracle only."""
        return (np.concatenate([self.covariates, self.hidden], axis=2),
                self.covariate_names + self.hidden_names)

    def with_outcome(self, outcome) -> "SpatialDataset":
        return replace(self, outcome=np.where(self.validity, outcome, np.nan))

    def with_treatment(self, treatment) -> "SpatialDataset":
        return replace(self, treatment=treatment)

    def metadata(self) -> dict:
        return {
            "nx": self.grid.nx,
            "ny": self.grid.ny,
            "covariates": list(self.covariate_names),
            "masked": list(self.hidden_names),
            "seed": self.seed,
            "units": dict(self.units),
            "provenance": self.provenance,
            "moments": {k: [float(m), float(s)] for k, (m, s) in self.moments.items()},
        }


def from_arrays(treatment, outcome, covariates=None, names=None, validity=None, **kw) -> SpatialDataset:
    A = np.asarray(treatment)
    ny, nx = A.shape
    grid = GridShape(nx, ny)
    if covariates is None:
        covariates = np.zeros((ny, nx, 0))
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 2:
        covariates = covariates[:, :, None]
    if names is None:
        names = [f"x{k}" for k in range(covariates.shape[2])]
    if validity is None:
        validity = np.ones((ny, nx), dtype=bool)
    return SpatialDataset(grid, covariates, tuple(names), A, outcome, validity, **kw)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(ds: SpatialDataset, path) -> Path:
    """Write ``<path>`` (CSV) and ``<stem>.meta.json``; returns the CSV path."""
    path = Path(path)
    header = ["i", "j", "A", "Y"]
    header += [COVARIATE_PREFIX + n for n in ds.covariate_names]
    header += [HIDDEN_PREFIX + n for n in ds.hidden_names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for j in range(ds.grid.ny):
            for i in range(ds.grid.nx):
                if not ds.validity[j, i]:
                    continue
                row = [i, j, int(ds.treatment[j, i]), _fmt(ds.outcome[j, i])]
                row += [_fmt(v) for v in ds.covariates[j, i]]
                row += [_fmt(v) for v in ds.hidden[j, i]]
                w.writerow(row)
    with open(meta_path(path), "w", encoding="utf-8") as fh:
        json.dump(ds.metadata(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _parse_header(header: list[str], meta: dict) -> tuple[list[str], list[str]]:
    if header[:4] != ["i", "j", "A", "Y"]:
        raise DatasetError(f"malformed header (row 1): expected i,j,A,Y first, got {header[:4]}")
    visible, hidden = [], []
    for col in header[4:]:
        if col.startswith(HIDDEN_PREFIX):
            hidden.append(col[len(HIDDEN_PREFIX):])
        elif col.startswith(COVARIATE_PREFIX):
            if hidden:
                raise DatasetError("malformed header (row 1): hidden columns must come last")
            visible.append(col[len(COVARIATE_PREFIX):])
        else:
            raise DatasetError(f"malformed header (row 1): unexpected column {col!r}")
    if "covariates" in meta and list(meta["covariates"]) != visible:
        raise DatasetError(f"header covariates {visible} do not match metadata {meta['covariates']}")
    if "masked" in meta and list(meta["masked"]) != hidden:
        raise DatasetError(f"header hidden columns {hidden} do not match metadata {meta['masked']}")
    return visible, hidden


def load_dataset(path) -> SpatialDataset:
    """Read a dataset written by :func:`save_dataset` (or by hand, same layout)."""
    path = Path(path)
    mpath = meta_path(path)
    if not mpath.exists():
        raise DatasetError(f"missing metadata sidecar {mpath}")
    with open(mpath, encoding="utf-8") as fh:
        meta = json.load(fh)
    try:
        grid = GridShape(int(meta["nx"]), int(meta["ny"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"metadata must define positive nx, ny: {exc}") from None

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError("empty data file")
    visible, hidden = _parse_header(rows[0], meta)
    ncol = 4 + len(visible) + len(hidden)

    A = np.zeros(grid.shape, dtype=np.int64)
    Y = np.full(grid.shape, np.nan)
    X = np.zeros(grid.shape + (len(visible),))
    H = np.zeros(grid.shape + (len(hidden),))
    V = np.zeros(grid.shape, dtype=bool)
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != ncol:
            raise DatasetError(f"row {lineno}: expected {ncol} fields, got {len(row)}")
        try:
            i, j = int(row[0]), int(row[1])
            a = float(row[2])
            vals = [float(v) for v in row[3:]]
        except ValueError as exc:
            raise DatasetError(f"row {lineno}: {exc}") from None
        if not grid.contains((i, j)):
            raise DatasetError(f"row {lineno}: site ({i},{j}) outside {grid.nx}x{grid.ny} grid from metadata")
        if V[j, i]:
            raise DatasetError(f"row {lineno}: duplicate site ({i},{j})")
        if a not in (0.0, 1.0):
            raise DatasetError(f"row {lineno}: treatment A={row[2]} not in {{0,1}}")
        V[j, i] = True
        A[j, i] = int(a)
        Y[j, i] = vals[0]
        X[j, i] = vals[1:1 + len(visible)]
        H[j, i] = vals[1 + len(visible):]
    moments = {k: (float(v[0]), float(v[1])) for k, v in (meta.get("moments") or {}).items()}
    return SpatialDataset(grid, X, tuple(visible), A, Y, V, H, tuple(hidden), moments,
                          dict(meta.get("units") or {}), meta.get("provenance") or "", meta.get("seed"))


def mask_covariates(ds: SpatialDataset, names) -> SpatialDataset:
    """Move the named visible columns to the hidden set."""
    names = list(names)
    for n in names:
        if n in ds.hidden_names:
            raise DatasetError(f"covariate {n!r} is already hidden")
        if n not in ds.covariate_names:
            raise DatasetError(f"unknown covariate {n!r}")
    if not names:
        return ds
    keep = [k for k, n in enumerate(ds.covariate_names) if n not in names]
    move = [ds.covariate_names.index(n) for n in names]
    return replace(
        ds,
        covariates=ds.covariates[:, :, keep],
        covariate_names=tuple(ds.covariate_names[k] for k in keep),
        hidden=np.concatenate([ds.hidden, ds.covariates[:, :, move]], axis=2),
        hidden_names=ds.hidden_names + tuple(names),
    )


def neighbor_treatment_vector(ds: SpatialDataset, site, radius: int) -> np.ndarray:
    """Neighbor treatments of ``site`` in canonical row-major order."""
    if not is_complete_neighborhood(site, ds.grid, radius):
        raise DatasetError(f"site {tuple(site)} has an incomplete radius-{radius} neighborhood")
    i, j = site
    return np.array([ds.treatment[j + dj, i + di] for di, dj in neighbor_offsets(radius)], dtype=float)


def _moments(values: np.ndarray, name: str) -> tuple[float, float]:
    m = float(np.mean(values))
    s = float(np.std(values))
    if not s > 1e-12 * max(1.0, abs(m)):
        raise DatasetError(f"column {name!r} has zero variance over valid sites")
    return m, s


def standardize(ds: SpatialDataset) -> SpatialDataset:
    """Z-score visible covariates and the outcome over valid sites; treatment untouched."""
    V = ds.validity
    if ds.n_valid < 2:
        raise DatasetError("standardize needs at least two valid sites")
    moments = dict(ds.moments)
    X = ds.covariates.copy()
    for k, name in enumerate(ds.covariate_names):
        m, s = _moments(X[:, :, k][V], name)
        X[:, :, k] = np.where(V, (X[:, :, k] - m) / s, 0.0)
        moments[name] = _compose(moments.get(name), m, s)
    Y = ds.outcome.copy()
    obs = V & np.isfinite(Y)
    m, s = _moments(Y[obs], OUTCOME_KEY)
    Y = (Y - m) / s
    moments[OUTCOME_KEY] = _compose(moments.get(OUTCOME_KEY), m, s)
    return replace(ds, covariates=X, outcome=Y, moments=moments)


def _compose(prev, m, s):
    # Standardizing twice composes the affine maps so unstandardize still inverts to raw scale.
    if prev is None:
        return (m, s)
    m0, s0 = prev
    return (m0 + s0 * m, s0 * s)


def unstandardize(ds: SpatialDataset) -> SpatialDataset:
    """Invert :func:`standardize` using the stored moments."""
    V = ds.validity
    X = ds.covariates.copy()
    for k, name in enumerate(ds.covariate_names):
        if name in ds.moments:
            m, s = ds.moments[name]
            X[:, :, k] = np.where(V, X[:, :, k] * s + m, 0.0)
    H = ds.hidden.copy()
    for k, name in enumerate(ds.hidden_names):
        if name in ds.moments:
            m, s = ds.moments[name]
            H[:, :, k] = np.where(V, H[:, :, k] * s + m, 0.0)
    Y = ds.outcome
    if OUTCOME_KEY in ds.moments:
        m, s = ds.moments[OUTCOME_KEY]
        Y = Y * s + m
    return replace(ds, covariates=X, hidden=H, outcome=Y, moments={})


def in_scope_mask(ds: SpatialDataset, radius: int) -> np.ndarray:
    """Valid sites whose radius-``radius`` window lies inside the grid."""
    return complete_mask(ds.grid, radius, ds.validity)


def neighborhood_blocks(ds: SpatialDataset, radius: int, sites: np.ndarray, treatment=None, covariates=None):
    """Per-site blocks ``(a_s, a_N, x_s, x_N)`` at the given linear indices.

    Shapes are ``(n,)``, ``(n, K)``, ``(n, d_x)`` and ``(n, K * d_x)`` with
    ``K = (2r+1)^2 - 1``; ``x_N`` is neighbor-major.  ``treatment`` overrides the
    observed treatment field (used for interventions).
    """
    A = ds.treatment if treatment is None else np.asarray(treatment)
    A = np.where(ds.validity, A, 0).astype(float)
    X = ds.covariates if covariates is None else np.asarray(covariates, dtype=float)
    n = len(sites)
    jj, ii = np.divmod(np.asarray(sites, dtype=int), ds.grid.nx)
    a_s = A[jj, ii]
    x_s = X[jj, ii]
    if radius == 0:
        return a_s, np.zeros((n, 0)), x_s, np.zeros((n, 0))
    a_n = neighbor_stack(A, radius)[jj, ii]
    x_n = neighbor_stack(X, radius)[jj, ii].reshape(n, -1)
    return a_s, a_n, x_s, x_n
