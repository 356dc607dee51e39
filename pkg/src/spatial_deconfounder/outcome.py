"""Stage 2: outcome heads ``h(A_s, A_N, X_s, X_N, Zhat_s)`` and the end-to-end variant.

Three heads are provided:

* ``linear``: closed-form least squares on the tabular layout.
* ``spline-plus``: two-stage residualized regression with graph-Laplacian smooths
  expanded in the low-frequency eigenvectors of the lattice Laplacian.
* ``conv-encdec``: a small encoder-decoder CNN on the raster of treatment,
  covariates and Zhat.  The coarse level uses dilated rather than strided
  convolutions so predictions stay translation equivariant away from borders.
"""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from scipy import linalg, sparse
from scipy.sparse.linalg import eigsh
from torch import nn

from .checkpoint import read_checkpoint, write_checkpoint
from .cvae import DTYPE, CvaeConfig, CvaeParams, CvaeTrainer, SubstituteConfounder, _seeds, substitute_confounder
from .dataset import SpatialDataset, in_scope_mask, neighborhood_blocks
from .lattice import ROOK, laplacian, n_neighbors, neighbor_offsets, neighbor_stack

log = logging.getLogger(__name__)

LINEAR, SPLINE_PLUS, CONV = "linear", "spline-plus", "conv-encdec"
HEAD_KINDS = (LINEAR, SPLINE_PLUS, CONV)
HEAD_ALIASES = {"splineplus": SPLINE_PLUS, "spline": SPLINE_PLUS, "conv": CONV, "unet": CONV}
CHECKPOINT_FORMAT = "spatial_deconfounder.outcome"
CHECKPOINT_VERSION = 1


class LayoutError(ValueError):
    pass


class OutcomeDivergence(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


def head_kind(name: str) -> str:
    kind = HEAD_ALIASES.get(name, name)
    if kind not in HEAD_KINDS:
        raise ValueError(f"unknown head kind {name!r}; expected one of {HEAD_KINDS}")
    return kind


@dataclass(frozen=True)
class HeadConfig:
    kind: str = LINEAR
    radius: int = 1
    spill_feature: str = "full"
    lam_t: float = 1e-3
    lam_y: float = 1e-3
    n_basis: int = 50
    base_channels: int = 16
    weight_decay: float = 1e-4
    lr: float = 1e-2
    max_epochs: int = 300
    patience: int = 30
    gamma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", head_kind(self.kind))
        if self.spill_feature not in ("full", "mean"):
            raise ValueError("spill_feature must be 'full' or 'mean'")
        if self.lam_t < 0 or self.lam_y < 0:
            raise ValueError("lam_t and lam_y must be nonnegative")
        if self.n_basis < 1:
            raise ValueError("n_basis must be >= 1")
        if self.kind == CONV and self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown head config keys: {sorted(unknown)}")
        return cls(**d)


KEEP, SET0, SET1 = "keep", "set0", "set1"
ALL0, ALL1 = "all0", "all1"


@dataclass(frozen=True)
class Intervention:
    """Override of a site's own treatment and of its neighbors' treatments.

    ``neighbors`` is ``keep``, ``all0``, ``all1`` or a 0/1 vector in canonical
    neighbor order.
    """

    own: str = KEEP
    neighbors: object = KEEP

    def __post_init__(self):
        if self.own not in (KEEP, SET0, SET1):
            raise ValueError(f"own must be keep/set0/set1, got {self.own!r}")
        if isinstance(self.neighbors, str):
            if self.neighbors not in (KEEP, ALL0, ALL1):
                raise ValueError(f"neighbors must be keep/all0/all1 or a vector, got {self.neighbors!r}")
        else:
            vec = np.asarray(self.neighbors, dtype=float).ravel()
            object.__setattr__(self, "neighbors", tuple(vec.tolist()))

    def check_radius(self, radius: int) -> None:
        if not isinstance(self.neighbors, str) and len(self.neighbors) != n_neighbors(radius):
            raise ValueError(f"custom neighbor vector has length {len(self.neighbors)}, "
                             f"expected {n_neighbors(radius)} for radius {radius}")

    def apply(self, a_s: np.ndarray, a_n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a_s = np.asarray(a_s, dtype=float).copy()
        a_n = np.asarray(a_n, dtype=float).copy()
        if self.own == SET0:
            a_s[:] = 0.0
        elif self.own == SET1:
            a_s[:] = 1.0
        if self.neighbors == ALL0:
            a_n[:] = 0.0
        elif self.neighbors == ALL1:
            a_n[:] = 1.0
        elif not isinstance(self.neighbors, str):
            a_n[:] = np.asarray(self.neighbors)[None, :]
        return a_s, a_n

    def describe(self) -> str:
        nb = self.neighbors if isinstance(self.neighbors, str) else "custom"
        return f"own={self.own},neighbors={nb}"


OBSERVED = Intervention()


@dataclass(frozen=True)
class FeatureLayout:
    """Column layout ``[a_s, a_N, x_s, x_N, zhat]`` of a tabular head."""

    radius: int
    d_x: int
    d_z: int
    spill_feature: str = "full"

    @property
    def n_spill(self) -> int:
        if self.radius == 0:
            return 0
        return 1 if self.spill_feature == "mean" else n_neighbors(self.radius)

    def names(self) -> list[str]:
        K = n_neighbors(self.radius) if self.radius else 0
        offs = neighbor_offsets(self.radius) if self.radius else []
        out = ["a_s"]
        if self.spill_feature == "mean" and K:
            out.append("a_N_mean")
        else:
            out += [f"a_N[{di},{dj}]" for di, dj in offs]
        out += [f"x_s[{k}]" for k in range(self.d_x)]
        out += [f"x_N[{di},{dj}][{k}]" for di, dj in offs for k in range(self.d_x)]
        out += [f"zhat[{k}]" for k in range(self.d_z)]
        return out

    @property
    def width(self) -> int:
        return len(self.names())

    def spill_slice(self) -> slice:
        return slice(1, 1 + self.n_spill)


def _zhat_rows(zhat: SubstituteConfounder | None, grid, sites: np.ndarray, d_z: int) -> np.ndarray:
    if zhat is None:
        return np.zeros((len(sites), d_z))
    field = zhat.as_field(fill=np.nan).reshape(grid.n_sites, -1)
    rows = field[sites]
    if np.isnan(rows).any():
        raise LayoutError("zhat is undefined at some requested sites")
    return rows


def model_sites(ds: SpatialDataset, radius: int, zhat: SubstituteConfounder | None = None) -> np.ndarray:
    """Linear indices where a head of this radius can be evaluated."""
    mask = in_scope_mask(ds, radius).ravel()
    if zhat is not None:
        zmask = np.zeros(ds.grid.n_sites, dtype=bool)
        zmask[zhat.sites] = True
        mask &= zmask
    return np.flatnonzero(mask)


def featurize(ds: SpatialDataset, zhat: SubstituteConfounder | None, radius: int,
              intervention: Intervention = OBSERVED, sites=None, layout: FeatureLayout | None = None,
              spill_feature: str = "full") -> tuple[np.ndarray, FeatureLayout]:
    """Tabular features ``[a_s, a_N, x_s, x_N, zhat]`` at ``sites``.

    Passing ``layout`` checks the data against a fitted model's layout.
    """
    d_z = zhat.latent_dim if zhat is not None else 0
    own = FeatureLayout(radius, ds.d_x, d_z, spill_feature if layout is None else layout.spill_feature)
    if layout is not None and own != layout:
        raise LayoutError(f"feature layout {own} does not match model layout {layout}")
    intervention.check_radius(radius)
    sites = model_sites(ds, radius, zhat) if sites is None else np.asarray(sites, dtype=int)
    a_s, a_n, x_s, x_n = neighborhood_blocks(ds, radius, sites)
    a_s, a_n = intervention.apply(a_s, a_n)
    if own.spill_feature == "mean" and radius:
        a_n = a_n.mean(axis=1, keepdims=True)
    z = _zhat_rows(zhat, ds.grid, sites, d_z)
    return np.column_stack([a_s, a_n, x_s, x_n, z]), own


def raster(ds: SpatialDataset, zhat: SubstituteConfounder | None, d_z: int | None = None) -> np.ndarray:
    """``(1 + d_x + d_Z, ny, nx)`` stack of treatment, covariates and zhat; zero off-scope."""
    A = np.where(ds.validity, ds.treatment, 0).astype(float)
    X = np.where(ds.validity[..., None], ds.covariates, 0.0)
    if zhat is None:
        Z = np.zeros(ds.grid.shape + (d_z or 0,))
    else:
        Z = zhat.as_field(fill=0.0).reshape(ds.grid.shape + (-1,))
    return np.concatenate([A[None], np.moveaxis(X, -1, 0), np.moveaxis(Z, -1, 0)], axis=0)


def intervene_raster(base: np.ndarray, grid, site: int, radius: int, intervention: Intervention) -> np.ndarray:
    """Copy of ``base`` with the intervention applied around one site."""
    out = base.copy()
    j, i = divmod(int(site), grid.nx)
    if intervention.own == SET0:
        out[0, j, i] = 0.0
    elif intervention.own == SET1:
        out[0, j, i] = 1.0
    if intervention.neighbors != KEEP:
        if isinstance(intervention.neighbors, str):
            vals = np.full(n_neighbors(radius), 1.0 if intervention.neighbors == ALL1 else 0.0)
        else:
            vals = np.asarray(intervention.neighbors)
        for (di, dj), v in zip(neighbor_offsets(radius), vals):
            if 0 <= i + di < grid.nx and 0 <= j + dj < grid.ny:
                out[0, j + dj, i + di] = v
    return out


@dataclass(eq=False)
class OutcomeModel:
    """A fitted head.  ``arrays`` hold the fitted numbers; ``net`` the CNN, if any."""

    kind: str
    config: HeadConfig
    layout: FeatureLayout
    arrays: dict = field(default_factory=dict)
    names: tuple = ()
    net: nn.Module | None = None
    history: dict = field(default_factory=dict)

    @property
    def coef(self) -> dict[str, float]:
        if self.kind == CONV:
            raise TypeError("conv-encdec heads have no coefficient table")
        return dict(zip(self.names, self.arrays["coef"].tolist()))


# ---------------------------------------------------------------------------
# linear head


def _lstsq(F: np.ndarray, y: np.ndarray) -> np.ndarray:
    coef, *_ = np.linalg.lstsq(F, y, rcond=None)
    return coef


def _fit_linear(cfg: HeadConfig, ds, zhat, sites) -> OutcomeModel:
    F, layout = featurize(ds, zhat, cfg.radius, sites=sites, spill_feature=cfg.spill_feature)
    y = ds.outcome.ravel()[sites]
    coef = _lstsq(np.column_stack([np.ones(len(sites)), F]), y)
    return OutcomeModel(LINEAR, cfg, layout, {"coef": coef}, tuple(["intercept"] + layout.names()))


def _predict_linear(model: OutcomeModel, F: np.ndarray) -> np.ndarray:
    c = model.arrays["coef"]
    return c[0] + F @ c[1:]


# ---------------------------------------------------------------------------
# spline-plus head


def laplacian_basis(L, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` smallest eigenpairs ``(eigenvalues, eigenvectors)`` of a graph Laplacian."""
    n = L.shape[0]
    k = min(k, n)
    if n <= 4096 or k >= n - 1:
        w, V = linalg.eigh(L.toarray(), subset_by_index=[0, k - 1])
    else:
        w, V = eigsh(sparse.csc_matrix(L), k=k, sigma=-1e-3, which="LM")
        order = np.argsort(w)
        w, V = w[order], V[:, order]
    w = np.clip(w, 0.0, None)
    # Fix the sign of each eigenvector so fits are reproducible across LAPACK builds.
    flip = np.sign(V[np.argmax(np.abs(V), axis=0), np.arange(V.shape[1])])
    return w, V * flip


def _penalized_solve(P: np.ndarray, y: np.ndarray, pen: np.ndarray) -> np.ndarray:
    G = P.T @ P + np.diag(pen)
    rhs = P.T @ y
    try:
        c, low = linalg.cho_factor(G)
        if np.linalg.cond(G) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        return linalg.cho_solve((c, low), rhs)
    except np.linalg.LinAlgError:
        log.warning("singular normal equations; adding a 1e-8 ridge")
        return linalg.solve(G + 1e-8 * np.eye(G.shape[0]), rhs, assume_a="pos")


def spline_plus_fit(ds: SpatialDataset, zhat: SubstituteConfounder | None, lam_t: float, lam_y: float,
                    config: HeadConfig | None = None, sites=None) -> OutcomeModel:
    """Residualized spatial regression with Laplacian smooths.

    Stage 1 smooths the treatment, ``s_t = V theta`` with penalty
    ``lam_t * theta' diag(w) theta`` (``V, w`` the low-frequency Laplacian
    eigenpairs over valid sites), and forms ``A~ = A - s_t``.  Stage 2 regresses
    ``Y`` on ``[A~, A~_N, x_s, x_N, zhat]`` plus a second smooth penalized by
    ``lam_y``.  The constant eigenvector plays the intercept.
    """
    if lam_t < 0 or lam_y < 0:
        raise ValueError("lam_t and lam_y must be nonnegative")
    cfg = replace(config or HeadConfig(kind=SPLINE_PLUS), kind=SPLINE_PLUS, lam_t=lam_t, lam_y=lam_y)
    r = cfg.radius
    sites = model_sites(ds, r, zhat) if sites is None else np.asarray(sites, dtype=int)
    valid = np.flatnonzero(ds.validity.ravel())
    w, V = laplacian_basis(laplacian(ds.grid, ROOK, valid), cfg.n_basis)
    Vfull = np.zeros((ds.grid.n_sites, V.shape[1]))
    Vfull[valid] = V

    a = np.where(ds.validity, ds.treatment, 0).astype(float).ravel()
    Vs = Vfull[sites]
    theta_t = _penalized_solve(Vs, a[sites], lam_t * w)
    s_t = Vfull @ theta_t

    model = OutcomeModel(SPLINE_PLUS, cfg, FeatureLayout(r, ds.d_x, 0 if zhat is None else zhat.latent_dim, cfg.spill_feature))
    model.arrays = {"basis": Vfull, "eigenvalues": w, "s_t": s_t, "theta_t": theta_t}
    F = _spline_design(model, ds, zhat, OBSERVED, sites)
    y = ds.outcome.ravel()[sites]
    n_lin = F.shape[1]
    P = np.column_stack([F, Vs])
    pen = np.concatenate([np.zeros(n_lin), lam_y * w])
    coef = _penalized_solve(P, y, pen)
    model.arrays["coef"] = coef[:n_lin]
    model.arrays["theta_y"] = coef[n_lin:]
    names = model.layout.names()
    names[0] = "a_s_resid"
    model.names = tuple(names)
    return model


def _spline_design(model: OutcomeModel, ds, zhat, intervention, sites) -> np.ndarray:
    F, _ = featurize(ds, zhat, model.layout.radius, intervention, sites, model.layout)
    s_t = model.arrays["s_t"]
    F[:, 0] -= s_t[sites]
    r = model.layout.radius
    if r:
        sN = neighbor_stack(s_t.reshape(ds.grid.shape), r)[np.divmod(sites, ds.grid.nx)]
        if model.layout.spill_feature == "mean":
            sN = sN.mean(axis=1, keepdims=True)
        F[:, model.layout.spill_slice()] -= sN
    return F


def _predict_spline(model: OutcomeModel, ds, zhat, intervention, sites) -> np.ndarray:
    F = _spline_design(model, ds, zhat, intervention, sites)
    return F @ model.arrays["coef"] + model.arrays["basis"][sites] @ model.arrays["theta_y"]


# ---------------------------------------------------------------------------
# conv encoder-decoder head


def _block(c_in: int, c_out: int, dilation: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=dilation, dilation=dilation), nn.ReLU(),
        nn.Conv2d(c_out, c_out, 3, padding=dilation, dilation=dilation), nn.ReLU(),
    )


class EncDecNet(nn.Module):
    """Two-level U-Net-style network with a skip connection.

    The coarse level widens the receptive field with dilation 2 instead of
    pooling, which keeps the map exactly translation equivariant in the interior.
    """

    def __init__(self, c_in: int, base: int):
        super().__init__()
        self.enc1 = _block(c_in, base, 1)
        self.enc2 = _block(base, 2 * base, 2)
        self.dec = _block(3 * base, base, 1)
        self.out = nn.Conv2d(base, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        return self.out(self.dec(torch.cat([e1, e2], dim=1))).squeeze(1)


def _init_conv(net: nn.Module, gen: torch.Generator) -> None:
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = np.sqrt(6.0 / fan_in)
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.zero_()


class _HeadTrainer:
    """Masked squared-error training of a torch head with early stopping on validation MSE."""

    def __init__(self, cfg: HeadConfig, net: nn.Module, y: np.ndarray, train: np.ndarray, val: np.ndarray):
        self.cfg, self.net = cfg, net
        self.train_idx = torch.as_tensor(train, dtype=torch.long)
        self.val_idx = torch.as_tensor(val, dtype=torch.long)
        yt = y[train]
        self.y_mean = float(yt.mean())
        self.y_sd = float(yt.std()) or 1.0
        self.y = torch.as_tensor((np.nan_to_num(y) - self.y_mean) / self.y_sd, dtype=DTYPE)
        self.opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.epoch = 0
        self.best_val, self.best_state, self.bad = np.inf, None, 0
        self.stopped = False
        self.history = {"epoch": [], "train_mse": [], "val_mse": []}

    def loss(self, pred: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        return ((pred[idx] - self.y[idx]) ** 2).mean()

    def step(self, forward, weight: float = 1.0) -> bool:
        if self.stopped:
            return False
        self.opt.zero_grad()
        pred = forward()
        loss = self.loss(pred, self.train_idx)
        if not torch.isfinite(loss):
            raise OutcomeDivergence(f"outcome loss became non-finite at epoch {self.epoch}", self.epoch)
        (weight * loss).backward()
        self.opt.step()
        with torch.no_grad():
            pred = forward()
            v = float(self.loss(pred, self.val_idx)) * self.y_sd ** 2 if len(self.val_idx) else np.nan
        self.history["epoch"].append(self.epoch)
        self.history["train_mse"].append(loss.item() * self.y_sd ** 2)
        self.history["val_mse"].append(v)
        self.epoch += 1
        if np.isfinite(v):
            if v < self.best_val:
                self.best_val, self.bad = v, 0
                self.best_state = copy.deepcopy(self.net.state_dict())
            else:
                self.bad += 1
                self.stopped = self.bad >= self.cfg.patience
        if self.epoch >= self.cfg.max_epochs:
            self.stopped = True
        if self.stopped and self.best_state is not None:
            self.net.load_state_dict(self.best_state)
        return not self.stopped


def _conv_model(cfg: HeadConfig, ds, d_z: int, seed: int) -> tuple[OutcomeModel, EncDecNet]:
    net = EncDecNet(1 + ds.d_x + d_z, cfg.base_channels).to(DTYPE)
    _init_conv(net, torch.Generator().manual_seed(int(seed)))
    layout = FeatureLayout(cfg.radius, ds.d_x, d_z, cfg.spill_feature)
    return OutcomeModel(CONV, cfg, layout, net=net), net


def _fit_conv(cfg: HeadConfig, ds, zhat, train, val, seed) -> OutcomeModel:
    d_z = zhat.latent_dim if zhat is not None else 0
    model, net = _conv_model(cfg, ds, d_z, seed)
    x = torch.as_tensor(raster(ds, zhat, d_z)[None], dtype=DTYPE)
    tr = _HeadTrainer(cfg, net, ds.outcome.ravel(), train, val)
    while tr.step(lambda: net(x).reshape(-1)):
        pass
    model.arrays = {"y_moments": np.array([tr.y_mean, tr.y_sd])}
    model.history = tr.history
    return model


def _predict_conv(model: OutcomeModel, ds, zhat, intervention, sites, chunk: int = 128) -> np.ndarray:
    mean, sd = model.arrays["y_moments"]
    base = raster(ds, zhat, 0 if zhat is None else zhat.latent_dim)
    if base.shape[0] != 1 + model.layout.d_x + model.layout.d_z:
        raise LayoutError("raster channels do not match the fitted conv head")
    net = model.net
    out = np.empty(len(sites))
    with torch.no_grad():
        if intervention.own == KEEP and intervention.neighbors == KEEP:
            pred = net(torch.as_tensor(base[None], dtype=DTYPE))[0].numpy().ravel()
            return mean + sd * pred[sites]
        for start in range(0, len(sites), chunk):
            block = sites[start:start + chunk]
            batch = np.stack([intervene_raster(base, ds.grid, s, model.layout.radius, intervention) for s in block])
            pred = net(torch.as_tensor(batch, dtype=DTYPE)).numpy().reshape(len(block), -1)
            out[start:start + chunk] = pred[np.arange(len(block)), block]
    return mean + sd * out


# ---------------------------------------------------------------------------
# public fitting / prediction


def _split_sites(ds, radius, zhat, split):
    sites = model_sites(ds, radius, zhat)
    if split is None:
        return sites, np.zeros(0, dtype=int)
    tr = np.asarray(split.train).ravel()[sites]
    va = np.asarray(split.validation).ravel()[sites]
    return sites[tr], sites[va]


def fit_outcome(head_config: HeadConfig, ds: SpatialDataset, zhat: SubstituteConfounder | None,
                split=None, seed: int = 0) -> OutcomeModel:
    """Fit a head by squared error on the split's train sites.

    ``split=None`` fits on every site where the head is defined (the refit-on-all
    mode).  Pass ``zhat=None`` for the no-deconfounder ablation.
    """
    cfg = head_config
    train, val = _split_sites(ds, cfg.radius, zhat, split)
    if train.size == 0:
        raise ValueError("no training sites for the outcome head")
    if cfg.kind == LINEAR:
        model = _fit_linear(cfg, ds, zhat, train)
    elif cfg.kind == SPLINE_PLUS:
        model = spline_plus_fit(ds, zhat, cfg.lam_t, cfg.lam_y, cfg, train)
    else:
        model = _fit_conv(cfg, ds, zhat, train, val, seed)
    if val.size:
        yv = ds.outcome.ravel()[val]
        model.history["val_mse_final"] = float(np.mean((predict_sites(model, ds, zhat, OBSERVED, val) - yv) ** 2))
    return model


def predict_sites(model: OutcomeModel, ds: SpatialDataset, zhat, intervention: Intervention, sites) -> np.ndarray:
    sites = np.asarray(sites, dtype=int)
    intervention.check_radius(model.layout.radius)
    if model.kind == LINEAR:
        F, _ = featurize(ds, zhat, model.layout.radius, intervention, sites, model.layout)
        return _predict_linear(model, F)
    if model.kind == SPLINE_PLUS:
        return _predict_spline(model, ds, zhat, intervention, sites)
    return _predict_conv(model, ds, zhat, intervention, sites)


def predict(model: OutcomeModel, ds: SpatialDataset, zhat, intervention: Intervention = OBSERVED,
            sites=None) -> np.ndarray:
    """Predicted outcome field ``(ny, nx)``; NaN where the head is undefined."""
    sites = model_sites(ds, model.layout.radius, zhat) if sites is None else np.asarray(sites, dtype=int)
    out = np.full(ds.grid.n_sites, np.nan)
    out[sites] = predict_sites(model, ds, zhat, intervention, sites)
    return out.reshape(ds.grid.shape)


def validation_mse(model: OutcomeModel, ds: SpatialDataset, zhat, split) -> float:
    _, val = _split_sites(ds, model.layout.radius, zhat, split)
    if val.size == 0:
        raise ValueError("split has no validation sites")
    pred = predict_sites(model, ds, zhat, OBSERVED, val)
    return float(np.mean((pred - ds.outcome.ravel()[val]) ** 2))


# ---------------------------------------------------------------------------
# end-to-end variant


class _LinearNet(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.lin = nn.Linear(width, 1)

    def forward(self, F: torch.Tensor) -> torch.Tensor:
        return self.lin(F).squeeze(1)


class EndToEnd:
    """Joint optimization of ``L_A + gamma * L_Y`` with ``L_Y`` blind to the CVAE.

    Each epoch takes one CVAE step (own optimizer, own noise stream) and then one
    head step on a detached snapshot of the posterior mean.  ``L_Y`` therefore has
    no path back to the encoder.
    """

    def __init__(self, cvae_config: CvaeConfig, head_config: HeadConfig, gamma: float,
                 ds: SpatialDataset, split, seed: int = 0):
        if gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if head_config.kind == SPLINE_PLUS:
            raise ValueError("end-to-end training supports the linear and conv-encdec heads")
        self.gamma, self.ds, self.split, self.seed = float(gamma), ds, split, seed
        self.head_config = replace(head_config, gamma=float(gamma))
        self.cvae = CvaeTrainer(cvae_config, ds, split, seed)
        r = head_config.radius
        self.sites = model_sites(ds, max(r, cvae_config.radius))
        self.train, self.val = _split_sites(ds, r, None, split)
        keep = np.isin(self.train, self.sites)
        self.train = self.train[keep]
        self.val = self.val[np.isin(self.val, self.sites)]
        head_seed = _seeds(seed, 3)[2]
        d_z = cvae_config.latent_dim
        if head_config.kind == CONV:
            self.model, self.net = _conv_model(self.head_config, ds, d_z, head_seed)
        else:
            layout = FeatureLayout(r, ds.d_x, d_z, head_config.spill_feature)
            self.net = _LinearNet(layout.width).to(DTYPE)
            _init_conv(self.net, torch.Generator().manual_seed(head_seed))
            self.model = OutcomeModel(LINEAR, self.head_config, layout, names=tuple(["intercept"] + layout.names()))
        self.head = _HeadTrainer(self.head_config, self.net, ds.outcome.ravel(), self.train, self.val)

    def snapshot(self) -> SubstituteConfounder:
        """Posterior mean as a constant (no autograd history)."""
        return substitute_confounder(self.cvae.params, self.ds, self.sites)

    def _forward(self, zhat: SubstituteConfounder):
        ds = self.ds
        if self.model.kind == CONV:
            x = torch.as_tensor(raster(ds, zhat)[None], dtype=DTYPE)
            return lambda: self.net(x).reshape(-1)
        F, _ = featurize(ds, zhat, self.model.layout.radius, OBSERVED, self.sites, self.model.layout)
        Ft = torch.as_tensor(F, dtype=DTYPE)
        idx = torch.as_tensor(self.sites, dtype=torch.long)

        def fwd():
            out = torch.zeros(ds.grid.n_sites, dtype=DTYPE)
            return out.index_put((idx,), self.net(Ft))
        return fwd

    def outcome_loss(self, zhat: SubstituteConfounder) -> torch.Tensor:
        """``gamma * L_Y`` on train sites for a given (constant) zhat."""
        return self.gamma * self.head.loss(self._forward(zhat)(), self.head.train_idx)

    def step(self) -> bool:
        cvae_running = self.cvae.step()
        head_running = False
        if self.gamma > 0:
            head_running = self.head.step(self._forward(self.snapshot()), self.gamma)
        return cvae_running or head_running

    def run(self) -> tuple[CvaeParams, OutcomeModel]:
        while self.step():
            pass
        zhat = self.snapshot()
        if self.gamma == 0:
            # Nothing trained the head; fall back to a two-stage fit on the final zhat.
            model = fit_outcome(self.head_config, self.ds, zhat, self.split, self.seed)
        else:
            model = self.model
            if model.kind == CONV:
                model.arrays = {"y_moments": np.array([self.head.y_mean, self.head.y_sd])}
            else:
                w = self.net.lin.weight.detach().numpy().ravel()
                b = float(self.net.lin.bias.detach())
                model.arrays = {"coef": np.concatenate([[self.head.y_mean + self.head.y_sd * b], self.head.y_sd * w])}
                model.net = None
            model.history = dict(self.head.history)
        model.history["cvae"] = self.cvae.history
        return self.cvae.params, model


def fit_end_to_end(cvae_config: CvaeConfig, head_config: HeadConfig, gamma: float, ds: SpatialDataset,
                   split, seed: int = 0) -> tuple[CvaeParams, OutcomeModel]:
    return EndToEnd(cvae_config, head_config, gamma, ds, split, seed).run()


# ---------------------------------------------------------------------------
# persistence


def save_coefficients(model: OutcomeModel, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term", "estimate"])
        for name, value in model.coef.items():
            w.writerow([name, repr(float(value))])
    return path


def save_outcome(model: OutcomeModel, path) -> Path:
    arrays = {f"a.{k}": v for k, v in model.arrays.items()}
    if model.net is not None:
        arrays.update({f"net.{k}": v.detach().numpy() for k, v in model.net.state_dict().items()})
    payload = {"kind": model.kind, "config": model.config.to_dict(), "names": list(model.names),
               "layout": asdict(model.layout)}
    return write_checkpoint(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, payload, arrays)


def load_outcome(path) -> OutcomeModel:
    doc, arrays = read_checkpoint(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
    cfg = HeadConfig.from_dict(doc["config"])
    layout = FeatureLayout(**doc["layout"])
    model = OutcomeModel(doc["kind"], cfg, layout, names=tuple(doc["names"]))
    model.arrays = {k[2:]: v for k, v in arrays.items() if k.startswith("a.")}
    if model.kind == CONV:
        net = EncDecNet(1 + layout.d_x + layout.d_z, cfg.base_channels).to(DTYPE)
        net.load_state_dict({k[4:]: torch.as_tensor(v, dtype=DTYPE) for k, v in arrays.items() if k.startswith("net.")})
        model.net = net
    return model
