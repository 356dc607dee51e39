"""Stage 1: interference-aware CVAE reconstructing a substitute confounder.

The encoder maps ``[A_s, A_N, X_s, X_N]`` to a diagonal Gaussian over ``Z_s``;
the decoder models ``A_s`` from ``[X_s, X_N, Z_s]`` only.  Nothing in this module
reads the outcome.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from scipy import sparse
from torch import nn

from . import gmrf
from .checkpoint import read_checkpoint, write_checkpoint
from .dataset import SpatialDataset, in_scope_mask, neighborhood_blocks
from .lattice import GridShape, ROOK, laplacian, n_neighbors

log = logging.getLogger(__name__)

DTYPE = torch.float64
LOGVAR_MIN, LOGVAR_MAX = float(np.log(1e-6)), float(np.log(1e6))
CHECKPOINT_FORMAT = "spatial_deconfounder.cvae"
CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class CvaeConfig:
    latent_dim: int = 1
    radius: int = 1
    hidden: tuple = (64, 64)
    decoder_hidden: tuple | None = None
    beta_max: float = 1.0
    warmup_epochs: int | None = None
    prior_mode: str = gmrf.GMRF_KL
    tau: float = 1.0
    eps: float = 1e-2
    penalty_weight: float = 1.0
    prior_adjacency: str = ROOK
    weight_decay: float = 1e-4
    lr: float = 1e-3
    max_epochs: int = 400
    patience: int = 50

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if not self.beta_max > 0:
            raise ValueError("beta_max must be positive")
        if self.prior_mode not in gmrf.PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {gmrf.PRIOR_MODES}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.decoder_hidden is not None:
            object.__setattr__(self, "decoder_hidden", tuple(int(h) for h in self.decoder_hidden))

    @property
    def warmup(self) -> int:
        if self.warmup_epochs is not None:
            return max(1, int(self.warmup_epochs))
        return max(1, self.max_epochs // 5)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["decoder_hidden"] = None if self.decoder_hidden is None else list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CvaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown CVAE config keys: {sorted(unknown)}")
        return cls(**d)


def _mlp(sizes: list[int]) -> nn.Sequential:
    layers = []
    for k in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[k], sizes[k + 1]))
        if k < len(sizes) - 2:
            layers.append(nn.Tanh())
    return nn.Sequential(*layers)


class CvaeNet(nn.Module):
    def __init__(self, enc_in: int, dec_in: int, config: CvaeConfig):
        super().__init__()
        hidden = list(config.hidden)
        dec_hidden = list(config.hidden if config.decoder_hidden is None else config.decoder_hidden)
        d_z = config.latent_dim
        self.trunk = _mlp([enc_in] + hidden) if hidden else nn.Identity()
        self.act = nn.Tanh() if hidden else nn.Identity()
        width = hidden[-1] if hidden else enc_in
        self.mu = nn.Linear(width, d_z)
        self.logvar = nn.Linear(width, d_z)
        self.decoder = _mlp([dec_in + d_z] + dec_hidden + [1])

    def encode(self, enc_in: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.act(self.trunk(enc_in))
        logvar = self.logvar(h).clamp(LOGVAR_MIN, LOGVAR_MAX)
        return self.mu(h), torch.exp(logvar)

    def decode(self, dec_in: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(torch.cat([dec_in, z], dim=1)).squeeze(1)


def _init_net(net: nn.Module, generator: torch.Generator) -> None:
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / np.sqrt(m.in_features)
                m.weight.uniform_(-bound, bound, generator=generator)
                m.bias.uniform_(-bound, bound, generator=generator)


@dataclass(eq=False)
class CvaeParams:
    """Encoder and decoder weights with the config they were built from."""

    config: CvaeConfig
    d_x: int
    net: CvaeNet

    @classmethod
    def initialize(cls, config: CvaeConfig, d_x: int, seed: int = 0) -> "CvaeParams":
        K = n_neighbors(config.radius)
        net = CvaeNet(1 + K + d_x * (K + 1), d_x * (K + 1), config).to(DTYPE)
        _init_net(net, torch.Generator().manual_seed(int(seed)))
        return cls(config, d_x, net)

    @classmethod
    def zeros(cls, config: CvaeConfig, d_x: int) -> "CvaeParams":
        p = cls.initialize(config, d_x)
        with torch.no_grad():
            for t in p.net.parameters():
                t.zero_()
        return p

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    def copy(self) -> "CvaeParams":
        return CvaeParams(self.config, self.d_x, copy.deepcopy(self.net))


@dataclass(frozen=True)
class PosteriorField:
    """Per-site diagonal Gaussian posterior at ``sites`` (linear indices)."""

    grid: GridShape
    sites: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray

    def as_field(self, values: np.ndarray | None = None, fill: float = 0.0) -> np.ndarray:
        values = self.mu if values is None else values
        return scatter(self.grid, self.sites, values, fill)


@dataclass(frozen=True)
class SubstituteConfounder:
    grid: GridShape
    sites: np.ndarray
    zhat: np.ndarray

    @property
    def latent_dim(self) -> int:
        return self.zhat.shape[1]

    def as_field(self, fill: float = 0.0) -> np.ndarray:
        return scatter(self.grid, self.sites, self.zhat, fill)

    @classmethod
    def zeros(cls, grid: GridShape, sites: np.ndarray, latent_dim: int = 1) -> "SubstituteConfounder":
        return cls(grid, np.asarray(sites), np.zeros((len(sites), latent_dim)))


def scatter(grid: GridShape, sites: np.ndarray, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Place per-site rows at their grid positions; other cells get ``fill``."""
    values = np.asarray(values)
    out = np.full((grid.n_sites,) + values.shape[1:], fill, dtype=float)
    out[np.asarray(sites, dtype=int)] = values
    return out.reshape(grid.shape + values.shape[1:])


def default_sites(ds: SpatialDataset, radius: int) -> np.ndarray:
    return np.flatnonzero(in_scope_mask(ds, radius).ravel())


@dataclass(frozen=True)
class CvaeInputs:
    """Tensors for a fixed set of sites."""

    sites: np.ndarray
    enc_in: torch.Tensor
    dec_in: torch.Tensor
    target: torch.Tensor

    @classmethod
    def build(cls, ds: SpatialDataset, radius: int, sites=None, treatment=None) -> "CvaeInputs":
        sites = default_sites(ds, radius) if sites is None else np.asarray(sites, dtype=int)
        a_s, a_n, x_s, x_n = neighborhood_blocks(ds, radius, sites, treatment)
        enc = np.concatenate([a_s[:, None], a_n, x_s, x_n], axis=1)
        dec = np.concatenate([x_s, x_n], axis=1)
        return cls(sites, torch.as_tensor(enc, dtype=DTYPE), torch.as_tensor(dec, dtype=DTYPE),
                   torch.as_tensor(a_s, dtype=DTYPE))


def _check_sites(ds: SpatialDataset, radius: int, sites: np.ndarray) -> None:
    ok = in_scope_mask(ds, radius).ravel()[sites]
    if not ok.all():
        raise ValueError(f"{int((~ok).sum())} sites lack complete radius-{radius} neighborhoods")


def encode(params: CvaeParams, ds: SpatialDataset, sites=None) -> PosteriorField:
    inputs = CvaeInputs.build(ds, params.config.radius, sites)
    with torch.no_grad():
        mu, s2 = params.net.encode(inputs.enc_in)
    mu, s2 = mu.numpy(), s2.numpy()
    if not (np.isfinite(mu).all() and np.isfinite(s2).all()):
        raise TrainingDivergence("encoder produced non-finite activations", -1)
    return PosteriorField(ds.grid, inputs.sites, mu, s2)


def decode_logit(params: CvaeParams, ds: SpatialDataset, z, sites=None) -> np.ndarray:
    """Bernoulli logit of ``A_s`` given covariates and ``z`` (shape ``(n, d_Z)``)."""
    inputs = CvaeInputs.build(ds, params.config.radius, sites)
    z = torch.as_tensor(np.asarray(z, dtype=float).reshape(len(inputs.sites), -1), dtype=DTYPE)
    with torch.no_grad():
        return params.net.decode(inputs.dec_in, z).numpy()


def substitute_confounder(params: CvaeParams, ds: SpatialDataset, sites=None) -> SubstituteConfounder:
    post = encode(params, ds, sites)
    return SubstituteConfounder(ds.grid, post.sites, post.mu)


def posterior_draws(params: CvaeParams, ds: SpatialDataset, M: int, seed, sites=None) -> np.ndarray:
    """``M`` reparameterized latent fields, shape ``(M, n_sites, d_Z)``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    post = encode(params, ds, sites)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((int(M),) + post.mu.shape)
    return post.mu[None] + np.sqrt(post.sigma2)[None] * w


def _torch_sparse(Q) -> torch.Tensor:
    coo = sparse.coo_matrix(Q)
    idx = torch.as_tensor(np.vstack([coo.row, coo.col]), dtype=torch.long)
    return torch.sparse_coo_tensor(idx, torch.as_tensor(coo.data, dtype=DTYPE), coo.shape,
                                   check_invariants=False).coalesce()


class PriorTerm:
    """Prior regularizer in either mode, bound to one set of sites."""

    def __init__(self, mode: str, L, tau: float = 1.0, eps: float = 1e-2):
        self.mode = mode
        self.L = sparse.csr_matrix(L, dtype=float)
        if mode == gmrf.GMRF_KL:
            self.prior = gmrf.build_prior(self.L, tau, eps)
            self._Q = _torch_sparse(self.prior.Q)
            self._qdiag = torch.as_tensor(self.prior.Q.diagonal(), dtype=DTYPE)
        elif mode == gmrf.LAPLACIAN_PENALTY:
            self.prior = None
            self._Q = _torch_sparse(self.L)
        else:
            raise ValueError(f"unknown prior mode {mode!r}")

    @property
    def n(self) -> int:
        return self._Q.shape[0]

    def __call__(self, mu: torch.Tensor, sigma2: torch.Tensor) -> torch.Tensor:
        Qmu = torch.sparse.mm(self._Q, mu)
        quad = (mu * Qmu).sum()
        if self.mode == gmrf.LAPLACIAN_PENALTY:
            return quad
        n, d = mu.shape
        trace = (self._qdiag[:, None] * sigma2).sum()
        return 0.5 * (trace + quad - n * d - d * self.prior.logdet - torch.log(sigma2).sum())


def prior_term_for(config: CvaeConfig, grid: GridShape, sites: np.ndarray) -> PriorTerm:
    L = laplacian(grid, config.prior_adjacency, sites)
    return PriorTerm(config.prior_mode, L, config.tau, config.eps)


def _as_prior_term(prior) -> PriorTerm:
    if isinstance(prior, PriorTerm):
        return prior
    if isinstance(prior, gmrf.GmrfPrior):
        term = PriorTerm.__new__(PriorTerm)
        term.mode, term.L, term.prior = gmrf.GMRF_KL, None, prior
        term._Q = _torch_sparse(prior.Q)
        term._qdiag = torch.as_tensor(prior.Q.diagonal(), dtype=DTYPE)
        return term
    return PriorTerm(gmrf.LAPLACIAN_PENALTY, prior)


def elbo_terms(net: CvaeNet, inputs: CvaeInputs, prior: PriorTerm, noise: torch.Tensor):
    """Summed reconstruction NLL and prior term for one reparameterized draw."""
    mu, sigma2 = net.encode(inputs.enc_in)
    z = mu + torch.sqrt(sigma2) * noise
    logits = net.decode(inputs.dec_in, z)
    recon = nn.functional.binary_cross_entropy_with_logits(logits, inputs.target, reduction="sum")
    return recon, prior(mu, sigma2)


def elbo_loss(params: CvaeParams, ds: SpatialDataset, prior, beta: float, sample_seed: int, sites=None) -> torch.Tensor:
    """Per-site negative ELBO: ``(NLL + beta * prior_term) / n``.

    ``prior`` is a :class:`~spatial_deconfounder.gmrf.GmrfPrior` (KL mode) or a
    Laplacian matrix (penalty mode, ``beta`` then plays the penalty weight), sized
    to the chosen sites.  Returns a differentiable scalar tensor.
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    inputs = CvaeInputs.build(ds, params.config.radius, sites)
    term = _as_prior_term(prior)
    if term.n != len(inputs.sites):
        raise ValueError(f"prior has {term.n} sites, loss uses {len(inputs.sites)}")
    g = torch.Generator().manual_seed(int(sample_seed))
    noise = torch.randn(len(inputs.sites), params.config.latent_dim, generator=g, dtype=DTYPE)
    recon, reg = elbo_terms(params.net, inputs, term, noise)
    return (recon + beta * reg) / len(inputs.sites)


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(int(seed)).spawn(n)]


class CvaeTrainer:
    """One full-batch optimizer step per epoch, with linear KL warm-up and early stopping.

    Exposed as a stepper so the end-to-end variant can interleave outcome-head
    updates without touching the CVAE's optimizer state or random stream.
    """

    def __init__(self, config: CvaeConfig, ds: SpatialDataset, split, seed: int = 0):
        self.config = config
        r = config.radius
        train = np.flatnonzero(np.asarray(split.train).ravel())
        val = np.flatnonzero(np.asarray(split.validation).ravel())
        _check_sites(ds, r, train)
        _check_sites(ds, r, val)
        if train.size == 0:
            raise ValueError("split has no training sites")
        init_seed, noise_seed = _seeds(seed, 2)
        self.params = CvaeParams.initialize(config, ds.d_x, init_seed)
        self.train_inputs = CvaeInputs.build(ds, r, train)
        self.val_inputs = CvaeInputs.build(ds, r, val) if val.size else None
        self.prior = prior_term_for(config, ds.grid, train)
        self.weight = config.beta_max if config.prior_mode == gmrf.GMRF_KL else config.penalty_weight
        self.opt = torch.optim.AdamW(self.params.net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.noise_gen = torch.Generator().manual_seed(noise_seed)
        self.epoch = 0
        self.best_val = np.inf
        self.best_state = None
        self.bad_epochs = 0
        self.stopped = False
        self.history: dict[str, list] = {k: [] for k in ("epoch", "beta", "loss", "recon", "prior", "val_nll")}

    def beta(self, epoch: int) -> float:
        return self.weight * min(1.0, epoch / self.config.warmup)

    def val_nll(self) -> float:
        if self.val_inputs is None:
            return float("nan")
        with torch.no_grad():
            mu, _ = self.params.net.encode(self.val_inputs.enc_in)
            logits = self.params.net.decode(self.val_inputs.dec_in, mu)
            return float(nn.functional.binary_cross_entropy_with_logits(logits, self.val_inputs.target))

    def step(self) -> bool:
        """Run one epoch; returns False once training has stopped."""
        if self.stopped:
            return False
        cfg, e = self.config, self.epoch
        beta = self.beta(e)
        n = len(self.train_inputs.sites)
        noise = torch.randn(n, cfg.latent_dim, generator=self.noise_gen, dtype=DTYPE)
        self.opt.zero_grad()
        recon, reg = elbo_terms(self.params.net, self.train_inputs, self.prior, noise)
        loss = (recon + beta * reg) / n
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"CVAE loss became non-finite at epoch {e}", e)
        loss.backward()
        self.opt.step()
        v = self.val_nll()
        for k, val in (("epoch", e), ("beta", beta), ("loss", loss.item()), ("recon", recon.item() / n),
                       ("prior", reg.item() / n), ("val_nll", v)):
            self.history[k].append(val)
        self.epoch += 1
        # Early stopping only starts once the KL weight has reached its plateau.
        if e >= cfg.warmup and np.isfinite(v):
            if v < self.best_val:
                self.best_val, self.bad_epochs = v, 0
                self.best_state = copy.deepcopy(self.params.net.state_dict())
            else:
                self.bad_epochs += 1
                if self.bad_epochs >= cfg.patience:
                    self.stopped = True
        if self.epoch >= cfg.max_epochs:
            self.stopped = True
        if self.stopped and self.best_state is not None:
            self.params.net.load_state_dict(self.best_state)
        return not self.stopped


def train_cvae(config: CvaeConfig, ds: SpatialDataset, split, seed: int = 0) -> tuple[CvaeParams, dict]:
    """Fit the CVAE on the split's training sites; deterministic given ``seed``."""
    trainer = CvaeTrainer(config, ds, split, seed)
    while trainer.step():
        pass
    hist = trainer.history
    hist["best_val_nll"] = trainer.best_val
    hist["mean_sigma2"] = float(encode(trainer.params, ds, trainer.train_inputs.sites).sigma2.mean())
    log.info("CVAE stopped after %d epochs (best val NLL %.4f)", trainer.epoch, trainer.best_val)
    return trainer.params, hist


def save_params(params: CvaeParams, path) -> Path:
    """Write a JSON checkpoint; weights are stored as raw little-endian float64."""
    payload = {"config": params.config.to_dict(), "d_x": params.d_x}
    return write_checkpoint(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, payload, params.state())


def load_params(path) -> CvaeParams:
    doc, arrays = read_checkpoint(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
    params = CvaeParams.initialize(CvaeConfig.from_dict(doc["config"]), int(doc["d_x"]))
    params.net.load_state_dict({k: torch.as_tensor(v, dtype=DTYPE) for k, v in arrays.items()})
    return params
