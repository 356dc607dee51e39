"""Posterior predictive check of the treatment-assignment model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import expit, log_expit

from .cvae import CvaeInputs, CvaeParams, default_sites, encode
from .dataset import SpatialDataset, in_scope_mask


@dataclass(frozen=True)
class CheckReport:
    p_value: float
    T_observed: float
    T_replicated: np.ndarray = field(repr=False)
    M: int
    inner_draws: int
    n_sites: int

    def to_dict(self) -> dict:
        return {
            "p_value": self.p_value,
            "T_observed": self.T_observed,
            "T_replicated": [float(t) for t in self.T_replicated],
            "M": self.M,
            "inner_draws": self.inner_draws,
            "n_sites": self.n_sites,
        }


def _decode_draws(params: CvaeParams, inputs: CvaeInputs, z: np.ndarray) -> np.ndarray:
    """Logits for a stack of latent draws ``(S, n, d_Z)`` -> ``(S, n)``."""
    S, n, d = z.shape
    dec = inputs.dec_in.repeat(S, 1)
    with torch.no_grad():
        out = params.net.decode(dec, torch.as_tensor(z.reshape(S * n, d)))
    return out.numpy().reshape(S, n)


def _loglik(a: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Bernoulli log-likelihood summed over sites, one value per draw."""
    return (a * log_expit(logits) + (1.0 - a) * log_expit(-logits)).sum(axis=-1)


def _latent_draws(mu: np.ndarray, sigma2: np.ndarray, S: int, rng: np.random.Generator) -> np.ndarray:
    return mu[None] + np.sqrt(sigma2)[None] * rng.standard_normal((S,) + mu.shape)


def _score(params: CvaeParams, ds: SpatialDataset, sites: np.ndarray, noise: np.ndarray, treatment=None) -> float:
    """``T(a)`` for one treatment field using fixed standard-normal ``noise`` of shape ``(S, n, d_Z)``.

    The posterior is the encoder's posterior given the scored field itself, so
    ``T`` is a function of ``a`` through both the likelihood and ``q(Z | a, X)``.
    """
    inputs = CvaeInputs.build(ds, params.config.radius, sites, treatment)
    with torch.no_grad():
        mu, sigma2 = params.net.encode(inputs.enc_in)
    z = mu.numpy()[None] + np.sqrt(sigma2.numpy())[None] * noise
    return float(_loglik(inputs.target.numpy(), _decode_draws(params, inputs, z)).mean())


def _noise(n: int, d: int, inner_draws: int, seed) -> np.ndarray:
    if inner_draws < 1:
        raise ValueError("inner_draws must be >= 1")
    return np.random.default_rng(seed).standard_normal((int(inner_draws), n, d))


def discrepancy(params: CvaeParams, ds: SpatialDataset, inner_draws: int, seed, sites=None,
                treatment=None) -> float:
    """``T(a) = E_q[log p(a | X, Z)]`` by Monte Carlo over ``inner_draws`` posterior samples.

    ``treatment`` is the field ``a`` being scored (default: the observed one);
    the log-likelihood is summed over ``sites``.
    """
    sites = default_sites(ds, params.config.radius) if sites is None else np.asarray(sites, dtype=int)
    noise = _noise(len(sites), params.config.latent_dim, inner_draws, seed)
    return _score(params, ds, sites, noise, treatment)


def tail_fraction(T_observed: float, T_replicated) -> float:
    """Fraction of replicated statistics strictly below the observed one."""
    T_rep = np.asarray(T_replicated, dtype=float)
    if T_rep.size == 0:
        raise ValueError("need at least one replicate")
    return float(np.mean(T_rep < T_observed))


def validation_sites(params: CvaeParams, ds: SpatialDataset, split) -> np.ndarray:
    mask = np.asarray(split.validation, dtype=bool) & in_scope_mask(ds, params.config.radius)
    return np.flatnonzero(mask.ravel())


def predictive_p_value(params: CvaeParams, ds_val: SpatialDataset, M: int = 100, inner_draws: int = 20,
                       seed=0, sites=None, split=None) -> CheckReport:
    """Predictive p-value on held-out sites.

    Each replicate ``a^(m)`` is drawn from the decoder at a fresh draw of ``Z``
    from the posterior given the observed data.  Observed and replicated fields
    are scored with the same standard-normal inner draws, and ``p`` counts
    replicates with ``T`` strictly below the observed value.
    """
    if split is not None:
        sites = validation_sites(params, ds_val, split)
    if sites is not None and len(sites) == 0:
        raise ValueError("predictive check needs a non-empty validation set")
    if M < 1:
        raise ValueError("M must be >= 1")
    post = encode(params, ds_val, sites)
    if len(post.sites) == 0:
        raise ValueError("predictive check needs a non-empty validation set")
    sites = post.sites
    inputs = CvaeInputs.build(ds_val, params.config.radius, sites)
    rep_seed, inner_seed = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(rep_seed)
    noise = _noise(len(sites), params.config.latent_dim, inner_draws, inner_seed)

    T_obs = _score(params, ds_val, sites, noise)
    z_rep = _latent_draws(post.mu, post.sigma2, M, rng)
    p_rep = expit(_decode_draws(params, inputs, z_rep))
    a_rep = (rng.random(p_rep.shape) < p_rep).astype(float)
    base = np.where(ds_val.validity, ds_val.treatment, 0).astype(float).ravel()
    T_rep = np.empty(M)
    for m in range(M):
        field = base.copy()
        field[sites] = a_rep[m]
        T_rep[m] = _score(params, ds_val, sites, noise, field.reshape(ds_val.grid.shape))
    p = tail_fraction(T_obs, T_rep)
    return CheckReport(p, T_obs, T_rep, int(M), int(inner_draws), len(sites))
