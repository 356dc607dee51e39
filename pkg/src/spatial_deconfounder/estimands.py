"""Plug-in direct and spillover effects, latent-draw uncertainty bands, and the bias metric."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .cvae import SubstituteConfounder
from .dataset import SpatialDataset
from .outcome import (ALL0, ALL1, KEEP, SET0, SET1, Intervention, OutcomeModel, model_sites,
                      predict_sites)

DIRECT, SPILLOVER = "direct", "spillover"


@dataclass(frozen=True)
class EffectEstimate:
    tau_hat: float
    kind: str
    sites: np.ndarray
    treated: str
    control: str
    band: tuple[float, float] | None = None
    level: float | None = None

    def __post_init__(self):
        if self.band is not None:
            lo, hi = self.band
            if not lo <= self.tau_hat <= hi:
                raise ValueError(f"band {self.band} does not contain the estimate {self.tau_hat}")

    @property
    def n_sites(self) -> int:
        return int(len(self.sites))

    def with_band(self, lo: float, hi: float, level: float) -> "EffectEstimate":
        """Attach a band, widened if needed so that it contains ``tau_hat``."""
        lo, hi = min(float(lo), self.tau_hat), max(float(hi), self.tau_hat)
        return replace(self, band=(lo, hi), level=float(level))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "tau_hat": self.tau_hat,
            "band": None if self.band is None else list(self.band),
            "level": self.level,
            "n_sites": self.n_sites,
            "treated": self.treated,
            "control": self.control,
        }


@dataclass(frozen=True)
class BiasReport:
    tau_true: float
    tau_hat: float
    sigma_y: float
    standardized_abs_bias: float

    @classmethod
    def compute(cls, tau_hat: float, tau_true: float, sigma_y: float) -> "BiasReport":
        return cls(float(tau_true), float(tau_hat), float(sigma_y), standardized_abs_bias(tau_hat, tau_true, sigma_y))


def standardized_abs_bias(tau_hat: float, tau_true: float, sigma_y: float) -> float:
    if not sigma_y > 0:
        raise ValueError("sigma_y must be positive")
    return abs(float(tau_hat) - float(tau_true)) / float(sigma_y)


def _sites(model: OutcomeModel, ds: SpatialDataset, zhat, sites) -> np.ndarray:
    sites = model_sites(ds, model.layout.radius, zhat) if sites is None else np.asarray(sites, dtype=int)
    if sites.size == 0:
        raise ValueError("no in-scope sites to average over")
    return sites


def site_contrasts(model: OutcomeModel, ds: SpatialDataset, zhat, treated: Intervention,
                   control: Intervention, sites=None) -> np.ndarray:
    """Per-site ``h(treated) - h(control)``."""
    sites = _sites(model, ds, zhat, sites)
    return predict_sites(model, ds, zhat, treated, sites) - predict_sites(model, ds, zhat, control, sites)


def contrast(model: OutcomeModel, ds: SpatialDataset, zhat, treated: Intervention, control: Intervention,
             kind: str, sites=None) -> EffectEstimate:
    sites = _sites(model, ds, zhat, sites)
    diff = site_contrasts(model, ds, zhat, treated, control, sites)
    return EffectEstimate(float(diff.mean()), kind, sites, treated.describe(), control.describe())


def direct_effect(model: OutcomeModel, ds: SpatialDataset, zhat: SubstituteConfounder | None,
                  sites=None) -> EffectEstimate:
    """Average of ``h(1, a_N, ...) - h(0, a_N, ...)`` with neighbors at their observed values."""
    return contrast(model, ds, zhat, Intervention(SET1, KEEP), Intervention(SET0, KEEP), DIRECT, sites)


def spillover_effect(model: OutcomeModel, ds: SpatialDataset, zhat: SubstituteConfounder | None,
                     own_policy: str = KEEP, policy1=ALL1, policy0=ALL0, sites=None) -> EffectEstimate:
    """Average change from switching neighbors from ``policy0`` to ``policy1``, own treatment fixed."""
    return contrast(model, ds, zhat, Intervention(own_policy, policy1), Intervention(own_policy, policy0),
                    SPILLOVER, sites)


def estimate(model, ds, zhat, kind: str = DIRECT, sites=None, **policies) -> EffectEstimate:
    if kind == DIRECT:
        return direct_effect(model, ds, zhat, sites)
    if kind == SPILLOVER:
        return spillover_effect(model, ds, zhat, sites=sites, **policies)
    raise ValueError(f"unknown estimand {kind!r}")


MIN_DRAWS = 20


def uncertainty_band(model_fitter: OutcomeModel | Callable, ds: SpatialDataset,
                     posterior_draws: Sequence[SubstituteConfounder], level: float = 0.95,
                     kind: str = DIRECT, sites=None, **policies) -> tuple[float, float]:
    """Quantile band of the plug-in estimate across latent draws.

    ``model_fitter`` is either a fitted model (each draw replaces zhat at
    prediction time) or a callable ``(ds, zhat) -> OutcomeModel`` that refits
    the head per draw.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if len(posterior_draws) < MIN_DRAWS:
        raise ValueError(f"need at least {MIN_DRAWS} posterior draws, got {len(posterior_draws)}")
    values = []
    for z in posterior_draws:
        model = model_fitter(ds, z) if callable(model_fitter) else model_fitter
        values.append(estimate(model, ds, z, kind, sites, **policies).tau_hat)
    q = (1.0 - level) / 2.0
    lo, hi = np.quantile(np.asarray(values), [q, 1.0 - q])
    return float(lo), float(hi)


def draws_as_confounders(draws: np.ndarray, like: SubstituteConfounder) -> list[SubstituteConfounder]:
    """Wrap ``(M, n, d_Z)`` latent draws as substitute confounders on ``like``'s sites."""
    return [SubstituteConfounder(like.grid, like.sites, d) for d in np.asarray(draws)]
