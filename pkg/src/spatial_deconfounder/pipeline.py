"""One full estimation run on a scenario: split, CVAE, head, estimates, band and check."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

from . import checks, cvae, estimands, outcome
from .datagen import Scenario, outcome_sd, true_effects
from .dataset import OUTCOME_KEY, SpatialDataset, standardize
from .split import SplitParams, spatial_split

log = logging.getLogger(__name__)

# Settings picked on held-out tuning worlds for the synthetic benchmark; see README.
BENCHMARK_CVAE = dict(latent_dim=2, decoder_hidden=(), lr=1e-2, weight_decay=1e-3)


@dataclass(frozen=True)
class EstimandSettings:
    own_policy: str = outcome.KEEP
    policy1: str = outcome.ALL1
    policy0: str = outcome.ALL0
    level: float = 0.95
    n_draws: int = 50
    refit_draws: bool = False
    check_M: int = 100
    check_inner: int = 20


@dataclass(frozen=True)
class PipelineConfig:
    split: SplitParams = SplitParams()
    cvae: cvae.CvaeConfig = cvae.CvaeConfig(**BENCHMARK_CVAE)
    head: outcome.HeadConfig = outcome.HeadConfig(kind=outcome.SPLINE_PLUS)
    estimands: EstimandSettings = EstimandSettings()
    end_to_end: bool = False
    refit_full: bool = True
    ablate: bool = False

    def to_dict(self) -> dict:
        return {
            "split": asdict(self.split),
            "cvae": self.cvae.to_dict(),
            "head": self.head.to_dict(),
            "estimands": asdict(self.estimands),
            "end_to_end": self.end_to_end,
            "refit_full": self.refit_full,
            "ablate": self.ablate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pipeline keys: {sorted(unknown)}")
        base = cls()
        kw = {}
        for key in ("split", "cvae", "head", "estimands"):
            if key in d:
                kw[key] = _override(getattr(base, key), d[key], key)
        for k in ("end_to_end", "refit_full", "ablate"):
            if k in d:
                kw[k] = bool(d[k])
        return cls(**kw)


def _override(default, d: dict, where: str):
    """``default`` with the keys of ``d`` replaced; unknown keys are an error."""
    if not isinstance(d, dict):
        raise ValueError(f"{where} must be a mapping")
    unknown = set(d) - {f.name for f in fields(default)}
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")
    return replace(default, **d)


def model_radius(cfg: PipelineConfig) -> int:
    return max(1, cfg.cvae.radius, cfg.head.radius)


def make_split(ds: SpatialDataset, cfg: PipelineConfig, seed: int):
    params = replace(cfg.split, model_radius=max(cfg.split.model_radius, model_radius(cfg)))
    return spatial_split(ds.grid, ds.validity, params, seed)


def _y_scale(ds: SpatialDataset) -> float:
    return float(ds.moments[OUTCOME_KEY][1]) if OUTCOME_KEY in ds.moments else 1.0


@dataclass
class FitResult:
    dataset: SpatialDataset
    split: object
    params: cvae.CvaeParams
    zhat: cvae.SubstituteConfounder
    head: outcome.OutcomeModel
    history: dict = field(default_factory=dict)


def fit(ds_raw: SpatialDataset, cfg: PipelineConfig, seed: int = 0) -> FitResult:
    """Train stage 1 and stage 2 on the standardized dataset."""
    split_seed, cvae_seed, head_seed = cvae._seeds(seed, 3)
    ds = standardize(ds_raw)
    split = make_split(ds, cfg, split_seed)
    if cfg.end_to_end:
        params, head = outcome.fit_end_to_end(cfg.cvae, cfg.head, cfg.head.gamma, ds, split, cvae_seed)
        history = head.history.get("cvae", {})
        zhat = cvae.substitute_confounder(params, ds)
    else:
        params, history = cvae.train_cvae(cfg.cvae, ds, split, cvae_seed)
        zhat = cvae.substitute_confounder(params, ds)
        head = fit_head(cfg, ds, zhat, split, head_seed)
    return FitResult(ds, split, params, zhat, head, history)


def fit_head(cfg: PipelineConfig, ds, zhat, split, seed):
    # Closed-form heads need no early stopping, so they are refit on every in-scope site.
    full = cfg.refit_full and cfg.head.kind != outcome.CONV
    return outcome.fit_outcome(cfg.head, ds, zhat, None if full else split, seed)


def estimate_all(res: FitResult, cfg: PipelineConfig, seed: int = 0, scenario: Scenario | None = None) -> dict:
    """Effects on the raw outcome scale, bands, predictive check and (with truth) biases."""
    est_cfg = cfg.estimands
    ds, zhat, head = res.dataset, res.zhat, res.head
    scale = _y_scale(ds)
    policies = dict(own_policy=est_cfg.own_policy, policy1=est_cfg.policy1, policy0=est_cfg.policy0)
    sites = outcome.model_sites(ds, head.layout.radius, zhat)
    d = estimands.direct_effect(head, ds, zhat, sites)
    s = estimands.spillover_effect(head, ds, zhat, sites=sites, **policies)
    draw_seed, check_seed = cvae._seeds(seed + 7919, 2)
    out = {"n_sites": int(len(sites))}
    for name, e, kind in (("direct", d, estimands.DIRECT), ("spillover", s, estimands.SPILLOVER)):
        e = estimands.EffectEstimate(e.tau_hat * scale, e.kind, e.sites, e.treated, e.control)
        if est_cfg.n_draws:
            draws = cvae.posterior_draws(res.params, ds, est_cfg.n_draws, draw_seed, zhat.sites)
            zs = estimands.draws_as_confounders(draws, zhat)
            fitter = (lambda d_, z_: fit_head(cfg, d_, z_, res.split, seed)) if est_cfg.refit_draws else head
            lo, hi = estimands.uncertainty_band(fitter, ds, zs, est_cfg.level, kind, sites,
                                                **(policies if kind == estimands.SPILLOVER else {}))
            e = e.with_band(lo * scale, hi * scale, est_cfg.level)
        out[name] = e.to_dict()
    try:
        report = checks.predictive_p_value(res.params, ds, est_cfg.check_M, est_cfg.check_inner, check_seed,
                                           split=res.split)
        out["p_value"] = report.p_value
    except ValueError as exc:
        log.warning("predictive check skipped: %s", exc)
        out["p_value"] = None
    if scenario is not None:
        out.update(bias_fields(scenario, sites, out["direct"]["tau_hat"], out["spillover"]["tau_hat"], policies))
    else:
        out.update({"tau_dir_true": None, "tau_spill_true": None, "sigma_y": None,
                    "bias_dir": None, "bias_spill": None})
    if cfg.ablate:
        out["ablation"] = ablation(res, cfg, seed, scenario, sites, policies)
    return out


def bias_fields(scenario: Scenario, sites, tau_dir_hat: float, tau_spill_hat: float, policies: dict) -> dict:
    t_dir, t_spill = true_effects(scenario, sites, **policies)
    sy = outcome_sd(scenario.dataset, sites)
    return {
        "tau_dir_true": t_dir,
        "tau_spill_true": t_spill,
        "sigma_y": sy,
        "bias_dir": estimands.standardized_abs_bias(tau_dir_hat, t_dir, sy),
        "bias_spill": estimands.standardized_abs_bias(tau_spill_hat, t_spill, sy),
    }


def ablation(res: FitResult, cfg: PipelineConfig, seed: int, scenario, sites, policies) -> dict:
    """Same head with no substitute confounder."""
    ds = res.dataset
    head = fit_head(cfg, ds, None, res.split, cvae._seeds(seed, 3)[2])
    scale = _y_scale(ds)
    d = estimands.direct_effect(head, ds, None, sites).tau_hat * scale
    s = estimands.spillover_effect(head, ds, None, sites=sites, **policies).tau_hat * scale
    out = {"direct": {"tau_hat": d}, "spillover": {"tau_hat": s}}
    if scenario is not None:
        b = bias_fields(scenario, sites, d, s, policies)
        out["bias_dir"], out["bias_spill"] = b["bias_dir"], b["bias_spill"]
    return out


def run(scenario: Scenario, cfg: PipelineConfig, seed: int = 0) -> dict:
    res = fit(scenario.dataset, cfg, seed)
    out = estimate_all(res, cfg, seed, scenario)
    out["cvae_epochs"] = len(res.history.get("epoch", []))
    return out
