"""Semi-synthetic scenarios with known ground truth, and a fully synthetic lattice world.

A scenario freezes an outcome function ``f`` fitted to real (or raw) data, replaces
its residuals by one exogenous CAR draw ``R``, and hides chosen confounders.
Counterfactuals evaluate ``f`` under intervened treatments with every covariate
(hidden included) and ``R`` held fixed, so the true effects are exact averages.
"""
from __future__ import annotations

import json
import logging
import pickle
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.ensemble import GradientBoostingRegressor
from sklearn.linear_model import LinearRegression
from sklearn.neural_network import MLPRegressor
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from . import gmrf
from .dataset import (SpatialDataset, from_arrays, in_scope_mask, load_dataset, mask_covariates,
                      neighborhood_blocks, save_dataset)
from .lattice import QUEEN, GridShape, adjacency_matrix, neighbor_offsets
from .outcome import ALL0, ALL1, KEEP, OBSERVED, SET0, SET1, Intervention
from .split import SplitParams, spatial_split

log = logging.getLogger(__name__)

LOCAL, SPATIAL = "local", "spatial"
REGIMES = (LOCAL, SPATIAL)
MLP, STUMPS, LINEAR = "mlp", "boosted-stumps", "linear"
PREDICTOR_KINDS = (MLP, STUMPS, LINEAR)


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# predictors


def _feature_names(regime: str, r_d: int, names: Sequence[str]) -> list[str]:
    offs = neighbor_offsets(r_d)
    out = ["a_s"] + [f"a_N[{di},{dj}]" for di, dj in offs] + [f"x_s[{n}]" for n in names]
    if regime == SPATIAL:
        out += [f"x_N[{di},{dj}][{n}]" for di, dj in offs for n in names]
    return out


def _design(treatment, covariates, regime: str, r_d: int, sites, intervention: Intervention):
    grid = GridShape(treatment.shape[1], treatment.shape[0])
    stub = _Stub(grid, np.asarray(treatment), np.asarray(covariates, dtype=float))
    a_s, a_n, x_s, x_n = neighborhood_blocks(stub, r_d, sites)
    a_s, a_n = intervention.apply(a_s, a_n)
    cols = [a_s[:, None], a_n, x_s]
    if regime == SPATIAL:
        cols.append(x_n)
    return np.column_stack(cols)


@dataclass(frozen=True)
class _Stub:
    # Minimal stand-in for neighborhood_blocks on arbitrary (possibly hidden) covariates.
    grid: GridShape
    treatment: np.ndarray
    covariates: np.ndarray

    @property
    def validity(self):
        return np.ones(self.grid.shape, dtype=bool)


class FrozenPredictor:
    """A fitted regressor of ``Y`` on neighborhood features; read-only after construction.

    Inputs are ``[a_s, a_N, x_s]`` (local regime) or ``[a_s, a_N, x_s, x_N]``
    (spatial regime) over the named covariate columns.  Windows that leave the
    grid are zero padded, so ``f`` is defined at every valid site.  Site
    coordinates are never inputs.
    """

    def __init__(self, kind: str, regime: str, r_d: int, covariate_names: Sequence[str], estimator):
        self._kind, self._regime, self._r_d = kind, regime, int(r_d)
        self._names = tuple(covariate_names)
        self._estimator = estimator

    kind = property(lambda self: self._kind)
    regime = property(lambda self: self._regime)
    r_d = property(lambda self: self._r_d)
    covariate_names = property(lambda self: self._names)

    @property
    def input_schema(self) -> list[str]:
        return _feature_names(self._regime, self._r_d, self._names)

    def _columns(self, ds: SpatialDataset) -> np.ndarray:
        cov, names = ds.all_covariates()
        missing = [n for n in self._names if n not in names]
        if missing:
            raise ScenarioError(f"dataset lacks predictor inputs {missing}")
        return cov[:, :, [names.index(n) for n in self._names]]

    def evaluate(self, ds: SpatialDataset, sites, intervention: Intervention = OBSERVED, treatment=None) -> np.ndarray:
        intervention.check_radius(self._r_d)
        A = ds.treatment if treatment is None else treatment
        A = np.where(ds.validity, A, 0)
        F = _design(A, self._columns(ds), self._regime, self._r_d, np.asarray(sites, dtype=int), intervention)
        return self._estimator.predict(F)


def _make_estimator(kind: str, seed: int):
    if kind == MLP:
        return make_pipeline(StandardScaler(), MLPRegressor(hidden_layer_sizes=(64, 64), alpha=1e-3,
                                                            max_iter=1000, random_state=seed))
    if kind == STUMPS:
        return GradientBoostingRegressor(max_depth=1, n_estimators=400, learning_rate=0.1, random_state=seed)
    if kind == LINEAR:
        return LinearRegression()
    raise ScenarioError(f"unknown predictor kind {kind!r}; expected one of {PREDICTOR_KINDS}")


def fit_predictor(ds_raw: SpatialDataset, regime: str, r_d: int, kind: str, split, seed: int = 0,
                  covariate_names: Sequence[str] | None = None) -> FrozenPredictor:
    """Fit ``f`` on the split's training sites with every covariate visible."""
    if regime not in REGIMES:
        raise ScenarioError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if r_d < 1:
        raise ScenarioError("r_d must be >= 1")
    _, all_names = ds_raw.all_covariates()
    names = tuple(all_names if covariate_names is None else covariate_names)
    stub = FrozenPredictor(kind, regime, r_d, names, None)
    train = np.flatnonzero((np.asarray(split.train) & in_scope_mask(ds_raw, r_d)).ravel())
    y = ds_raw.outcome.ravel()[train]
    keep = np.isfinite(y)
    train, y = train[keep], y[keep]
    n_feat = len(stub.input_schema)
    if train.size <= n_feat:
        raise ScenarioError(f"underdetermined fit: {train.size} training sites for {n_feat} features")
    A = np.where(ds_raw.validity, ds_raw.treatment, 0)
    F = _design(A, stub._columns(ds_raw), regime, r_d, train, OBSERVED)
    est = _make_estimator(kind, seed).fit(F, y)
    return FrozenPredictor(kind, regime, r_d, names, est)


@dataclass(frozen=True)
class StructuralOutcome:
    """Known outcome function of the synthetic world.

    ``f = b_dir a_s + b_sp sum(a_N) + g(x) + c_y u``, where ``g`` adds ``sin`` of the
    odd-numbered noise columns and centred half-squares of the even-numbered
    ones (column 0, the one correlated with ``u``, is left out).
    """

    b_dir: float
    b_sp: float
    c_y: float
    covariate_names: tuple
    latent_name: str = "U"
    r_d: int = 1

    kind = "structural"
    regime = LOCAL

    @property
    def input_schema(self) -> list[str]:
        return _feature_names(LOCAL, self.r_d, self.covariate_names + (self.latent_name,))

    def g(self, X: np.ndarray) -> np.ndarray:
        out = np.zeros(X.shape[0])
        for k in range(1, X.shape[1]):
            out += np.sin(X[:, k]) if k % 2 else 0.5 * (X[:, k] ** 2 - 1.0)
        return out

    def evaluate(self, ds: SpatialDataset, sites, intervention: Intervention = OBSERVED, treatment=None) -> np.ndarray:
        intervention.check_radius(self.r_d)
        sites = np.asarray(sites, dtype=int)
        A = ds.treatment if treatment is None else treatment
        A = np.where(ds.validity, A, 0)
        cov, names = ds.all_covariates()
        X = cov.reshape(ds.grid.n_sites, -1)[:, [names.index(n) for n in self.covariate_names]][sites]
        u = ds.column(self.latent_name).ravel()[sites]
        stub = _Stub(ds.grid, A, np.zeros(ds.grid.shape + (0,)))
        a_s, a_n, _, _ = neighborhood_blocks(stub, self.r_d, sites)
        a_s, a_n = intervention.apply(a_s, a_n)
        return self.b_dir * a_s + self.b_sp * a_n.sum(axis=1) + self.g(X) + self.c_y * u


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class ScenarioConfig:
    regime: str = SPATIAL
    r_d: int = 1
    predictor: str = MLP
    mask_top_k: int = 1
    mask_names: tuple = ()
    residual_adjacency: str = QUEEN
    literal_car: bool = False
    split_alpha: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ScenarioError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.r_d < 1:
            raise ScenarioError("r_d must be >= 1")
        if self.predictor not in PREDICTOR_KINDS:
            raise ScenarioError(f"unknown predictor kind {self.predictor!r}")
        if self.mask_top_k < 0:
            raise ScenarioError("mask_top_k must be nonnegative")
        object.__setattr__(self, "mask_names", tuple(self.mask_names))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_names"] = list(self.mask_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ScenarioError(f"unknown scenario config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SyntheticWorldConfig:
    nx: int = 32
    ny: int = 32
    d_x: int = 3
    rho: float = 0.99
    c_a: float = 1.0
    c_y: float = 1.0
    b_dir: float = 1.0
    b_sp: float = 0.25
    noise_sd: float = 0.5
    x_u_corr: float = 0.5
    w_x: float = 0.3
    seed: int = 0

    def __post_init__(self):
        vals = (self.rho, self.c_a, self.c_y, self.b_dir, self.b_sp, self.noise_sd, self.x_u_corr, self.w_x)
        if not all(np.isfinite(vals)):
            raise ScenarioError("synthetic world coefficients must be finite")
        if self.d_x < 1:
            raise ScenarioError("d_x must be >= 1")
        if not -1 < self.rho < 1:
            raise ScenarioError("rho must lie in (-1, 1)")
        if not 0 <= abs(self.x_u_corr) <= 1:
            raise ScenarioError("x_u_corr must lie in [-1, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticWorldConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ScenarioError(f"unknown synthetic world keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class Scenario:
    dataset: SpatialDataset
    predictor: object
    residual: np.ndarray
    tau_dir: float
    tau_spill: float
    sigma_y: float
    car: gmrf.CarModel | None = None
    config: object = None
    importances: list = field(default_factory=list)
    raw_residual_var: float | None = None

    @property
    def r_d(self) -> int:
        return self.predictor.r_d

    @property
    def truth_sites(self) -> np.ndarray:
        return np.flatnonzero(in_scope_mask(self.dataset, self.r_d).ravel())

    def f_values(self, intervention: Intervention = OBSERVED, sites=None) -> np.ndarray:
        sites = np.flatnonzero(self.dataset.validity.ravel()) if sites is None else np.asarray(sites, dtype=int)
        return self.predictor.evaluate(self.dataset, sites, intervention)


def _standard_sites(ds: SpatialDataset, r_d: int) -> np.ndarray:
    return np.flatnonzero(in_scope_mask(ds, r_d).ravel())


def counterfactual_outcomes(scenario: Scenario, intervention: Intervention, sites=None,
                            residual: np.ndarray | None = None) -> np.ndarray:
    """Outcome field with ``f`` evaluated under the intervention; NaN off the evaluated sites."""
    ds = scenario.dataset
    sites = np.flatnonzero(ds.validity.ravel()) if sites is None else np.asarray(sites, dtype=int)
    R = scenario.residual if residual is None else residual
    out = np.full(ds.grid.n_sites, np.nan)
    out[sites] = scenario.predictor.evaluate(ds, sites, intervention) + np.asarray(R).ravel()[sites]
    return out.reshape(ds.grid.shape)


def true_effects(scenario: Scenario, sites=None, own_policy: str = KEEP, policy1=ALL1,
                 policy0=ALL0) -> tuple[float, float]:
    """Exact ``(tau_dir, tau_spill)`` averaged over ``sites`` (default: complete ``r_d`` windows)."""
    sites = scenario.truth_sites if sites is None else np.asarray(sites, dtype=int)
    f = scenario.predictor.evaluate
    ds = scenario.dataset
    d = f(ds, sites, Intervention(SET1, KEEP)) - f(ds, sites, Intervention(SET0, KEEP))
    s = f(ds, sites, Intervention(own_policy, policy1)) - f(ds, sites, Intervention(own_policy, policy0))
    return float(d.mean()), float(s.mean())


def outcome_sd(ds: SpatialDataset, sites) -> float:
    return float(np.std(ds.outcome.ravel()[np.asarray(sites, dtype=int)]))


def _drop_column(ds: SpatialDataset, name: str) -> SpatialDataset:
    k = ds.covariate_names.index(name)
    keep = [i for i in range(ds.d_x) if i != k]
    return replace(ds, covariates=ds.covariates[:, :, keep],
                   covariate_names=tuple(ds.covariate_names[i] for i in keep))


def rank_confounders(ds_raw: SpatialDataset, f_fitter: Callable, split) -> list[tuple[str, float]]:
    """Drop-column importance: validation MSE without a column minus MSE with all of them.

    ``f_fitter(ds, split)`` must return an object with ``evaluate(ds, sites)`` and
    an ``r_d`` attribute.  Sorted by importance (descending), ties by name.
    """
    if ds_raw.d_x < 2:
        raise ScenarioError("ranking confounders needs at least two covariates")

    def val_mse(ds):
        f = f_fitter(ds, split)
        val = np.flatnonzero((np.asarray(split.validation) & in_scope_mask(ds, f.r_d)).ravel())
        if val.size == 0:
            raise ScenarioError("split has no validation sites to score importance")
        return float(np.mean((f.evaluate(ds, val) - ds.outcome.ravel()[val]) ** 2))

    base = val_mse(ds_raw)
    imp = [(name, val_mse(_drop_column(ds_raw, name)) - base) for name in ds_raw.covariate_names]
    return sorted(imp, key=lambda t: (-t[1], t[0]))


def _seed_streams(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def make_scenario(ds_raw: SpatialDataset, config: ScenarioConfig) -> Scenario:
    """Fit ``f``, model its residuals with a CAR field, and freeze one exogenous draw."""
    if ds_raw.hidden_names:
        raise ScenarioError("the raw dataset must have every covariate visible")
    split_seed, fit_seed, resid_seed = _seed_streams(config.seed, 3)
    split = spatial_split(ds_raw.grid, ds_raw.validity,
                          SplitParams(alpha=config.split_alpha, model_radius=config.r_d), split_seed)

    def fitter(ds, spl):
        return fit_predictor(ds, config.regime, config.r_d, config.predictor, spl, fit_seed)

    f = fitter(ds_raw, split)
    valid = np.flatnonzero(ds_raw.validity.ravel())
    complete = _standard_sites(ds_raw, config.r_d)
    y = ds_raw.outcome.ravel()
    resid_sites = complete[np.isfinite(y[complete])]
    r_hat = y[resid_sites] - f.evaluate(ds_raw, resid_sites)
    car_fit = gmrf.fit_car(r_hat, adjacency_matrix(ds_raw.grid, config.residual_adjacency, resid_sites),
                           config.literal_car)
    # Sampling happens on every valid site, so recalibrate lambda on that graph.
    adj_valid = adjacency_matrix(ds_raw.grid, config.residual_adjacency, valid)
    raw_var = float(np.var(r_hat))
    lam = gmrf.calibrate_lambda(adj_valid, car_fit.rho, raw_var, config.literal_car)
    car = gmrf.CarModel(car_fit.rho, lam, adj_valid, config.literal_car)
    R = np.zeros(ds_raw.grid.n_sites)
    R[valid] = gmrf.sample_gmrf(car, 1, resid_seed)[0]
    R = R.reshape(ds_raw.grid.shape)

    y_new = np.full(ds_raw.grid.n_sites, np.nan)
    y_new[valid] = f.evaluate(ds_raw, valid) + R.ravel()[valid]
    ds = ds_raw.with_outcome(y_new.reshape(ds_raw.grid.shape))

    importances = []
    if config.mask_names:
        masked = list(config.mask_names)
    elif config.mask_top_k:
        importances = rank_confounders(ds_raw, fitter, split)
        masked = [n for n, _ in importances[:config.mask_top_k]]
    else:
        masked = []
    ds = replace(mask_covariates(ds, masked), seed=config.seed)
    sc = Scenario(ds, f, R, 0.0, 0.0, outcome_sd(ds, _standard_sites(ds, config.r_d)), car, config,
                  importances, raw_var)
    sc.tau_dir, sc.tau_spill = true_effects(sc)
    return sc


def synthetic_lattice_world(config: SyntheticWorldConfig = SyntheticWorldConfig()) -> Scenario:
    """Fully synthetic world with a hidden CAR confounder ``U``.

    ``U`` (standardized) drives both treatment, through
    ``A ~ Bernoulli(sigmoid(c_a U + w_x sum_k X_k))``, and outcome.  Column 0 of
    ``X`` has correlation ``x_u_corr`` with ``U``; the rest are pure noise.
    """
    c = config
    grid = GridShape(c.nx, c.ny)
    u_seed, x_seed, a_seed, e_seed = _seed_streams(c.seed, 4)
    adj = adjacency_matrix(grid, QUEEN)
    lam = gmrf.calibrate_lambda(adj, c.rho, 1.0)
    U = gmrf.sample_gmrf(gmrf.CarModel(c.rho, lam, adj), 1, u_seed)[0]
    U = (U - U.mean()) / U.std()
    X = np.random.default_rng(x_seed).standard_normal((grid.n_sites, c.d_x))
    X[:, 0] = c.x_u_corr * U + np.sqrt(1.0 - c.x_u_corr ** 2) * X[:, 0]
    logits = c.c_a * U + c.w_x * X.sum(axis=1)
    A = (np.random.default_rng(a_seed).random(grid.n_sites) < 1.0 / (1.0 + np.exp(-logits))).astype(int)
    names = tuple(f"x{k}" for k in range(c.d_x))
    f = StructuralOutcome(c.b_dir, c.b_sp, c.c_y, names)
    full = from_arrays(A.reshape(grid.shape), np.zeros(grid.shape),
                       np.concatenate([X, U[:, None]], axis=1).reshape(grid.shape + (c.d_x + 1,)),
                       names + ("U",), seed=c.seed, provenance="synthetic lattice world")
    ds = mask_covariates(full, ["U"])
    R = (c.noise_sd * np.random.default_rng(e_seed).standard_normal(grid.n_sites)).reshape(grid.shape)
    all_sites = np.arange(grid.n_sites)
    Y = f.evaluate(ds, all_sites) + R.ravel()
    ds = ds.with_outcome(Y.reshape(grid.shape))
    sc = Scenario(ds, f, R, 0.0, 0.0, outcome_sd(ds, _standard_sites(ds, 1)), None, c)
    sc.tau_dir, sc.tau_spill = true_effects(sc)
    return sc


# ---------------------------------------------------------------------------
# persistence


def scenario_paths(stem) -> dict[str, Path]:
    stem = Path(stem)
    return {
        "dataset": stem.with_suffix(".csv"),
        "scenario": stem.with_suffix(".scenario.json"),
        "predictor": stem.with_suffix(".predictor.pkl"),
    }


def save_scenario(scenario: Scenario, stem) -> dict[str, Path]:
    """Write dataset, predictor pickle and a JSON sidecar with truths and residual field."""
    paths = scenario_paths(stem)
    save_dataset(scenario.dataset, paths["dataset"])
    with open(paths["predictor"], "wb") as fh:
        pickle.dump(scenario.predictor, fh, protocol=4)
    cfg = scenario.config
    car = scenario.car
    doc = {
        "kind": "synthetic" if isinstance(cfg, SyntheticWorldConfig) else "semi-synthetic",
        "config": cfg.to_dict() if cfg is not None else None,
        "tau_dir": scenario.tau_dir,
        "tau_spill": scenario.tau_spill,
        "sigma_y": scenario.sigma_y,
        "predictor": {"file": paths["predictor"].name, "kind": scenario.predictor.kind,
                      "regime": scenario.predictor.regime, "r_d": scenario.r_d,
                      "input_schema": scenario.predictor.input_schema},
        "car": None if car is None else {"rho": car.rho, "lam": car.lam, "literal": car.literal,
                                         "adjacency": getattr(cfg, "residual_adjacency", QUEEN)},
        "raw_residual_var": scenario.raw_residual_var,
        "importances": [[n, v] for n, v in scenario.importances],
        "residual": [repr(float(v)) for v in np.asarray(scenario.residual).ravel()],
    }
    paths["scenario"].write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return paths


def load_scenario(stem) -> Scenario:
    paths = scenario_paths(stem)
    for key in ("dataset", "scenario", "predictor"):
        if not paths[key].exists():
            raise FileNotFoundError(f"scenario file missing: {paths[key]}")
    ds = load_dataset(paths["dataset"])
    doc = json.loads(paths["scenario"].read_text(encoding="utf-8"))
    with open(paths["predictor"], "rb") as fh:
        predictor = pickle.load(fh)
    R = np.array([float(v) for v in doc["residual"]]).reshape(ds.grid.shape)
    if doc["kind"] == "synthetic":
        cfg = SyntheticWorldConfig.from_dict(doc["config"])
    else:
        cfg = ScenarioConfig.from_dict(doc["config"]) if doc["config"] is not None else None
    car = None
    if doc["car"] is not None:
        valid = np.flatnonzero(ds.validity.ravel())
        adj = adjacency_matrix(ds.grid, doc["car"]["adjacency"], valid)
        car = gmrf.CarModel(doc["car"]["rho"], doc["car"]["lam"], adj, doc["car"]["literal"])
    return Scenario(ds, predictor, R, doc["tau_dir"], doc["tau_spill"], doc["sigma_y"], car, cfg,
                    [tuple(x) for x in doc["importances"]], doc["raw_residual_var"])
