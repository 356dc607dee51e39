"""Command-line harness: generate, split, fit, estimate, check, tune, benchmark.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, checks, cvae, datagen, gmrf, outcome, pipeline
from .dataset import DatasetError, load_dataset, standardize
from .split import load_split, save_split

log = logging.getLogger("spatial_deconfounder")


class UsageError(Exception):
    """Bad flags, config or paths; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    dataset: str | None = None
    scenario: str | None = None
    world: datagen.SyntheticWorldConfig = datagen.SyntheticWorldConfig()
    scenario_config: datagen.ScenarioConfig = datagen.ScenarioConfig()
    pipeline: pipeline.PipelineConfig = pipeline.PipelineConfig()
    n_runs: int = 10
    level: float = 0.95
    out: str = "."
    master_seed: int = 0
    n_trials: int | None = None
    search_space: dict | None = None

    def __post_init__(self):
        if self.n_runs < 1:
            raise UsageError("n_runs must be >= 1")
        if not 0 < self.level < 1:
            raise UsageError("level must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "scenario": self.scenario,
            "world": self.world.to_dict(),
            "scenario_config": self.scenario_config.to_dict(),
            "pipeline": self.pipeline.to_dict(),
            "n_runs": self.n_runs,
            "level": self.level,
            "out": self.out,
            "master_seed": self.master_seed,
            "n_trials": self.n_trials,
            "search_space": self.search_space,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "world" in kw:
                kw["world"] = datagen.SyntheticWorldConfig.from_dict(kw["world"])
            if "scenario_config" in kw:
                kw["scenario_config"] = datagen.ScenarioConfig.from_dict(kw["scenario_config"])
            if "pipeline" in kw:
                kw["pipeline"] = pipeline.PipelineConfig.from_dict(kw["pipeline"])
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from None


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    return RunConfig.from_dict(doc)


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    """Command-line flags override the config file."""
    pc = cfg.pipeline
    cv, hd, est = pc.cvae, pc.head, pc.estimands
    try:
        if getattr(args, "radius", None) is not None:
            cv = replace(cv, radius=args.radius)
            hd = replace(hd, radius=args.radius)
        if getattr(args, "latent_dim", None) is not None:
            cv = replace(cv, latent_dim=args.latent_dim)
        if getattr(args, "prior", None) is not None:
            cv = replace(cv, prior_mode=args.prior)
        if getattr(args, "head", None) is not None:
            hd = replace(hd, kind=outcome.head_kind(args.head))
        if getattr(args, "gamma", None) is not None:
            hd = replace(hd, gamma=args.gamma)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    pc = replace(pc, cvae=cv, head=hd, estimands=replace(est, level=cfg.level))
    if getattr(args, "end_to_end", False):
        pc = replace(pc, end_to_end=True)
    if getattr(args, "ablate", False):
        pc = replace(pc, ablate=True)
    kw = {"pipeline": pc}
    if getattr(args, "regime", None) is not None:
        kw["scenario_config"] = replace(cfg.scenario_config, regime=args.regime)
    if args.seed is not None:
        kw["master_seed"] = args.seed
    if args.out is not None:
        kw["out"] = args.out
    for name in ("scenario", "dataset", "n_runs", "n_trials"):
        if getattr(args, name, None) is not None:
            kw[name] = getattr(args, name)
    return replace(cfg, **kw)


def versions() -> dict:
    import scipy
    import sklearn
    import torch
    return {
        "spatial_deconfounder": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "torch": torch.__version__,
    }


def write_json(path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    return path


def load_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenario(cfg: RunConfig) -> datagen.Scenario:
    if cfg.scenario is None:
        raise UsageError("a scenario is required (--scenario STEM)")
    paths = datagen.scenario_paths(cfg.scenario)
    if not paths["scenario"].exists() or not paths["dataset"].exists():
        raise UsageError(f"scenario not found: {cfg.scenario}")
    return datagen.load_scenario(cfg.scenario)


def build_scenario(cfg: RunConfig, seed: int) -> datagen.Scenario:
    if cfg.dataset is None:
        return datagen.synthetic_lattice_world(replace(cfg.world, seed=seed))
    path = Path(cfg.dataset)
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    return datagen.make_scenario(load_dataset(path), replace(cfg.scenario_config, seed=seed))


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: RunConfig, stem: str = "scenario") -> dict:
    sc = build_scenario(cfg, cfg.master_seed)
    paths = datagen.save_scenario(sc, _out_dir(cfg) / stem)
    return {k: str(v) for k, v in paths.items()}


def cmd_split(cfg: RunConfig) -> Path:
    ds = _scenario(cfg).dataset
    split = pipeline.make_split(ds, cfg.pipeline, cvae._seeds(cfg.master_seed, 3)[0])
    return save_split(split, _out_dir(cfg) / "split.csv")


FIT_FILES = {"cvae": "cvae.json", "head": "head.json", "history": "history.json",
             "split": "split.csv", "config": "fit_config.json"}


def cmd_fit(cfg: RunConfig) -> dict:
    sc = _scenario(cfg)
    res = pipeline.fit(sc.dataset, cfg.pipeline, cfg.master_seed)
    out = _out_dir(cfg)
    cvae.save_params(res.params, out / FIT_FILES["cvae"])
    outcome.save_outcome(res.head, out / FIT_FILES["head"])
    save_split(res.split, out / FIT_FILES["split"])
    hist = {k: v for k, v in res.history.items() if isinstance(v, list)}
    write_json(out / FIT_FILES["history"], hist)
    write_json(out / FIT_FILES["config"], {"config": cfg.to_dict(), "seed": cfg.master_seed})
    return {k: str(out / v) for k, v in FIT_FILES.items()}


def _load_fit(cfg: RunConfig, sc: datagen.Scenario) -> pipeline.FitResult:
    out = Path(cfg.out)
    for name in ("cvae", "head", "split"):
        if not (out / FIT_FILES[name]).exists():
            raise UsageError(f"missing fit output {out / FIT_FILES[name]}; run `fit` first")
    ds = standardize(sc.dataset)
    params = cvae.load_params(out / FIT_FILES["cvae"])
    head = outcome.load_outcome(out / FIT_FILES["head"])
    split = load_split(out / FIT_FILES["split"], ds.grid)
    zhat = cvae.substitute_confounder(params, ds)
    return pipeline.FitResult(ds, split, params, zhat, head)


def _has_truth(sc: datagen.Scenario) -> bool:
    return sc.predictor is not None


def cmd_estimate(cfg: RunConfig) -> dict:
    sc = _scenario(cfg)
    res = _load_fit(cfg, sc)
    frag = pipeline.estimate_all(res, cfg.pipeline, cfg.master_seed, sc if _has_truth(sc) else None)
    frag["config"] = cfg.to_dict()
    write_json(Path(cfg.out) / "estimate.json", frag)
    return frag


def cmd_check(cfg: RunConfig) -> dict:
    sc = _scenario(cfg)
    res = _load_fit(cfg, sc)
    est = cfg.pipeline.estimands
    rep = checks.predictive_p_value(res.params, res.dataset, est.check_M, est.check_inner,
                                    cfg.master_seed, split=res.split)
    doc = rep.to_dict()
    write_json(Path(cfg.out) / "check.json", doc)
    return doc


# Random-search spaces for the tuner, keyed by head kind.
SEARCH_SPACES = {
    outcome.SPLINE_PLUS: {
        "n_trials": 100,
        "space": {
            "cvae.weight_decay": ["loguniform", 1e-4, 1e-3],
            "cvae.beta_max": ["loguniform", 1e-5, 10.0],
            "head.lam_t": ["loguniform", 1e-5, 1.0],
            "head.lam_y": ["loguniform", 1e-5, 1.0],
        },
    },
    outcome.CONV: {
        "n_trials": 60,
        "space": {
            "cvae.weight_decay": ["loguniform", 1e-4, 1e-3],
            "cvae.beta_max": ["loguniform", 1e-3, 1.0],
            "head.weight_decay": ["loguniform", 1e-4, 1e-3],
            "head.base_channels": ["choice", 16, 32],
        },
    },
    outcome.LINEAR: {
        "n_trials": 50,
        "space": {
            "cvae.weight_decay": ["loguniform", 1e-4, 1e-3],
            "cvae.beta_max": ["loguniform", 1e-5, 10.0],
        },
    },
}


def sample_value(dist, rng: np.random.Generator):
    kind, *args = dist
    if kind == "loguniform":
        lo, hi = args
        if not 0 < lo <= hi:
            raise UsageError(f"bad loguniform bounds {args}")
        return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    if kind == "uniform":
        lo, hi = args
        return float(rng.uniform(lo, hi))
    if kind == "choice":
        if not args:
            raise UsageError("choice needs at least one option")
        return args[int(rng.integers(len(args)))]
    raise UsageError(f"unknown distribution {kind!r}")


def sample_trial(space: dict, seed: int, k: int) -> dict:
    """Trial ``k``'s hyperparameters; depends only on ``(seed, k)`` so prefixes agree."""
    rng = np.random.default_rng([int(seed), int(k)])
    return {name: sample_value(space[name], rng) for name in sorted(space)}


def apply_trial(pc: pipeline.PipelineConfig, values: dict) -> pipeline.PipelineConfig:
    groups: dict[str, dict] = {"cvae": {}, "head": {}, "split": {}, "estimands": {}}
    for name, v in values.items():
        group, _, key = name.partition(".")
        if group not in groups or not key:
            raise UsageError(f"search space key {name!r} must look like cvae.<field> or head.<field>")
        groups[group][key] = v
    try:
        return replace(pc, **{g: replace(getattr(pc, g), **kv) for g, kv in groups.items() if kv})
    except TypeError as exc:
        raise UsageError(f"bad search space: {exc}") from None


def tune(ds, pc: pipeline.PipelineConfig, space: dict, n_trials: int, seed: int) -> dict:
    """Random search scored by validation MSE of the outcome head on the spatial split."""
    if not space:
        raise UsageError("search space is empty")
    if n_trials < 1:
        raise UsageError("n_trials must be >= 1")
    split_seed, cvae_seed, head_seed = cvae._seeds(seed, 3)
    ds = standardize(ds)
    trials, best = [], None
    for k in range(n_trials):
        values = sample_trial(space, seed, k)
        trial_pc = apply_trial(pc, values)
        split = pipeline.make_split(ds, trial_pc, split_seed)
        try:
            params, _ = cvae.train_cvae(trial_pc.cvae, ds, split, cvae_seed)
            zhat = cvae.substitute_confounder(params, ds)
            head = outcome.fit_outcome(trial_pc.head, ds, zhat, split, head_seed)
            mse = outcome.validation_mse(head, ds, zhat, split)
        except (cvae.TrainingDivergence, outcome.OutcomeDivergence) as exc:
            log.warning("trial %d diverged: %s", k, exc)
            mse = math.inf
        trials.append({"trial": k, "values": values, "val_mse": mse if math.isfinite(mse) else None})
        if math.isfinite(mse) and (best is None or mse < best["val_mse"]):
            best = {"trial": k, "values": values, "val_mse": mse}
    running, cur = [], math.inf
    for t in trials:
        if t["val_mse"] is not None:
            cur = min(cur, t["val_mse"])
        running.append(cur if math.isfinite(cur) else None)
    return {"trials": trials, "best": best, "running_best": running}


def cmd_tune(cfg: RunConfig, retrain_full: bool = False) -> dict:
    sc = _scenario(cfg)
    preset = SEARCH_SPACES[cfg.pipeline.head.kind]
    space = cfg.search_space if cfg.search_space is not None else preset["space"]
    n_trials = cfg.n_trials if cfg.n_trials is not None else preset["n_trials"]
    result = tune(sc.dataset, cfg.pipeline, space, n_trials, cfg.master_seed)
    if result["best"] is None:
        raise RuntimeError("every tuning trial diverged")
    best_pc = apply_trial(cfg.pipeline, result["best"]["values"])
    best_cfg = replace(cfg, pipeline=best_pc)
    out = _out_dir(cfg)
    write_json(out / "tune.json", result)
    write_json(out / "best_config.json", best_cfg.to_dict())
    if retrain_full:
        cmd_fit(best_cfg)
    result["best_config"] = best_cfg.to_dict()
    return result


AGG_KEYS = ("tau_dir_hat", "tau_spill_hat", "bias_dir", "bias_spill", "p_value",
            "ablation_bias_dir", "ablation_bias_spill")


def _flatten(run: dict) -> dict:
    flat = {
        "tau_dir_hat": run["direct"]["tau_hat"],
        "tau_spill_hat": run["spillover"]["tau_hat"],
        "band_dir": run["direct"]["band"],
        "band_spill": run["spillover"]["band"],
        "p_value": run["p_value"],
        "bias_dir": run["bias_dir"],
        "bias_spill": run["bias_spill"],
        "tau_dir_true": run["tau_dir_true"],
        "tau_spill_true": run["tau_spill_true"],
        "sigma_y": run["sigma_y"],
        "n_sites": run["n_sites"],
    }
    if "ablation" in run:
        ab = run["ablation"]
        flat["ablation_tau_dir_hat"] = ab["direct"]["tau_hat"]
        flat["ablation_tau_spill_hat"] = ab["spillover"]["tau_hat"]
        flat["ablation_bias_dir"] = ab.get("bias_dir")
        flat["ablation_bias_spill"] = ab.get("bias_spill")
    return flat


def aggregate(values, z: float = 1.96) -> dict | None:
    """Mean and normal-approximation half-width ``z * sd / sqrt(n)``."""
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return None
    half = 0.0 if v.size == 1 else float(z * v.std(ddof=1) / math.sqrt(v.size))
    return {"mean": float(v.mean()), "half_width": half, "n": int(v.size)}


def _environment(cfg: RunConfig) -> str:
    if cfg.dataset is None:
        w = cfg.world
        return f"synthetic {w.nx}x{w.ny} (c_A={w.c_a:g}, c_Y={w.c_y:g})"
    sc = cfg.scenario_config
    return f"{Path(cfg.dataset).stem} ({sc.regime}, r_d={sc.r_d})"


def _fmt(agg: dict | None) -> str:
    if agg is None:
        return "n/a"
    return f"{agg['mean']:.2f} ± {agg['half_width']:.2f}"


def markdown_table(report: dict) -> str:
    agg = report["aggregate"]
    truth = agg.get("bias_dir") is not None
    dkey, skey = ("bias_dir", "bias_spill") if truth else ("tau_dir_hat", "tau_spill_hat")
    env = report["environment"]
    head = report["config"]["pipeline"]["head"]["kind"]
    lines = ["| Environment | Method | DIR | SPILL |", "|---|---|---|---|",
             f"| {env} | cvae-{head} | {_fmt(agg.get(dkey))} | {_fmt(agg.get(skey))} |"]
    if "ablation_bias_dir" in agg or "ablation_tau_dir_hat" in agg:
        ad = agg.get("ablation_" + dkey)
        as_ = agg.get("ablation_" + skey)
        lines.append(f"| {env} | {head} (no Zhat) | {_fmt(ad)} | {_fmt(as_)} |")
    metric = "standardized absolute bias" if truth else "effect estimate"
    lines.append("")
    lines.append(f"Entries: mean ± 1.96 sd/sqrt(n) of the {metric} over {report['n_success']} runs.")
    return "\n".join(lines) + "\n"


def cmd_benchmark(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    runs, failures = [], []
    for k in range(cfg.n_runs):
        seed = cfg.master_seed + k
        try:
            sc = build_scenario(cfg, seed)
            res = pipeline.run(sc, cfg.pipeline, seed)
            runs.append({"run": k, "seed": seed, **_flatten(res)})
        except (cvae.TrainingDivergence, outcome.OutcomeDivergence, gmrf.NotPositiveDefiniteError,
                datagen.ScenarioError, DatasetError, RuntimeError, ValueError) as exc:
            log.warning("run %d (seed %d) failed: %s", k, seed, exc)
            failures.append({"run": k, "seed": seed, "error": f"{type(exc).__name__}: {exc}"})
    if not runs:
        raise RuntimeError("every benchmark run failed")
    if len(runs) < cfg.n_runs:
        log.warning("only %d of %d runs succeeded", len(runs), cfg.n_runs)
    keys = list(AGG_KEYS) + ["ablation_tau_dir_hat", "ablation_tau_spill_hat"]
    agg = {k: aggregate([r.get(k) for r in runs]) for k in keys if any(k in r for r in runs)}
    report = {
        "environment": _environment(cfg),
        "config": cfg.to_dict(),
        "versions": versions(),
        "runs": runs,
        "failures": failures,
        "n_runs": cfg.n_runs,
        "n_success": len(runs),
        "aggregate": agg,
    }
    out = _out_dir(cfg)
    report["wall_time_s"] = round(time.perf_counter() - t0, 3)
    write_json(out / "report.json", report)
    (out / "report.md").write_text(markdown_table(report), encoding="utf-8")
    return report


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--radius", type=int)
    p.add_argument("--latent-dim", type=int, dest="latent_dim")
    p.add_argument("--head", choices=["linear", "splineplus", "conv"])
    p.add_argument("--prior", choices=list(gmrf.PRIOR_MODES))
    p.add_argument("--regime", choices=list(datagen.REGIMES))
    p.add_argument("--end-to-end", action="store_true", dest="end_to_end")
    p.add_argument("--gamma", type=float)
    p.add_argument("--ablate", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spatial-deconfounder", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate", help="build a scenario (synthetic world or semi-synthetic from --dataset)")
    _shared(p)
    _model_flags(p)
    p.add_argument("--dataset", help="raw dataset CSV; omit for the synthetic world")
    p.add_argument("--stem", default="scenario", help="file stem for the scenario files")

    for name, helptext in (("split", "write the spatial train/val/buffer split"),
                           ("fit", "train the CVAE and the outcome head"),
                           ("estimate", "plug-in effects, bands, predictive check and biases"),
                           ("check", "predictive check of the treatment model")):
        p = sub.add_parser(name, help=helptext)
        _shared(p)
        _model_flags(p)
        p.add_argument("--scenario", help="scenario file stem")

    p = sub.add_parser("tune", help="random search on the spatial validation split")
    _shared(p)
    _model_flags(p)
    p.add_argument("--scenario", help="scenario file stem")
    p.add_argument("--trials", type=int, dest="n_trials")
    p.add_argument("--retrain-full", action="store_true", dest="retrain_full")

    p = sub.add_parser("benchmark", help="repeated scenario + fit + estimate runs")
    _shared(p)
    _model_flags(p)
    p.add_argument("--dataset", help="raw dataset CSV; omit for the synthetic world")
    p.add_argument("--n-runs", type=int, dest="n_runs")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = _apply_flags(cfg, args)
        cmd = args.command
        if cmd == "generate":
            result = cmd_generate(cfg, args.stem)
        elif cmd == "split":
            result = str(cmd_split(cfg))
        elif cmd == "fit":
            result = cmd_fit(cfg)
        elif cmd == "estimate":
            frag = cmd_estimate(cfg)
            result = {k: frag[k] for k in ("direct", "spillover", "p_value", "bias_dir", "bias_spill")}
        elif cmd == "check":
            result = cmd_check(cfg)["p_value"]
        elif cmd == "tune":
            result = cmd_tune(cfg, args.retrain_full)["best"]
        else:
            result = cmd_benchmark(cfg)["aggregate"]
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (cvae.TrainingDivergence, outcome.OutcomeDivergence) as exc:
        print(f"error: training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
