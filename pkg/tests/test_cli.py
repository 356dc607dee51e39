import json

import numpy as np
import pytest

from spatial_deconfounder import cli
from spatial_deconfounder.datagen import SyntheticWorldConfig, synthetic_lattice_world
from spatial_deconfounder.dataset import from_arrays, save_dataset

SMALL = {
    "world": {"nx": 12, "ny": 12},
    "scenario_config": {"predictor": "boosted-stumps"},
    "pipeline": {
        "split": {"alpha": 0.05},
        "cvae": {"hidden": [8], "max_epochs": 20, "patience": 5},
        "head": {"n_basis": 10},
        "estimands": {"n_draws": 20, "check_M": 8, "check_inner": 3},
    },
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def generated(tmp_path, config, name="gen"):
    out = tmp_path / name
    assert run("generate", "--config", config, "--out", out, "--seed", 3) == 0
    return out


def test_generate_is_byte_identical(tmp_path, config):
    a, b = generated(tmp_path, config, "a"), generated(tmp_path, config, "b")
    for suffix in (".csv", ".scenario.json", ".predictor.pkl"):
        assert (a / f"scenario{suffix}").read_bytes() == (b / f"scenario{suffix}").read_bytes()


def test_generate_local_regime_schema(tmp_path, config):
    sc = synthetic_lattice_world(SyntheticWorldConfig(nx=14, ny=14, seed=1))
    cov, names = sc.dataset.all_covariates()
    raw = tmp_path / "raw.csv"
    save_dataset(from_arrays(sc.dataset.treatment, sc.dataset.outcome, cov, names=names), raw)
    for regime in ("local", "spatial"):
        out = tmp_path / regime
        assert run("generate", "--config", config, "--dataset", raw, "--regime", regime, "--out", out) == 0
        schema = json.loads((out / "scenario.scenario.json").read_text())["predictor"]["input_schema"]
        assert any(c.startswith("x_s") for c in schema)
        assert any(c.startswith("x_N") for c in schema) == (regime == "spatial")


def test_usage_errors_exit_2(tmp_path, config, capsys):
    assert run("generate", "--regime", "global", "--out", tmp_path) == 2
    assert run("fit", "--config", config, "--scenario", tmp_path / "nowhere", "--out", tmp_path) == 2
    assert run("fit", "--config", config, "--out", tmp_path) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_runs": 2, "colour": "blue"}))
    assert run("benchmark", "--config", bad, "--out", tmp_path) == 2
    bad.write_text(json.dumps({"pipeline": {"cvae": {"widths": [3]}}}))
    assert run("benchmark", "--config", bad, "--out", tmp_path) == 2
    bad.write_text(json.dumps({"scenario_config": {"regime": "global"}}))
    assert run("benchmark", "--config", bad, "--out", tmp_path) == 2
    assert run("benchmark", "--config", config, "--n-runs", 0, "--out", tmp_path) == 2
    assert run("frobnicate") == 2
    assert "error" in capsys.readouterr().err


def test_fit_rerun_identical_and_radius_zero(tmp_path, config):
    gen = generated(tmp_path, config)
    stem = gen / "scenario"
    out = tmp_path / "fit"
    assert run("fit", "--config", config, "--scenario", stem, "--out", out) == 0
    first = {k: (out / v).read_bytes() for k, v in cli.FIT_FILES.items()}
    assert run("fit", "--config", config, "--scenario", stem, "--out", out) == 0
    assert first == {k: (out / v).read_bytes() for k, v in cli.FIT_FILES.items()}
    out0 = tmp_path / "fit0"
    assert run("fit", "--config", config, "--scenario", stem, "--out", out0, "--radius", 0, "--head", "linear") == 0
    cfg0 = json.loads((out0 / "fit_config.json").read_text())["config"]["pipeline"]
    assert cfg0["cvae"]["radius"] == 0 and cfg0["head"]["radius"] == 0


def test_estimate_and_check(tmp_path, config):
    stem = generated(tmp_path, config) / "scenario"
    out = tmp_path / "fit"
    assert run("estimate", "--config", config, "--scenario", stem, "--out", out) == 2  # fit first
    assert run("fit", "--config", config, "--scenario", stem, "--out", out) == 0
    assert run("estimate", "--config", config, "--scenario", stem, "--out", out) == 0
    rep = cli.load_report(out / "estimate.json")
    assert cli.RunConfig.from_dict(rep["config"]).to_dict() == rep["config"]
    lo, hi = rep["direct"]["band"]
    assert lo <= rep["direct"]["tau_hat"] <= hi
    expected = abs(rep["direct"]["tau_hat"] - rep["tau_dir_true"]) / rep["sigma_y"]
    assert rep["bias_dir"] == pytest.approx(expected, rel=1e-12)
    assert json.loads(json.dumps(rep)) == rep
    assert run("check", "--config", config, "--scenario", stem, "--out", out) == 0
    chk = cli.load_report(out / "check.json")
    assert 0.0 <= chk["p_value"] <= 1.0 and len(chk["T_replicated"]) == 8


def test_estimate_without_truth_has_null_biases(tmp_path, config):
    stem = generated(tmp_path, config) / "scenario"
    # Real data: only the dataset, no generator to compute truth from.
    real = cli.datagen.load_scenario(stem)
    cfg = cli.RunConfig.from_dict({**SMALL, "scenario": str(stem), "out": str(tmp_path / "real")})
    res = cli.pipeline.fit(real.dataset, cfg.pipeline, 0)
    frag = cli.pipeline.estimate_all(res, cfg.pipeline, 0, None)
    assert frag["bias_dir"] is None and frag["bias_spill"] is None and frag["tau_dir_true"] is None
    assert np.isfinite(frag["direct"]["tau_hat"]) and np.isfinite(frag["spillover"]["tau_hat"])


def test_sampler_bounds_and_prefix_property():
    dist = ["loguniform", 1e-5, 10.0]
    vals = [cli.sample_trial({"cvae.beta_max": dist}, 0, k)["cvae.beta_max"] for k in range(2000)]
    assert min(vals) >= 1e-5 and max(vals) <= 10.0
    logs = np.log10(vals)
    assert abs(logs.mean() - 0.5 * (-5 + 1)) < 0.2
    assert cli.sample_trial(cli.SEARCH_SPACES["conv-encdec"]["space"], 0, 0)["head.base_channels"] in (16, 32)
    with pytest.raises(cli.UsageError):
        cli.sample_value(["loguniform", 0.0, 1.0], np.random.default_rng(0))
    with pytest.raises(cli.UsageError):
        cli.sample_value(["normal", 0.0, 1.0], np.random.default_rng(0))


def test_tune(tmp_path, config):
    stem = generated(tmp_path, config) / "scenario"
    cfg = cli.RunConfig.from_dict({**SMALL, "scenario": str(stem), "out": str(tmp_path / "t")})
    space = {"cvae.weight_decay": ["loguniform", 1e-4, 1e-3], "cvae.beta_max": ["loguniform", 1e-5, 10.0]}
    ds = cli.datagen.load_scenario(stem).dataset
    three = cli.tune(ds, cfg.pipeline, space, 3, seed=5)
    one = cli.tune(ds, cfg.pipeline, space, 1, seed=5)
    assert one["best"]["values"] == one["trials"][0]["values"] == three["trials"][0]["values"]
    assert three["trials"][0] == one["trials"][0]
    rb = three["running_best"]
    assert all(b <= a for a, b in zip(rb, rb[1:]))
    assert rb[-1] == three["best"]["val_mse"] == min(t["val_mse"] for t in three["trials"])
    with pytest.raises(cli.UsageError):
        cli.tune(ds, cfg.pipeline, {}, 3, seed=5)
    assert run("tune", "--config", config, "--scenario", stem, "--trials", 1, "--head", "linear",
               "--out", tmp_path / "t") == 0
    best = json.loads((tmp_path / "t" / "best_config.json").read_text())
    assert best["pipeline"]["head"]["kind"] == "linear"
    assert run("tune", "--config", config, "--scenario", stem, "--trials", 0, "--out", tmp_path / "t") == 2


def test_aggregate():
    assert cli.aggregate([0.3]) == {"mean": 0.3, "half_width": 0.0, "n": 1}
    v = np.random.default_rng(0).standard_normal(7)
    agg = cli.aggregate(list(v) + [None])
    assert abs(agg["mean"] - sum(v) / len(v)) < 1e-12
    assert agg["half_width"] == pytest.approx(1.96 * np.std(v, ddof=1) / np.sqrt(7), rel=1e-12)
    assert cli.aggregate([None]) is None


def test_benchmark_with_ablation(tmp_path, config):
    out = tmp_path / "bench"
    assert run("benchmark", "--config", config, "--n-runs", 2, "--ablate", "--head", "linear", "--out", out) == 0
    rep = cli.load_report(out / "report.json")
    assert rep["n_success"] == 2 and len(rep["runs"]) == 2
    assert [r["seed"] for r in rep["runs"]] == [0, 1]
    for key, agg in rep["aggregate"].items():
        vals = [r[key] for r in rep["runs"]]
        assert abs(agg["mean"] - sum(vals) / len(vals)) < 1e-12
    assert "ablation_bias_dir" in rep["aggregate"]
    assert rep["config"]["pipeline"]["ablate"] is True
    md = (out / "report.md").read_text()
    assert "| Environment | Method | DIR | SPILL |" in md
    assert "cvae-linear" in md and "(no Zhat)" in md
    one = tmp_path / "one"
    assert run("benchmark", "--config", config, "--n-runs", 1, "--head", "linear", "--out", one) == 0
    agg = cli.load_report(one / "report.json")["aggregate"]
    assert all(a["half_width"] == 0.0 for a in agg.values())
