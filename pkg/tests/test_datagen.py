import numpy as np
import pytest

from spatial_deconfounder.datagen import (ScenarioConfig, ScenarioError, SyntheticWorldConfig,
                                          counterfactual_outcomes, fit_predictor, load_scenario, make_scenario,
                                          rank_confounders, save_scenario, synthetic_lattice_world, true_effects)
from spatial_deconfounder.dataset import from_arrays, in_scope_mask, neighborhood_blocks
from spatial_deconfounder.outcome import ALL0, ALL1, KEEP, OBSERVED, SET0, SET1, Intervention
from spatial_deconfounder.split import SplitParams, spatial_split


def raw_world(nx=16, ny=16, seed=0):
    """Synthetic world with U visible, as a raw dataset for scenario construction."""
    sc = synthetic_lattice_world(SyntheticWorldConfig(nx=nx, ny=ny, seed=seed))
    cov, names = sc.dataset.all_covariates()
    return from_arrays(sc.dataset.treatment, sc.dataset.outcome, cov, names=names), sc


def linear_raw(nx=14, ny=12, seed=0):
    r = np.random.default_rng(seed)
    A = (r.random((ny, nx)) < 0.5).astype(int)
    X = r.standard_normal((ny, nx, 2))
    ds = from_arrays(A, np.zeros((ny, nx)), X, names=["p", "q"])
    sites = np.arange(ds.grid.n_sites)
    a_s, a_n, x_s, _ = neighborhood_blocks(ds, 1, sites)
    Y = 0.5 + 2.0 * a_s + 0.3 * a_n.sum(axis=1) + x_s @ [1.0, -0.5]
    return ds.with_outcome(Y.reshape(ds.grid.shape))


def _split(ds, seed=0):
    return spatial_split(ds.grid, ds.validity, SplitParams(alpha=0.03), seed)


def test_linear_predictor_exact_on_noiseless_data():
    ds = linear_raw()
    split = _split(ds)
    f = fit_predictor(ds, "local", 1, "linear", split)
    tr = np.flatnonzero((split.train & in_scope_mask(ds, 1)).ravel())
    mse = np.mean((f.evaluate(ds, tr) - ds.outcome.ravel()[tr]) ** 2)
    assert mse < 1e-8


def test_predictor_schema_has_no_coordinates():
    ds = linear_raw()
    for regime in ("local", "spatial"):
        f = fit_predictor(ds, regime, 1, "linear", _split(ds))
        schema = f.input_schema
        assert not any(c in ("i", "j") or c.startswith(("i_", "j_", "coord")) for c in schema)
        assert any(c.startswith("x_N") for c in schema) == (regime == "spatial")
        assert len(schema) == f._estimator.coef_.shape[0]


def test_predictor_rejects_bad_inputs():
    ds = linear_raw(nx=8, ny=8)
    with pytest.raises(ScenarioError, match="underdetermined"):
        fit_predictor(ds, "spatial", 1, "linear", _split(ds))
    ds = linear_raw()
    with pytest.raises(ScenarioError):
        fit_predictor(ds, "global", 1, "linear", _split(ds))
    with pytest.raises(ScenarioError):
        fit_predictor(linear_raw(), "local", 1, "forest", _split(linear_raw()))


@pytest.mark.parametrize("kind", ["mlp", "boosted-stumps"])
def test_predictor_heldout_r2_positive(kind):
    ds, _ = raw_world(nx=24, ny=24, seed=1)
    split = _split(ds, 1)
    f = fit_predictor(ds, "spatial", 1, kind, split, seed=0)
    va = np.flatnonzero((split.validation & in_scope_mask(ds, 1)).ravel())
    y = ds.outcome.ravel()[va]
    r2 = 1 - np.mean((f.evaluate(ds, va) - y) ** 2) / np.var(y)
    assert r2 > 0


def _linear_scenario(**kw):
    cfg = ScenarioConfig(regime="local", predictor="linear", mask_names=("q",), seed=3, **kw)
    return make_scenario(linear_raw(), cfg)


def test_scenario_identity_and_variance_calibration():
    sc = _linear_scenario()
    ds = sc.dataset
    valid = np.flatnonzero(ds.validity.ravel())
    np.testing.assert_allclose(ds.outcome.ravel()[valid], sc.f_values(OBSERVED, valid) + sc.residual.ravel()[valid],
                               atol=1e-12, rtol=0)
    assert sc.car.marginal_variances().mean() == pytest.approx(sc.raw_residual_var, rel=1e-10)


def test_scenario_reproducible():
    a, b = _linear_scenario(), _linear_scenario()
    np.testing.assert_array_equal(a.residual, b.residual)
    np.testing.assert_array_equal(a.dataset.outcome, b.dataset.outcome)
    assert (a.tau_dir, a.tau_spill) == (b.tau_dir, b.tau_spill)


def test_masked_confounder_hidden_but_oracle_visible():
    sc = _linear_scenario()
    assert "q" not in sc.dataset.covariate_names and sc.dataset.hidden_names == ("q",)
    np.testing.assert_array_equal(sc.dataset.column("q"), linear_raw().column("q"))
    # Truth does not change with masking: evaluating f needs the hidden column.
    sites = sc.truth_sites
    assert np.isfinite(sc.f_values(OBSERVED, sites)).all()


def test_masking_does_not_change_truth():
    masked = _linear_scenario()
    open_ = make_scenario(linear_raw(), ScenarioConfig(regime="local", predictor="linear", mask_top_k=0, seed=3))
    assert masked.tau_dir == open_.tau_dir and masked.tau_spill == open_.tau_spill
    np.testing.assert_array_equal(masked.residual, open_.residual)
    np.testing.assert_array_equal(masked.dataset.outcome, open_.dataset.outcome)


def test_counterfactuals():
    sc = _linear_scenario()
    obs = counterfactual_outcomes(sc, OBSERVED)
    np.testing.assert_array_equal(obs[sc.dataset.validity], sc.dataset.outcome[sc.dataset.validity])
    iv = Intervention(SET1, ALL0)
    other_R = np.random.default_rng(99).standard_normal(sc.residual.shape)
    d1 = counterfactual_outcomes(sc, iv) - obs
    d2 = counterfactual_outcomes(sc, iv, residual=other_R) - counterfactual_outcomes(sc, OBSERVED, residual=other_R)
    np.testing.assert_allclose(d1, d2, atol=1e-12)
    sites = sc.truth_sites
    c = counterfactual_outcomes(sc, Intervention(SET1, ALL1), sites) - counterfactual_outcomes(sc, Intervention(SET0, ALL0), sites)
    np.testing.assert_allclose(c.ravel()[sites], 2.0 + 8 * 0.3, atol=1e-9)


def test_true_effects_linear_and_oracle():
    sc = _linear_scenario()
    assert sc.tau_dir == pytest.approx(2.0, abs=1e-9)
    assert sc.tau_spill == pytest.approx(8 * 0.3, abs=1e-9)
    ws, _ = raw_world(nx=12, ny=12, seed=2)
    scm = make_scenario(ws, ScenarioConfig(predictor="boosted-stumps", seed=1))
    f = scm.predictor
    tot_d = tot_s = 0.0
    for s in scm.truth_sites:
        one = np.array([s])
        tot_d += f.evaluate(scm.dataset, one, Intervention(SET1, KEEP))[0] - f.evaluate(scm.dataset, one, Intervention(SET0, KEEP))[0]
        tot_s += f.evaluate(scm.dataset, one, Intervention(KEEP, ALL1))[0] - f.evaluate(scm.dataset, one, Intervention(KEEP, ALL0))[0]
    n = len(scm.truth_sites)
    assert scm.tau_dir == pytest.approx(tot_d / n, abs=1e-12)
    assert scm.tau_spill == pytest.approx(tot_s / n, abs=1e-12)


def test_neighbor_blind_outcome_has_zero_spillover():
    sc = synthetic_lattice_world(SyntheticWorldConfig(nx=10, ny=10, b_sp=0.0))
    assert true_effects(sc)[1] == 0.0


def test_rank_confounders():
    r = np.random.default_rng(0)
    ny = nx = 20
    A = (r.random((ny, nx)) < 0.5).astype(int)
    drv = r.standard_normal((ny, nx))
    noise = r.standard_normal((ny, nx))
    Y = A + 2.0 * drv + 0.1 * r.standard_normal((ny, nx))
    ds = from_arrays(A, Y, np.stack([noise, drv, drv], axis=2), names=["noise", "drv", "drv_copy"])
    split = _split(ds, 2)

    def fitter(d, s):
        return fit_predictor(d, "local", 1, "linear", s)
    ranks = dict(rank_confounders(ds, fitter, split))
    assert abs(ranks["noise"]) < 0.05
    assert abs(ranks["drv"]) < 1e-6 and abs(ranks["drv_copy"]) < 1e-6
    single = from_arrays(A, Y, np.stack([noise, drv], axis=2), names=["noise", "drv"])
    order = rank_confounders(single, fitter, split)
    assert order[0][0] == "drv" and order[0][1] > 1.0


def test_synthetic_world_properties():
    sc = synthetic_lattice_world(SyntheticWorldConfig(seed=4))
    assert sc.tau_spill == pytest.approx(8 * 0.25, abs=1e-12)
    assert sc.tau_dir == pytest.approx(1.0, abs=1e-12)
    assert "U" in sc.dataset.hidden_names and "U" not in sc.dataset.covariate_names
    U = sc.dataset.column("U")
    assert np.corrcoef(U.ravel(), sc.dataset.treatment.ravel())[0, 1] > 0
    valid = np.flatnonzero(sc.dataset.validity.ravel())
    np.testing.assert_allclose(sc.dataset.outcome.ravel()[valid], sc.f_values(OBSERVED, valid) + sc.residual.ravel()[valid],
                               atol=1e-12, rtol=0)


def test_scenario_persistence_roundtrip(tmp_path):
    sc = _linear_scenario()
    paths = save_scenario(sc, tmp_path / "s")
    back = load_scenario(tmp_path / "s")
    np.testing.assert_array_equal(back.residual, sc.residual)
    assert back.tau_dir == sc.tau_dir and back.config == sc.config
    sites = sc.truth_sites
    np.testing.assert_array_equal(back.f_values(OBSERVED, sites), sc.f_values(OBSERVED, sites))
    again = save_scenario(back, tmp_path / "t")
    for k in ("dataset", "scenario"):
        assert paths[k].read_bytes().replace(b"s.predictor", b"t.predictor") == again[k].read_bytes()


def test_scenario_config_validation():
    with pytest.raises((ScenarioError, ValueError)):
        ScenarioConfig(regime="weird")
    with pytest.raises((ScenarioError, ValueError)):
        ScenarioConfig(r_d=0)
    with pytest.raises((ScenarioError, ValueError)):
        ScenarioConfig.from_dict({"regime": "local", "junk": 1})


def test_unconfounded_world_naive_regression_unbiased():
    biases = []
    for seed in range(10):
        sc = synthetic_lattice_world(SyntheticWorldConfig(nx=32, ny=32, c_a=0.0, c_y=0.0, seed=seed))
        ds = sc.dataset
        sites = np.flatnonzero(in_scope_mask(ds, 1).ravel())
        a_s, a_n, x_s, _ = neighborhood_blocks(ds, 1, sites)
        F = np.column_stack([np.ones(len(sites)), a_s, a_n.sum(axis=1), x_s])
        beta = np.linalg.lstsq(F, ds.outcome.ravel()[sites], rcond=None)[0]
        biases.append((beta[1] - sc.tau_dir) / ds.outcome.ravel()[sites].std())
    assert abs(np.mean(biases)) < 0.05
