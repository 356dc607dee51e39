import numpy as np
import pytest
import torch

from spatial_deconfounder import outcome
from spatial_deconfounder.cvae import CvaeConfig, CvaeParams, SubstituteConfounder, substitute_confounder
from spatial_deconfounder.datagen import SyntheticWorldConfig, synthetic_lattice_world
from spatial_deconfounder.dataset import from_arrays, neighborhood_blocks, standardize
from spatial_deconfounder.lattice import ROOK, laplacian
from spatial_deconfounder.outcome import (ALL0, ALL1, KEEP, OBSERVED, SET0, SET1, EncDecNet, HeadConfig,
                                          Intervention, LayoutError, featurize, fit_end_to_end, fit_outcome,
                                          laplacian_basis, load_outcome, model_sites, predict, predict_sites,
                                          save_coefficients, save_outcome, spline_plus_fit, validation_mse)
from spatial_deconfounder.split import SplitParams, spatial_split

from conftest import make_dataset


def linear_world(ny=10, nx=12, seed=0, b_dir=2.0, b_sp=0.25, noise=0.0):
    r = np.random.default_rng(seed)
    A = (r.random((ny, nx)) < 0.5).astype(int)
    X = r.standard_normal((ny, nx, 2))
    ds = from_arrays(A, np.zeros((ny, nx)), X)
    sites = np.arange(ds.grid.n_sites)
    a_s, a_n, x_s, x_n = neighborhood_blocks(ds, 1, sites)
    Y = 1.5 + b_dir * a_s + b_sp * a_n.sum(axis=1) + x_s @ [0.7, -0.3] + x_n @ np.linspace(-1, 1, 16)
    Y = Y + noise * r.standard_normal(Y.shape)
    return ds.with_outcome(Y.reshape(ds.grid.shape))


def test_featurize_observed_reproduces_data():
    ds = make_dataset(seed=1)
    sites = model_sites(ds, 1)
    F, layout = featurize(ds, None, 1)
    a_s, a_n, x_s, x_n = neighborhood_blocks(ds, 1, sites)
    np.testing.assert_array_equal(F, np.column_stack([a_s, a_n, x_s, x_n]))
    assert layout.width == F.shape[1] == 1 + 8 + 2 + 16


def test_featurize_interventions():
    ds = make_dataset(seed=2)
    F1, lay = featurize(ds, None, 1, Intervention(SET1, KEEP))
    assert (F1[:, 0] == 1).all()
    F0, _ = featurize(ds, None, 1, Intervention(KEEP, ALL0))
    assert (F0[:, lay.spill_slice()] == 0).all()
    Fv, _ = featurize(ds, None, 1, Intervention(KEEP, [1, 0, 1, 0, 1, 0, 1, 0]))
    assert (Fv[:, lay.spill_slice()] == [1, 0, 1, 0, 1, 0, 1, 0]).all()
    with pytest.raises(ValueError):
        featurize(ds, None, 1, Intervention(KEEP, [1, 0]))


def test_featurize_with_zhat_and_layout_check():
    ds = make_dataset(seed=3)
    sites = model_sites(ds, 1)
    z = SubstituteConfounder(ds.grid, sites, np.arange(2 * len(sites), dtype=float).reshape(-1, 2))
    F, lay = featurize(ds, z, 1)
    np.testing.assert_array_equal(F[:, -2:], z.zhat)
    with pytest.raises(LayoutError):
        featurize(ds, None, 1, layout=lay)
    m = fit_outcome(HeadConfig(kind="linear"), ds, z)
    with pytest.raises(LayoutError):
        predict_sites(m, ds, None, OBSERVED, sites)


def test_linear_head_recovers_coefficients():
    ds = linear_world()
    m = fit_outcome(HeadConfig(kind="linear"), ds, None)
    c = m.coef
    assert c["intercept"] == pytest.approx(1.5, abs=1e-6)
    assert c["a_s"] == pytest.approx(2.0, abs=1e-6)
    spill = [v for k, v in c.items() if k.startswith("a_N[")]
    assert len(spill) == 8
    np.testing.assert_allclose(spill, 0.25, atol=1e-6)


def test_linear_predict_affine_in_treatments():
    ds = linear_world(noise=0.3, seed=4)
    m = fit_outcome(HeadConfig(kind="linear"), ds, None)
    sites = model_sites(ds, 1)
    p1 = predict_sites(m, ds, None, Intervention(SET1, ALL1), sites)
    p0 = predict_sites(m, ds, None, Intervention(SET0, ALL0), sites)
    ph = predict_sites(m, ds, None, Intervention(SET1, ALL0), sites)
    pg = predict_sites(m, ds, None, Intervention(SET0, ALL1), sites)
    np.testing.assert_allclose(p1 - ph, pg - p0, atol=1e-10)


def test_predict_constant_and_interpolating():
    ds = make_dataset(seed=5)
    const = ds.with_outcome(np.full(ds.grid.shape, 4.2))
    m = fit_outcome(HeadConfig(kind="linear"), const, None)
    f = predict(m, const, None)
    sites = model_sites(ds, 1)
    np.testing.assert_allclose(f.ravel()[sites], 4.2, atol=1e-10)
    assert np.isnan(f[0, 0])
    exact = linear_world(seed=6)
    m = fit_outcome(HeadConfig(kind="linear"), exact, None)
    np.testing.assert_allclose(predict(m, exact, None).ravel()[sites[:0]], [])
    s = model_sites(exact, 1)
    np.testing.assert_allclose(predict(m, exact, None).ravel()[s], exact.outcome.ravel()[s], atol=1e-9)


def test_spline_plus_reduces_to_ols_without_smooth():
    ds = linear_world(noise=0.5, seed=7)
    cfg = HeadConfig(kind="spline-plus", n_basis=1)
    sp = spline_plus_fit(ds, None, 0.0, 0.0, cfg)
    ols = fit_outcome(HeadConfig(kind="linear"), ds, None)
    np.testing.assert_allclose(sp.arrays["coef"], ols.arrays["coef"][1:], atol=1e-8)
    sites = model_sites(ds, 1)
    np.testing.assert_allclose(predict_sites(sp, ds, None, OBSERVED, sites),
                               predict_sites(ols, ds, None, OBSERVED, sites), atol=1e-8)


def test_spline_plus_large_lam_t_is_plain_spatial_head():
    ds = linear_world(noise=0.5, seed=8)
    lam_y = 0.3
    cfg = HeadConfig(kind="spline-plus", n_basis=20)
    sp = spline_plus_fit(ds, None, 1e12, lam_y, cfg)
    # Oracle: plain spatial regression of Y on raw treatments, covariates and the same smooth.
    sites = model_sites(ds, 1)
    valid = np.flatnonzero(ds.validity.ravel())
    w, V = laplacian_basis(laplacian(ds.grid, ROOK, valid), 20)
    F, _ = featurize(ds, None, 1, sites=sites)
    P = np.column_stack([F, V[sites]])
    G = P.T @ P + np.diag(np.concatenate([np.zeros(F.shape[1]), lam_y * w]))
    beta = np.linalg.solve(G, P.T @ ds.outcome.ravel()[sites])
    np.testing.assert_allclose(sp.arrays["coef"][1:], beta[1:F.shape[1]], atol=1e-6)
    np.testing.assert_allclose(predict_sites(sp, ds, None, OBSERVED, sites), P @ beta, atol=1e-6)


def test_spline_plus_constant_shift_moves_intercept_only():
    ds = linear_world(noise=0.5, seed=9)
    cfg = HeadConfig(kind="spline-plus", n_basis=15)
    a = spline_plus_fit(ds, None, 0.1, 0.1, cfg)
    b = spline_plus_fit(ds.with_outcome(ds.outcome + 10.0), None, 0.1, 0.1, cfg)
    np.testing.assert_allclose(a.arrays["coef"], b.arrays["coef"], atol=1e-9)
    assert not np.allclose(a.arrays["theta_y"], b.arrays["theta_y"])


def test_spline_plus_singular_fallback(caplog):
    ds = linear_world(seed=10)
    dup = from_arrays(ds.treatment, ds.outcome, np.concatenate([ds.covariates, ds.covariates], axis=2))
    with caplog.at_level("WARNING"):
        m = spline_plus_fit(dup, None, 0.0, 0.0, HeadConfig(kind="spline-plus", n_basis=5))
    assert "ridge" in caplog.text
    assert np.isfinite(m.arrays["coef"]).all()


def test_spline_plus_with_true_confounder_reduces_bias():
    sc = synthetic_lattice_world(SyntheticWorldConfig(seed=3))
    ds = standardize(sc.dataset)
    sites = model_sites(ds, 1)
    U = ds.column("U").ravel()[sites]
    z = SubstituteConfounder(ds.grid, sites, ((U - U.mean()) / U.std())[:, None])
    cfg = HeadConfig(kind="spline-plus")
    sy = ds.moments["Y"][1]
    with_z = abs(fit_outcome(cfg, ds, z).coef["a_s_resid"] * sy - sc.tau_dir)
    without = abs(fit_outcome(cfg, ds, None).coef["a_s_resid"] * sy - sc.tau_dir)
    assert with_z / without < 1


def test_conv_translation_equivariance():
    torch.manual_seed(0)
    net = EncDecNet(3, 8).double()
    x = torch.randn(1, 3, 32, 32, dtype=torch.float64)
    y = net(x)[0]
    ys = net(torch.roll(x, shifts=(1, 1), dims=(2, 3)))[0]
    a = y[12:20, 12:20]
    b = ys[13:21, 13:21]
    assert torch.max(torch.abs(a - b)).item() < 1e-5


def test_conv_head_smoke_r2_positive():
    sc = synthetic_lattice_world(SyntheticWorldConfig(seed=1))
    ds = standardize(sc.dataset)
    split = spatial_split(ds.grid, ds.validity, SplitParams(alpha=0.02, model_radius=1), seed=0)
    m = fit_outcome(HeadConfig(kind="conv", base_channels=8, max_epochs=150), ds, None, split, seed=0)
    _, val = outcome._split_sites(ds, 1, None, split)
    mse = validation_mse(m, ds, None, split)
    assert mse < np.var(ds.outcome.ravel()[val])
    sites = model_sites(ds, 1)[:40]
    d1 = predict_sites(m, ds, None, Intervention(SET1, KEEP), sites)
    assert np.isfinite(d1).all()


def _tiny_world():
    sc = synthetic_lattice_world(SyntheticWorldConfig(nx=12, ny=12, seed=2))
    ds = standardize(sc.dataset)
    split = spatial_split(ds.grid, ds.validity, SplitParams(alpha=0.05), seed=1)
    return ds, split


def test_end_to_end_gamma_zero_matches_two_stage():
    from spatial_deconfounder.cvae import train_cvae
    ds, split = _tiny_world()
    cc = CvaeConfig(latent_dim=2, hidden=(8,), max_epochs=25, patience=5)
    p_e2e, _ = fit_end_to_end(cc, HeadConfig(kind="linear"), 0.0, ds, split, seed=4)
    p_two, _ = train_cvae(cc, ds, split, seed=4)
    for k, v in p_two.state().items():
        assert np.array_equal(v, p_e2e.state()[k])


def _encoder_fd_sensitivity(e2e, stride=7, h=1e-4):
    """Largest central-difference change of gamma*L_Y under encoder weight perturbations.

    The head step sees Zhat as a snapshot taken before the step, which is what the
    optimizer differentiates; perturbing the encoder must leave that loss unchanged.
    """
    z0 = e2e.snapshot()
    worst = 0.0
    for W in (e2e.cvae.params.net.trunk[0].weight, e2e.cvae.params.net.mu.weight):
        flat = W.data.view(-1)
        for k in range(0, flat.numel(), stride):
            old = flat[k].item()
            flat[k] = old + h
            up = e2e.outcome_loss(z0).item()
            flat[k] = old - h
            dn = e2e.outcome_loss(z0).item()
            flat[k] = old
            worst = max(worst, abs(up - dn) / (2 * h))
    return worst


def test_end_to_end_blocks_outcome_gradient():
    ds, split = _tiny_world()
    cc = CvaeConfig(latent_dim=2, hidden=(8,), max_epochs=5)
    e2e = outcome.EndToEnd(cc, HeadConfig(kind="linear", max_epochs=5), 1.0, ds, split, seed=0)
    e2e.step()
    assert _encoder_fd_sensitivity(e2e) <= 1e-8
    loss = e2e.outcome_loss(e2e.snapshot())
    grads = torch.autograd.grad(loss, list(e2e.cvae.params.net.parameters()), allow_unused=True)
    assert all(g is None for g in grads)


def test_end_to_end_encoder_trajectory_ignores_gamma():
    ds, split = _tiny_world()
    cc = CvaeConfig(latent_dim=2, hidden=(8,), max_epochs=6, patience=50)
    hc = HeadConfig(kind="linear", max_epochs=6)
    runs = [outcome.EndToEnd(cc, hc, g, ds, split, seed=3) for g in (0.0, 5.0)]
    for _ in range(6):
        for e in runs:
            e.step()
    a, b = (e.cvae.params.state() for e in runs)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_end_to_end_rejects_spline():
    ds, split = _tiny_world()
    with pytest.raises(ValueError):
        fit_end_to_end(CvaeConfig(), HeadConfig(kind="spline-plus"), 1.0, ds, split)


def test_outcome_does_not_mutate_zhat():
    ds = make_dataset(seed=11)
    p = CvaeParams.initialize(CvaeConfig(latent_dim=2), ds.d_x, seed=0)
    z = substitute_confounder(p, ds)
    before = z.zhat.copy()
    m = fit_outcome(HeadConfig(kind="linear"), ds, z)
    predict(m, ds, z, Intervention(SET1, ALL1))
    np.testing.assert_array_equal(z.zhat, before)


@pytest.mark.parametrize("kind", ["linear", "spline-plus", "conv"])
def test_checkpoint_roundtrip(tmp_path, kind):
    ds = standardize(linear_world(noise=0.2, seed=12))
    m = fit_outcome(HeadConfig(kind=kind, n_basis=10, base_channels=4, max_epochs=3), ds, None, seed=0)
    back = load_outcome(save_outcome(m, tmp_path / "h.json"))
    sites = model_sites(ds, 1)
    for iv in (OBSERVED, Intervention(SET1, ALL0)):
        np.testing.assert_array_equal(predict_sites(m, ds, None, iv, sites), predict_sites(back, ds, None, iv, sites))
    if kind != "conv":
        text = save_coefficients(m, tmp_path / "c.csv").read_text().splitlines()
        assert text[0] == "term,estimate" and len(text) == 1 + len(m.coef)


def test_head_config_aliases_and_validation():
    assert HeadConfig(kind="splineplus").kind == "spline-plus"
    assert HeadConfig(kind="unet").kind == "conv-encdec"
    with pytest.raises(ValueError):
        HeadConfig(kind="gnn")
    with pytest.raises(ValueError):
        HeadConfig(lam_t=-1.0)
    with pytest.raises(ValueError):
        HeadConfig.from_dict({"kind": "linear", "nope": 1})
