import math

import numpy as np
import pytest

from swedge.curves import EffectCurve, regime_parameters
from swedge.design import build_layout
from swedge.fit import (FitError, IdentifiabilityError, MeanSystem, VarianceComponents,
                        _pencil_for, estimand_se, fit_gls, fit_reml, restricted_loglik)
from swedge.simulate import SimulationConfig, cluster_period_means, simulate

from oracles import dense_covariance, dense_design, dense_restricted_loglik


def sim(T=5, outcome="B2", sigma_a2=0.15, sigma_e2=2.85, n=30, seed=7,
        design="concurrent", targets=None, offset=1):
    layout = build_layout(design, T, 2, offset=offset)
    pars = regime_parameters("small", T) if targets is None else None
    targets = targets if targets is not None else pars["targets"]
    low, high = (pars["low"], pars["high"]) if pars else (0.08, 0.15)
    curve = EffectCurve.from_outcome_model(outcome, T, targets, low=low, high=high)
    cfg = SimulationConfig(layout=layout, curve=curve, beta=np.linspace(0.1, 0.5, T),
                           sigma_a2=sigma_a2, sigma_e2=sigma_e2, n=n, seed=seed)
    return simulate(cfg), layout, curve


class TestGls:
    def test_noise_free_exact_recovery(self):
        ds, layout, curve = sim(outcome="B1", sigma_a2=1e-18, sigma_e2=1e-18, n=4)
        means = cluster_period_means(ds)
        # any positive working variances recover the exact coefficients
        fit = fit_gls(means, layout, "B", VarianceComponents(0.3, 1.7))
        np.testing.assert_allclose(fit.beta, np.linspace(0.1, 0.5, 5), atol=1e-8)
        np.testing.assert_allclose(fit.effects, curve.stacked(), atol=1e-8)

    def test_noise_free_constant_model(self):
        ds, layout, curve = sim(outcome="A", sigma_a2=1e-18, sigma_e2=1e-18, n=3,
                                targets=(0.4, -0.7))
        fit = fit_gls(cluster_period_means(ds), layout, "A", VarianceComponents(1.0, 1.0))
        np.testing.assert_allclose(fit.effects, [0.4, -0.7], atol=1e-8)

    def test_frozen_reml_matches_gls(self):
        ds, layout, _ = sim()
        vc = VarianceComponents(0.15, 2.85)
        g = fit_gls(cluster_period_means(ds), layout, "A", vc)
        f = fit_reml(ds, layout, "A", fixed_vc=vc)
        np.testing.assert_allclose(np.r_[g.beta, g.effects], np.r_[f.beta, f.effects],
                                   atol=1e-10)
        np.testing.assert_allclose(g.cov, f.cov, atol=1e-10)

    def test_unequal_cell_sizes_enter_weights(self):
        layout = build_layout("single", 3, 1)
        curve = EffectCurve.custom(3, [[0.5, 0.5]])
        nij = np.array([[40, 2, 40], [40, 40, 2]])
        cfg = SimulationConfig(layout=layout, curve=curve, beta=np.zeros(3),
                               sigma_a2=0.2, sigma_e2=2.0, n=nij, seed=11)
        ds = simulate(cfg)
        means = cluster_period_means(ds)
        fit = fit_gls(means, layout, "A", VarianceComponents(0.2, 2.0))
        # degrading a sparse cell must matter: compare against equal-weight fit
        fit_eq = fit_gls(cluster_period_means(ds), layout, "A", VarianceComponents(0.2, 200000.0))
        assert abs(fit.effects[0] - fit_eq.effects[0]) > 1e-6

    def test_model_c_rejected(self):
        ds, layout, _ = sim()
        with pytest.raises(ValueError):
            fit_gls(cluster_period_means(ds), layout, "C", VarianceComponents(0.1, 1.0))


class TestReml:
    def test_recovers_variance_components_on_average(self):
        # moderate-horizon check of consistency
        sa, se = [], []
        for seed in range(40):
            ds, layout, _ = sim(T=11, outcome="A", seed=seed)
            fit = fit_reml(ds, layout, "A")
            sa.append(fit.vc.sigma_a2)
            se.append(fit.vc.sigma_e2)
        assert np.mean(sa) == pytest.approx(0.15, rel=0.25)
        assert np.mean(se) == pytest.approx(2.85, rel=0.05)

    def test_matches_statsmodels_oracle(self):
        sm = pytest.importorskip("statsmodels.formula.api")
        import pandas as pd
        ds, layout, _ = sim(seed=42)
        fit = fit_reml(ds, layout, "A")
        df = pd.DataFrame({"y": ds.y, "cl": ds.cluster, "per": ds.period.astype(str),
                           "x1": ds.x[:, 0].astype(float), "x2": ds.x[:, 1].astype(float)})
        md = sm.mixedlm("y ~ 0 + C(per) + x1 + x2", df, groups=df["cl"])
        mf = md.fit(reml=True, method="bfgs", maxiter=500)
        # profiled REML here must be at least as high as the oracle's optimum
        assert fit.loglik >= mf.llf - 1e-6
        if abs(fit.loglik - mf.llf) < 1e-6:
            np.testing.assert_allclose(fit.effects, mf.fe_params[-2:].values, atol=1e-4)

    def test_scale_equivariance_of_ses(self):
        ds, layout, _ = sim(seed=9)
        fit1 = fit_reml(ds, layout, "B")
        ds2 = type(ds)(T=ds.T, m=ds.m, cluster=ds.cluster, period=ds.period,
                       individual=ds.individual, x=ds.x, expo=ds.expo, y=2.0 * ds.y)
        fit2 = fit_reml(ds2, layout, "B")
        np.testing.assert_allclose(2.0 * estimand_se(fit1), estimand_se(fit2), rtol=1e-6)
        np.testing.assert_allclose(2.0 * fit1.estimands()[0], fit2.estimands()[0], rtol=1e-6)

    def test_model_b_estimand_is_block_mean(self):
        ds, layout, _ = sim(seed=3)
        fit = fit_reml(ds, layout, "B")
        est, _ = fit.estimands()
        blocks = fit.effects.reshape(2, 4)
        np.testing.assert_allclose(est, blocks.mean(axis=1), atol=1e-12)

    def test_model_c_shrinks_to_constant_fit_on_constant_truth(self):
        gaps, deviations = [], []
        for seed in range(40):
            ds, layout, _ = sim(outcome="A", seed=seed)
            fa = fit_reml(ds, layout, "A")
            fc = fit_reml(ds, layout, "C")
            gaps.append(fc.estimands()[0] - fa.estimands()[0])
            deviations.append(max(fc.vc.sigma_k2))
        # the two estimators agree on average; single draws may disagree
        # whenever noise masquerades as effect heterogeneity
        assert np.abs(np.mean(gaps, axis=0)).max() < 0.02
        assert np.median(deviations) < 0.05  # deviation variance usually near its floor

    def test_boundary_flagged_when_intercept_variance_vanishes(self):
        ds, layout, _ = sim(outcome="A", sigma_a2=0.0, seed=15)
        fit = fit_reml(ds, layout, "A")
        # with no true cluster effect the ratio often pins at the floor
        if fit.vc.sigma_a2 < 1e-8:
            assert "sigma_a2" in fit.convergence.boundary

    def test_supplementation_time_varying_rejected_with_sums(self):
        layout = build_layout("supplementation", 5, 2)
        curve = EffectCurve.custom(5, np.zeros((2, 4)))
        cfg = SimulationConfig(layout=layout, curve=curve, beta=np.zeros(5),
                               sigma_a2=0.1, sigma_e2=1.0, n=5, seed=1)
        ds = simulate(cfg)
        with pytest.raises(IdentifiabilityError, match=r"delta\[1,e\]\+delta\[2,e-1\]"):
            fit_reml(ds, layout, "B")

    def test_monotone_objective_path(self):
        ds, layout, _ = sim(seed=21)
        fit = fit_reml(ds, layout, "C", record_path=True)
        path = fit.convergence.objective_path
        assert len(path) >= 1
        diffs = np.diff(np.asarray(path))
        assert (diffs <= 1e-9).all()

    def test_ml_flag(self):
        ds, layout, _ = sim(seed=5)
        reml_fit = fit_reml(ds, layout, "A")
        ml_fit = fit_reml(ds, layout, "A", reml=False)
        assert ml_fit.loglik != pytest.approx(reml_fit.loglik)
        assert ml_fit.vc.sigma_e2 < reml_fit.vc.sigma_e2  # ML divides by N, not N-p


class TestNesting:
    def test_random_effect_model_reduces_to_constant(self):
        ds, layout, _ = sim(seed=13)
        fa = fit_reml(ds, layout, "A")
        vc0 = VarianceComponents(fa.vc.sigma_a2, fa.vc.sigma_e2, (0.0, 0.0))
        la = restricted_loglik(ds, layout, "A", fa.vc)
        lc = restricted_loglik(ds, layout, "C", vc0)
        assert abs(la - lc) < 1e-8
        assert abs(la - fa.loglik) < 1e-8

    def test_random_effect_fit_no_worse_than_nested_constant(self):
        ds, layout, _ = sim(outcome="B2", seed=23)
        fa = fit_reml(ds, layout, "A")
        fc = fit_reml(ds, layout, "C")
        assert fc.loglik >= fa.loglik - 1e-8


class TestLikelihoodDecomposition:
    @pytest.mark.parametrize("model,vc", [
        ("A", VarianceComponents(0.3, 1.2)),
        ("B", VarianceComponents(0.05, 0.9)),
        ("C", VarianceComponents(0.2, 1.5, (0.07, 0.3))),
    ])
    @pytest.mark.parametrize("reml", [True, False])
    def test_matches_dense_oracle(self, model, vc, reml):
        layout = build_layout("concurrent", 3, 2)
        curve = EffectCurve.custom(3, [[0.4, 0.1], [-0.2, 0.3]])
        nij = np.array([[3, 4, 2], [4, 4, 4], [2, 2, 5], [3, 3, 3]])
        cfg = SimulationConfig(layout=layout, curve=curve, beta=np.array([0.1, 0.0, -0.3]),
                               sigma_a2=0.3, sigma_e2=1.0, n=nij, seed=31)
        ds = simulate(cfg)
        assert ds.N <= 200
        mine = restricted_loglik(ds, layout, model, vc, reml=reml)
        V = dense_covariance(layout, nij, vc.sigma_a2, vc.sigma_e2, vc.sigma_k2)
        X = dense_design(layout, nij, model)
        oracle = dense_restricted_loglik(ds.y, X, V, reml=reml)
        assert mine == pytest.approx(oracle, abs=1e-8)

    def test_factorial_instance(self):
        layout = build_layout("factorial", 4, 2, offset=1)
        curve = EffectCurve.custom(4, np.zeros((2, 3)))
        nij = np.full((layout.I, 4), 3)
        cfg = SimulationConfig(layout=layout, curve=curve, beta=np.zeros(4),
                               sigma_a2=0.5, sigma_e2=2.0, n=nij, seed=8)
        ds = simulate(cfg)
        vc = VarianceComponents(0.4, 1.8, (0.2, 0.1))
        V = dense_covariance(layout, nij, 0.4, 1.8, (0.2, 0.1))
        X = dense_design(layout, nij, "C")
        oracle = dense_restricted_loglik(ds.y, X, V)
        assert restricted_loglik(ds, layout, "C", vc) == pytest.approx(oracle, abs=1e-8)


class TestGradients:
    def test_dense_path_gradient(self):
        ds, layout, _ = sim(seed=42)
        system = MeanSystem(layout, "C", np.full((8, 5), 30))
        ms = cluster_period_means(ds)
        stats = system.stats(ms.ybar)
        x0 = np.array([-1.5, -3.0, -2.0])
        _, grad = system.neg2_profiled_grad(x0, stats, ms.within_ss, True)
        for j in range(3):
            h = 1e-6
            xp, xm = x0.copy(), x0.copy()
            xp[j] += h
            xm[j] -= h
            fd = (system.neg2_profiled(xp, stats, ms.within_ss, True)
                  - system.neg2_profiled(xm, stats, ms.within_ss, True)) / (2 * h)
            assert grad[j] == pytest.approx(fd, rel=1e-5)

    def test_diag_path_gradient(self):
        ds, layout, _ = sim(seed=42)
        for model in ("A", "B"):
            system = MeanSystem(layout, model, np.full((8, 5), 30))
            ms = cluster_period_means(ds)
            stats = system.stats(ms.ybar)
            for x in (-4.0, -1.0, 1.0):
                for reml in (True, False):
                    _, grad = system.neg2_profiled_grad(np.array([x]), stats,
                                                        ms.within_ss, reml)
                    h = 1e-6
                    fd = (system.neg2_profiled(np.array([x + h]), stats, ms.within_ss, reml)
                          - system.neg2_profiled(np.array([x - h]), stats, ms.within_ss, reml)) / (2 * h)
                    assert grad[0] == pytest.approx(fd, rel=1e-5)

    def test_pencil_equals_reference_objective(self):
        ds, layout, _ = sim(seed=17)
        ms = cluster_period_means(ds)
        for model in ("A", "B"):
            system = MeanSystem(layout, model, np.full((8, 5), 30))
            stats = system.stats(ms.ybar)
            pencil = _pencil_for(system)
            prep = pencil.prepare(ms.ybar.reshape(1, -1))
            for ll in (-9.0, -2.0, 0.0, 2.5):
                for reml in (True, False):
                    ref = system.neg2_profiled(np.array([ll]), stats, ms.within_ss, reml)
                    got = pencil.neg2(np.array([ll]), prep, np.array([ms.within_ss]), reml)[0]
                    assert got == pytest.approx(ref, abs=1e-8)


class TestCovarianceSanity:
    def test_model_se_tracks_empirical_sd(self):
        # long-horizon design: model-based SE within 15% of the empirical SD
        ests, ses = [], []
        for seed in range(60):
            ds, layout, _ = sim(T=11, outcome="A", seed=100 + seed)
            fit = fit_reml(ds, layout, "A")
            est, se = fit.estimands()
            ests.append(est)
            ses.append(se)
        emp_sd = np.std(np.array(ests), axis=0, ddof=1)
        mean_se = np.mean(np.array(ses), axis=0)
        assert np.abs(mean_se / emp_sd - 1).max() < 0.25
