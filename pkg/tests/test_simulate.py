import numpy as np
import pytest

from swedge.curves import EffectCurve
from swedge.design import build_layout, treatment_matrices
from swedge.simulate import (DatasetFormatError, SimulationConfig, cell_value_groups,
                             cluster_period_means, dataset_from_csv, dataset_to_csv,
                             simulate)


def _config(T=5, sigma_a2=0.15, sigma_e2=2.85, n=30, seed=1, outcome="B2",
            targets=(0.10, 0.14)):
    layout = build_layout("concurrent", T, 2)
    curve = EffectCurve.from_outcome_model(outcome, T, targets, low=0.08, high=0.15)
    return SimulationConfig(layout=layout, curve=curve, beta=np.linspace(0.1, 0.5, T),
                            sigma_a2=sigma_a2, sigma_e2=sigma_e2, n=n, seed=seed)


class TestSimulate:
    def test_noise_free_limit_recovers_cell_means(self):
        cfg = _config(sigma_a2=1e-18, sigma_e2=1e-18, n=5)
        ds = simulate(cfg)
        stats = cluster_period_means(ds)
        mats = treatment_matrices(cfg.layout)
        Z = np.stack([tm.Z for tm in mats])
        expect = cfg.beta[None, :] + Z @ cfg.curve.stacked()
        np.testing.assert_allclose(stats.ybar, expect, atol=1e-6)

    def test_same_seed_bit_identical(self):
        a = simulate(_config(seed=99))
        b = simulate(_config(seed=99))
        assert (a.y == b.y).all()
        assert (a.cluster == b.cluster).all()

    def test_different_seeds_differ(self):
        assert not (simulate(_config(seed=1)).y == simulate(_config(seed=2)).y).all()

    def test_row_layout_and_sizes(self):
        ds = simulate(_config(n=7))
        assert ds.N == 8 * 5 * 7
        assert (ds.cell_sizes() == 7).all()
        # cell-major ordering with individuals numbered within cell
        assert ds.cluster[0] == 1 and ds.period[0] == 1
        assert list(ds.individual[:7]) == list(range(1, 8))

    def test_indicators_match_layout(self):
        cfg = _config()
        ds = simulate(cfg)
        for r in (0, 100, 500, ds.N - 1):
            i, j = int(ds.cluster[r]), int(ds.period[r])
            for k in range(1, 3):
                assert ds.x[r, k - 1] == cfg.layout.x(k, i, j)

    def test_unequal_cell_sizes(self):
        layout = build_layout("single", 3, 1)
        nij = np.array([[2, 3, 4], [5, 1, 2]])
        curve = EffectCurve.custom(3, [[0.0, 0.0]])
        cfg = SimulationConfig(layout=layout, curve=curve, beta=np.zeros(3),
                               sigma_a2=0.1, sigma_e2=1.0, n=nij, seed=3)
        ds = simulate(cfg)
        np.testing.assert_array_equal(ds.cell_sizes(), nij)

    def test_cell_mean_variance_matches_components(self):
        # pooled over replicates, Var(cell mean) = sigma_a2 + sigma_e2/n
        vals = []
        for seed in range(150):
            ds = simulate(_config(outcome="A", seed=seed, n=30))
            vals.append(cluster_period_means(ds).ybar)
        arr = np.stack(vals)                      # (R, I, T)
        var = arr.var(axis=0, ddof=1).mean()
        assert var == pytest.approx(0.245, rel=0.12)

    def test_cluster_correlation_matches_intercept_variance(self):
        # covariance between two periods of one cluster estimates sigma_a2
        vals = []
        for seed in range(400):
            ds = simulate(_config(outcome="A", seed=seed, n=30))
            vals.append(cluster_period_means(ds).ybar[:, :2])
        arr = np.stack(vals)
        centered = arr - arr.mean(axis=0, keepdims=True)
        cov = (centered[:, :, 0] * centered[:, :, 1]).mean()
        se = (centered[:, :, 0] * centered[:, :, 1]).std() / np.sqrt(arr.shape[0] * arr.shape[1])
        assert abs(cov - 0.15) < 3 * se

    def test_mean_structure_unbiased_per_cell(self):
        cfg0 = _config(T=3, n=4, outcome="A", targets=(0.5, -0.2))
        mats = treatment_matrices(cfg0.layout)
        Z = np.stack([tm.Z for tm in mats])
        expect = cfg0.beta[None, :] + Z @ cfg0.curve.stacked()
        acc = np.zeros_like(expect)
        R = 5000
        for seed in range(R):
            ds = simulate(_config(T=3, n=4, outcome="A", targets=(0.5, -0.2), seed=seed))
            acc += cluster_period_means(ds).ybar
        mean = acc / R
        mc_se = np.sqrt((0.15 + 2.85 / 4) / R)
        assert np.abs(mean - expect).max() < 3.5 * mc_se


class TestCellStats:
    def test_single_observation_cells(self):
        layout = build_layout("single", 2, 1)
        curve = EffectCurve.custom(2, [[0.0]])
        cfg = SimulationConfig(layout=layout, curve=curve, beta=np.zeros(2),
                               sigma_a2=0.0, sigma_e2=1.0, n=1, seed=5)
        ds = simulate(cfg)
        stats = cluster_period_means(ds)
        np.testing.assert_array_equal(stats.ybar.reshape(-1), ds.y)
        assert stats.within_ss == 0.0

    def test_hand_computed_cell(self):
        ds = simulate(_config(n=3, T=3))
        y = ds.y.copy()
        y[:3] = [1.0, 2.0, 3.0]
        ds2 = type(ds)(T=ds.T, m=ds.m, cluster=ds.cluster, period=ds.period,
                       individual=ds.individual, x=ds.x, expo=ds.expo, y=y)
        stats = cluster_period_means(ds2)
        assert stats.ybar[0, 0] == pytest.approx(2.0)
        assert stats.within_ss_cells[0, 0] == pytest.approx(2.0)

    def test_table_dimensions(self):
        stats = cluster_period_means(simulate(_config()))
        assert stats.ybar.shape == (8, 5)
        assert len(list(stats.rows())) == 40

    def test_groups_in_cell_order(self):
        ds = simulate(_config(n=4, T=3))
        groups = cell_value_groups(ds)
        assert len(groups) == ds.I * ds.T == 12
        np.testing.assert_array_equal(np.concatenate(groups), ds.y)


class TestCsv:
    def test_round_trip(self):
        ds = simulate(_config(n=3))
        again = dataset_from_csv(dataset_to_csv(ds))
        assert (again.y == ds.y).all()
        assert (again.x == ds.x).all()
        assert (again.expo == ds.expo).all()

    def test_header_names(self):
        header = dataset_to_csv(simulate(_config(n=1))).splitlines()[0]
        assert header == "cluster,period,individual,x1,x2,e1,e2,y"

    def test_malformed_header(self):
        with pytest.raises(DatasetFormatError):
            dataset_from_csv("a,b,c\n1,2,3\n")

    def test_bad_row_reports_line(self):
        text = "cluster,period,individual,x1,e1,y\n1,1,1,0,0,1.5\n1,1,oops,0,0,2.0\n"
        with pytest.raises(DatasetFormatError) as err:
            dataset_from_csv(text)
        assert err.value.line == 3

    def test_unsorted_input_is_normalised(self):
        text = ("cluster,period,individual,x1,e1,y\n"
                "2,1,1,0,0,5.0\n"
                "1,1,1,0,0,1.0\n")
        ds = dataset_from_csv(text)
        assert ds.cluster[0] == 1 and ds.y[0] == 1.0
