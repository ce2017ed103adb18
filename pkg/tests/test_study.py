import math

import numpy as np
import pytest

import swedge.study as study_mod
from swedge.fit import FitError
from swedge.study import (PowerSpec, ScenarioSpec, StudyReport, StudyRow,
                          _linear_range_for, mc_standard_errors, power_cells,
                          power_to_csv, preset_power_grid, preset_scenarios,
                          replicates_to_csv, report_to_csv, run_power, run_scenario)


def tiny_spec(**kw):
    base = dict(scenario_id="tiny", design="concurrent", T=5, n=8,
                outcome_model="B1", regime="small", fit_models=("A", "B"),
                replicates=3, bootstrap=6, base_seed=77)
    base.update(kw)
    return ScenarioSpec(**base)


class TestRunScenario:
    def test_smoke_rows_per_model_and_intervention(self):
        report = run_scenario(tiny_spec(replicates=1, bootstrap=2, fit_models=("A", "B", "C")))
        assert len(report.rows) == 3 * 2
        labels = {(r.fit_model, r.intervention) for r in report.rows}
        assert labels == {(m, k) for m in ("A", "B", "C") for k in (1, 2)}

    def test_truth_is_realized_average(self):
        report = run_scenario(tiny_spec(replicates=1, bootstrap=2))
        truths = {r.intervention: r.truth for r in report.rows}
        assert truths[1] == pytest.approx(0.095)   # not the rounded 0.10 label
        assert truths[2] == pytest.approx(0.135)

    def test_deterministic_across_worker_counts(self):
        spec = tiny_spec(replicates=4, bootstrap=6)
        seq = run_scenario(spec, workers=1)
        par = run_scenario(spec, workers=2)
        for a, b in zip(seq.rows, par.rows):
            assert a.__dict__ == b.__dict__
        assert seq.replicate_records == par.replicate_records

    def test_coverage_and_length_use_same_intervals(self):
        report = run_scenario(tiny_spec(replicates=3, bootstrap=8))
        recs = [x for x in report.replicate_records
                if x["fit_model"] == "A" and x["intervention"] == 1 and x["ok"]]
        row = next(r for r in report.rows if r.fit_model == "A" and r.intervention == 1)
        lengths = [x["ci_high"] - x["ci_low"] for x in recs]
        assert row.ci_length == pytest.approx(float(np.mean(lengths)))
        covered = [x["ci_low"] <= row.truth <= x["ci_high"] for x in recs]
        assert row.coverage_pct == pytest.approx(100.0 * np.mean(covered))

    def test_abort_on_excess_failures(self, monkeypatch):
        spec = tiny_spec(replicates=3, bootstrap=4, fit_models=("A",))

        def broken(system, ybar, ssw, **kw):
            raise FitError("synthetic")

        monkeypatch.setattr(study_mod, "_fit_means", broken)
        with pytest.raises(FitError):
            run_scenario(spec)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            tiny_spec(replicates=0)
        with pytest.raises(ValueError):
            tiny_spec(bootstrap=1)
        with pytest.raises(ValueError):
            tiny_spec(level=1.2)


class TestMcStandardErrors:
    def _report(self, rows, replicates):
        spec = tiny_spec(replicates=replicates)
        return StudyReport(spec=spec, rows=rows)

    def test_bias_se_formula(self):
        row = StudyRow("s", "concurrent", 5, 8, "A", "A", 1, 0.1,
                       bias=0.0, sd=2.0, coverage_pct=50.0, ci_length=1.0, mean_se=1.0)
        rep = mc_standard_errors(self._report([row], replicates=4))
        assert rep.rows[0].mc_se_bias == pytest.approx(1.0)

    def test_coverage_se_at_95(self):
        row = StudyRow("s", "concurrent", 5, 8, "A", "A", 1, 0.1,
                       bias=0.0, sd=1.0, coverage_pct=95.0, ci_length=1.0, mean_se=1.0)
        rep = mc_standard_errors(self._report([row], replicates=500))
        assert rep.rows[0].mc_se_coverage == pytest.approx(0.9747, abs=1e-3)

    def test_degenerate_proportions(self):
        for cov in (0.0, 100.0):
            row = StudyRow("s", "concurrent", 5, 8, "A", "A", 1, 0.1,
                           bias=0.0, sd=1.0, coverage_pct=cov, ci_length=1.0, mean_se=1.0)
            rep = mc_standard_errors(self._report([row], replicates=100))
            assert rep.rows[0].mc_se_coverage == 0.0


class TestPower:
    def test_linear_range_realizes_targets(self):
        from swedge.curves import EffectCurve
        for T in (5, 11):
            for d1 in (0.01, 0.21, 0.61):
                low, high = _linear_range_for(T, d1, 0.28)
                curve = EffectCurve.from_outcome_model("B1", T, (d1, d1 + 0.28),
                                                       low=low, high=high)
                np.testing.assert_allclose(curve.realized(), [d1, d1 + 0.28], atol=1e-12)

    def test_grid_cells(self):
        spec = PowerSpec(n_values=(8,), delta1_values=(0.01, 0.21), replicates=2,
                         bootstrap=4)
        cells = power_cells(spec)
        assert len(cells) == 2 * 1 * 2
        assert {c.design for c in cells} == {"concurrent", "factorial-augmented"}

    def test_smoke_run(self):
        spec = PowerSpec(designs=("concurrent",), n_values=(8,), delta1_values=(0.11,),
                         replicates=2, bootstrap=4, base_seed=5)
        rows = run_power(spec)
        assert len(rows) == 2  # one per intervention
        for row in rows:
            assert 0.0 <= row["power"] <= 1.0
            assert row["design"] == "concurrent" and row["delta1"] == 0.11

    def test_preset_grid(self):
        spec = preset_power_grid("sim2", replicates=10, bootstrap=20)
        assert spec.n_values == (30, 100, 500)
        assert spec.delta1_values == (0.01, 0.11, 0.21, 0.31, 0.41, 0.51, 0.61)
        assert (spec.sigma_a2, spec.sigma_e2) == (0.05, 0.95)

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            preset_power_grid("sim9")


class TestPresets:
    def test_table_presets(self):
        specs = preset_scenarios("table1", replicates=7, bootstrap=9)
        assert len(specs) == 10
        assert {s.design for s in specs} == {"concurrent"}
        assert {s.T for s in specs} == {5, 11}
        offsets = {s.T: s.offset for s in specs}
        assert offsets == {5: 1, 11: 3}
        specs3 = preset_scenarios("table3")
        assert {s.design for s in specs3} == {"factorial-augmented"}
        assert all(s.regime == "small" for s in specs3)
        assert all(s.regime == "large" for s in preset_scenarios("table4"))

    def test_subsets(self):
        specs = preset_scenarios("table1", outcomes=("A", "B2"), fits=("A",),
                                 horizons=(5,))
        assert len(specs) == 2
        assert all(s.fit_models == ("A",) for s in specs)

    def test_unknown(self):
        with pytest.raises(ValueError):
            preset_scenarios("table9")


class TestCsvSchemas:
    def test_report_schema(self):
        report = run_scenario(tiny_spec(replicates=1, bootstrap=2, fit_models=("A",)))
        text = report_to_csv([report])
        header = text.splitlines()[0]
        assert header == ("scenario_id,design,T,n,outcome_model,fit_model,intervention,"
                          "truth,bias,sd,coverage_pct,ci_length,mean_se,mc_se_bias,"
                          "mc_se_coverage,n_fail")
        assert len(text.strip().splitlines()) == 3

    def test_power_schema(self):
        text = power_to_csv([{"design": "concurrent", "n": 30, "delta1": 0.11,
                              "intervention": 1, "power": 0.5, "mc_se": 0.02,
                              "n_fail": 0}])
        assert text.splitlines()[0] == "design,n,delta1,intervention,power,mc_se"

    def test_replicate_artifacts(self):
        report = run_scenario(tiny_spec(replicates=2, bootstrap=4, fit_models=("A",)))
        text = replicates_to_csv(report)
        lines = text.strip().splitlines()
        assert lines[0] == ("scenario_id,replicate,fit_model,intervention,delta_hat,"
                            "se,ci_low,ci_high,boot_fail,ok")
        assert len(lines) == 1 + 2 * 2
