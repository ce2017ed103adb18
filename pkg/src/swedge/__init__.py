"""Multi-intervention stepped-wedge trials: design construction, exact bias
analysis of the constant-effect estimator, mixed-model fitting, and
reproducible simulation studies."""

from .bias import (DegenerateWeights, WeightMatrix, bias_curve_table, design_scalar,
                   expected_constant_estimate, single_intervention_weights,
                   weight_matrix, weight_matrix_concurrent)
from .curves import EffectCurve, make_curve, realized_estimand, regime_parameters
from .design import (DesignError, DesignLayout, TreatmentMatrices, ascii_grid,
                     build_layout, check_identifiability, exposure_time,
                     layout_from_json, layout_to_json, treatment_matrices)
from .fit import (BootstrapResult, FitError, FitResult, IdentifiabilityError,
                  VarianceComponents, bootstrap_ci, estimand_se, fit_gls, fit_reml,
                  restricted_loglik)
from .fixture import bundled_fixture, fixture_layout, make_fixture
from .simulate import (CellStats, SimulationConfig, TrialDataset, cluster_period_means,
                       dataset_from_csv, dataset_to_csv, simulate)
from .study import (PowerSpec, ScenarioSpec, StudyReport, StudyRow, mc_standard_errors,
                    preset_power_grid, preset_scenarios, run_power, run_scenario)

__version__ = "0.1.0"
