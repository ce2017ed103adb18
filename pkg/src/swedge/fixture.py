"""Synthetic two-intervention trial mimicking the scale of a real ICU
stepped-wedge study: 10 clusters, 10 periods, length-of-stay-like outcomes,
uneven cluster-period sizes, and no true treatment effect.

The real trial data are not public, so analyses in documentation and tests
run against draws from this generator (bundled copies live in
``swedge/data``).
"""

from __future__ import annotations

import importlib.resources

import numpy as np

from .curves import EffectCurve
from .design import DesignLayout, layout_from_json
from .simulate import SimulationConfig, TrialDataset, dataset_from_csv, simulate

__all__ = ["fixture_layout", "make_fixture", "bundled_fixture"]

FIXTURE_SEED = 771177
TRUE_EFFECTS = (0.0, 0.0)
# low between-cluster variance keeps the within-cell bootstrap honest: with
# only ten clusters, a large intercept variance would add estimator noise
# that within-cluster-period resampling cannot see
SIGMA_A2 = 0.02
SIGMA_E2 = 9.0


def fixture_layout() -> DesignLayout:
    """Staggered two-intervention rollout over 10 clusters and 10 periods:
    five clusters adopt intervention 1 first, five adopt intervention 2
    first, with the second intervention following two periods later."""
    starts = []
    for s in range(5):
        first = 2 + 2 * s if 2 + 2 * s <= 10 else None
        second = 4 + 2 * s if 4 + 2 * s <= 10 else None
        starts.append((first, second))
        starts.append((second, first))
    return DesignLayout(kind="custom", T=10, m=2, starts=tuple(starts))


def _cell_sizes(layout: DesignLayout) -> np.ndarray:
    # deterministic unevenness between 25 and 44 per cluster-period
    I, T = layout.I, layout.T
    i = np.arange(I)[:, None]
    j = np.arange(T)[None, :]
    return 25 + (7 * i + 5 * j + (i * j) % 11) % 20


def make_fixture(seed: int = FIXTURE_SEED) -> tuple[TrialDataset, DesignLayout]:
    """One draw of the synthetic trial (zero treatment effect, mild secular
    trend in the period means)."""
    layout = fixture_layout()
    curve = EffectCurve.custom(layout.T, [np.full(layout.T - 1, TRUE_EFFECTS[0]),
                                          np.full(layout.T - 1, TRUE_EFFECTS[1])])
    beta = 8.0 + 0.8 * np.sin(np.linspace(0.0, 2.2, layout.T))
    config = SimulationConfig(layout=layout, curve=curve, beta=beta,
                              sigma_a2=SIGMA_A2, sigma_e2=SIGMA_E2,
                              n=_cell_sizes(layout), seed=seed)
    return simulate(config), layout


def bundled_fixture() -> tuple[TrialDataset, DesignLayout]:
    """The pre-generated copy shipped with the package."""
    pkg = importlib.resources.files("swedge") / "data"
    dataset = dataset_from_csv((pkg / "synthetic_trial.csv").read_text())
    layout = layout_from_json((pkg / "synthetic_trial_layout.json").read_text())
    return dataset, layout
