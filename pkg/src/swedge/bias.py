"""Expectation of the constant-effect GLS estimator under time-varying truth.

Fitting a constant-per-intervention effect by GLS when the real effects vary
with exposure time yields an estimator whose expectation is a linear map of
the stacked true effect vectors: E = W delta for an m x m(T-1) weight matrix.
This module computes that matrix three ways:

* numerically for any layout via the partitioned normal equations,
* in closed form for concurrent layouts (Kronecker structure in c, d, g and
  the per-exposure weight vectors r, v),
* via the single-intervention weight reduction for m = 1.

All three depend on the variance components only through the scalar
b = sigma_a^2 / (T sigma_a^2 + sigma_e^2 / n).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .curves import EffectCurve
from .design import DesignLayout, treatment_matrices

__all__ = [
    "DegenerateWeights",
    "WeightMatrix",
    "design_scalar",
    "weight_matrix",
    "weight_matrix_concurrent",
    "single_intervention_weights",
    "expected_constant_estimate",
    "bias_curve_table",
]


class DegenerateWeights(ValueError):
    """Raised when the weight-matrix system is singular or a closed-form
    denominator vanishes."""


@dataclass(frozen=True)
class WeightMatrix:
    """m x m(T-1) map from stacked true effects to the expected constant
    estimates, with a tag recording how it was obtained."""

    matrix: np.ndarray
    T: int
    m: int
    source: str  # general | concurrent-closed-form | factorial-block

    def expected(self, stacked_delta: np.ndarray) -> np.ndarray:
        d = np.asarray(stacked_delta, dtype=float).reshape(-1)
        if d.shape[0] != self.m * (self.T - 1):
            raise ValueError(f"need {self.m * (self.T - 1)} stacked effects")
        return self.matrix @ d

    def block(self, k_row: int, k_col: int) -> np.ndarray:
        q = self.T - 1
        return self.matrix[k_row - 1, (k_col - 1) * q:k_col * q]

    def to_json(self) -> str:
        import json
        return json.dumps({"T": self.T, "m": self.m, "source": self.source,
                           "matrix": self.matrix.tolist()})


def design_scalar(sigma_a2, sigma_e2: float | None = None, n: int = 1, T: int = 2) -> float:
    """b = sigma_a^2 / (T sigma_a^2 + sigma_e^2 / n), in [0, 1/T).

    Accepts either the two variances or any object carrying sigma_a2 and
    sigma_e2 attributes as the first argument.
    """
    if sigma_e2 is None:
        sigma_a2, sigma_e2 = sigma_a2.sigma_a2, sigma_a2.sigma_e2
    if sigma_e2 <= 0:
        raise ValueError("residual variance must be positive")
    if sigma_a2 < 0 or n < 1:
        raise ValueError("need sigma_a2 >= 0 and n >= 1")
    return sigma_a2 / (T * sigma_a2 + sigma_e2 / n)


def _inv_correlation(T: int, b: float) -> np.ndarray:
    # inverse of the cell-mean covariance up to scale: (J b-weighted) I - b J
    return np.eye(T) - b * np.ones((T, T))


def weight_matrix(layout: DesignLayout, *, b: float | None = None,
                  sigma_a2: float | None = None, sigma_e2: float | None = None,
                  n: int | None = None) -> WeightMatrix:
    """Weight matrix for any layout from the partitioned GLS normal equations.

    Supply either b directly or (sigma_a2, sigma_e2, n); the cluster-period
    size must be constant for the closed aggregation used here.
    """
    if b is None:
        if sigma_a2 is None or sigma_e2 is None or n is None:
            raise ValueError("need b or (sigma_a2, sigma_e2, n)")
        b = design_scalar(sigma_a2, sigma_e2, n, layout.T)
    T, m = layout.T, layout.m
    Sinv = _inv_correlation(T, b)
    mats = treatment_matrices(layout)
    Xs = np.stack([tm.X for tm in mats])
    Zs = np.stack([tm.Z for tm in mats])
    WX = np.einsum("itk,tu,iul->kl", Xs, Sinv, Xs)
    WXZ = np.einsum("itk,tu,iul->kl", Xs, Sinv, Zs)
    S = np.einsum("itk,tu->ku", Xs, Sinv)
    A = WX - S @ Xs.mean(axis=0)
    B = WXZ - S @ Zs.mean(axis=0)
    try:
        H = np.linalg.solve(A, B)
    except np.linalg.LinAlgError as exc:
        raise DegenerateWeights(
            f"singular normal equations for kind={layout.kind} T={T} m={m} b={b}: "
            "constant-effect model not identifiable on this layout") from exc
    source = "factorial-block" if layout.kind.startswith("factorial") else "general"
    return WeightMatrix(matrix=H, T=T, m=m, source=source)


def concurrent_constants(T: int, m: int, b: float) -> tuple[float, float, float]:
    """The scalars (c, d, g) of the concurrent closed form; g = c - m d."""
    c = T * (T - 1) * (3 + b - 2 * b * T) / 6.0
    d = T * (4 * T - 2 - 3 * b * T * (T - 1)) / (12.0 * m)
    g = T * (T - 2) * (2 + b - b * T) / 12.0
    return c, d, g


def concurrent_weight_vectors(T: int, m: int, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-exposure weight vectors (r, v) of the concurrent closed form."""
    j = np.arange(1, T, dtype=float)
    r = (T - j) * (1 + b * (1 - T - j) / 2)
    v = (T - j) * (1 - b * T + j / (T - 1)) / (2 * m)
    return r, v


def weight_matrix_concurrent(T: int, m: int, b: float) -> WeightMatrix:
    """Closed-form weight matrix for the concurrent layout:
    [(1/c)(I_m + (d/g) J_m)] (x) r' - (1/g) J_m (x) v'."""
    if T < 3:
        raise DegenerateWeights("closed form needs T >= 3")
    c, d, g = concurrent_constants(T, m, b)
    scale = max(abs(c), abs(d), 1.0)
    if abs(g) < 1e-12 * scale or abs(c) < 1e-12 * scale:
        raise DegenerateWeights(f"degenerate closed form at T={T}, b={b}: c={c}, g={g}")
    r, v = concurrent_weight_vectors(T, m, b)
    Im, Jm = np.eye(m), np.ones((m, m))
    H = np.kron((Im + (d / g) * Jm) / c, r[None, :]) - np.kron(Jm / g, v[None, :])
    return WeightMatrix(matrix=H, T=T, m=m, source="concurrent-closed-form")


def single_intervention_weights(T: int, b: float) -> tuple[np.ndarray, float]:
    """Per-exposure weights w and denominator for the m=1 reduction:
    E = 6 sum_j w_j delta_j / denom with denom = T(T-1)(T-2)(2+b-bT)."""
    if T < 3:
        raise ValueError("single-intervention weights need T >= 3")
    j = np.arange(1, T, dtype=float)
    w = (T - j) * ((b - 1 - b * T) * j + (1 + b) * (T - 1))
    denom = T * (T - 1) * (T - 2) * (2 + b - b * T)
    return w, denom


def expected_constant_estimate(weights: WeightMatrix, curve: EffectCurve) -> tuple[np.ndarray, np.ndarray]:
    """Expected constant-model estimates E = W delta and their bias against
    the realized exposure-time-averaged effects."""
    if curve.m != weights.m or curve.T != weights.T:
        raise ValueError("curve and weight matrix dimensions disagree")
    expected = weights.expected(curve.stacked())
    bias = expected - curve.realized()
    return expected, bias


def bias_curve_table(layouts: dict[str, DesignLayout], b_values, curves: dict[str, EffectCurve]) -> list[dict]:
    """Rows (design, family, b, intervention, Delta_true, E_hat, bias) over a
    grid of designs, design scalars, and effect curves."""
    rows = []
    for design_name, layout in layouts.items():
        for b in b_values:
            W = weight_matrix(layout, b=float(b))
            for family, curve in curves.items():
                expected, bias = expected_constant_estimate(W, curve)
                truth = curve.realized()
                for k in range(curve.m):
                    rows.append({
                        "design": design_name,
                        "family": family,
                        "b": float(b),
                        "intervention": k + 1,
                        "delta_true": float(truth[k]),
                        "expected": float(expected[k]),
                        "bias": float(bias[k]),
                    })
    return rows


def bias_table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(
        buf, ["design", "family", "b", "intervention", "delta_true", "expected", "bias"],
        lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
