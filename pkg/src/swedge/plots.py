"""SVG rendering of true-versus-expected effect curves."""

from __future__ import annotations

import numpy as np

from .bias import expected_constant_estimate, weight_matrix
from .curves import EffectCurve
from .design import DesignLayout


def bias_curve_svg(layout: DesignLayout, b: float, curves: dict[str, EffectCurve],
                   path: str) -> None:
    """One panel per curve family: the true exposure-time effects as solid
    lines, the constant-model expectation as dashed horizontals."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    W = weight_matrix(layout, b=b)
    n = len(curves)
    ncol = min(n, 2)
    nrow = (n + ncol - 1) // ncol
    fig, axes = plt.subplots(nrow, ncol, figsize=(5.5 * ncol, 3.6 * nrow), squeeze=False)
    exposures = np.arange(1, layout.T)
    colors = ("tab:blue", "tab:orange", "tab:green")
    for ax, (family, curve) in zip(axes.ravel(), curves.items()):
        expected, _ = expected_constant_estimate(W, curve)
        for k in range(curve.m):
            col = colors[k % len(colors)]
            ax.plot(exposures, curve.deltas[k], "-o", ms=3, color=col,
                    label=f"true, intervention {k + 1}")
            ax.axhline(expected[k], ls="--", color=col,
                       label=f"constant-model expectation {k + 1}")
        ax.set_title(f"{family} (b={b:g})")
        ax.set_xlabel("exposure time")
        ax.set_ylabel("effect")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    for ax in axes.ravel()[n:]:
        ax.set_visible(False)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
