"""Exposure-time effect curves and their realized averages.

Each intervention k carries a vector of effects delta_k over exposure times
1..T-1 (exposure 0 is control and always contributes 0).  The target of
inference is the plain average of that vector, so every report in this
package measures bias against the *realized* average of the generated curve
rather than a rounded nominal value.

Curve families mirror the outcome models used in the simulation studies:

* constant        -- flat at the target average
* linear          -- one global grid of 2(T-1) equally spaced points shared
                     by the interventions; intervention k takes points
                     (k-1)(T-1) .. k(T-1)-1
* lag-half        -- zero through exposure (T-1)/2, then twice the target
* lag-one         -- zero at exposure 1, then (T-1)/(T-2) times the target
* log             -- logarithmic rise, mean-centered to hit the target
* exp             -- exponential rise, mean-centered to hit the target
* custom          -- any explicit vector

Outcome model "B4" pairs the log shape for intervention 1 with the exp shape
for intervention 2.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EffectCurve",
    "make_curve",
    "realized_estimand",
    "outcome_family_tags",
    "regime_parameters",
    "OUTCOME_FAMILIES",
    "FAMILIES",
]

FAMILIES = ("constant", "linear", "lag-half", "lag-one", "log", "exp", "custom")

#: outcome-model name -> per-intervention family tags (index k-1, cycled)
OUTCOME_FAMILIES = {
    "A": ("constant",),
    "B1": ("linear",),
    "B2": ("lag-half",),
    "B3": ("lag-one",),
    "B4": ("log", "exp"),
}


def make_curve(family: str, T: int, k: int = 1, *, delta: float | None = None,
               low: float | None = None, high: float | None = None,
               values=None) -> np.ndarray:
    """Effect vector over exposure times 1..T-1 for one intervention.

    ``delta`` is the target exposure-time-averaged effect (all families
    except linear/custom); the linear family instead takes the endpoints
    (low, high) of the shared grid and the intervention index k.
    """
    if T < 2:
        raise ValueError("need T >= 2")
    e = np.arange(1, T, dtype=float)

    if family == "custom":
        v = np.asarray(values, dtype=float)
        if v.shape != (T - 1,):
            raise ValueError(f"custom curve must have length {T - 1}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite curve values")
        return v

    if family == "linear":
        if low is None or high is None:
            raise ValueError("linear family needs low and high")
        if not (math.isfinite(low) and math.isfinite(high)) or low > high:
            raise ValueError("need finite low <= high")
        step = (high - low) / (2 * (T - 1) - 1)
        return low + step * (e + (k - 1) * (T - 1) - 1)

    if delta is None or not math.isfinite(delta):
        raise ValueError(f"family {family!r} needs a finite target average")

    if family == "constant":
        return np.full(T - 1, float(delta))
    if family == "lag-half":
        return 2.0 * delta * (e > (T - 1) / 2)
    if family == "lag-one":
        if T < 3:
            raise ValueError("lag families need T >= 3")
        return (T - 1) / (T - 2) * delta * (e > 1)
    if family == "log":
        if T < 3:
            raise ValueError("lag/curved families need T >= 3")
        f = delta * np.log((T - 1) / 2 * (1 + 3 * (e - 1) / (T - 2)))
        return delta + f - f.mean()
    if family == "exp":
        if T < 3:
            raise ValueError("lag/curved families need T >= 3")
        f = delta * np.exp(-(T - 1) / 2 + (0.1 + (T - 1) / 2) / (T - 2) * (e - 1))
        return delta + f - f.mean()

    raise ValueError(f"unknown curve family {family!r}")


def outcome_family_tags(outcome_model: str, m: int) -> list[str]:
    """Per-intervention family tags for a named outcome model."""
    try:
        tags = OUTCOME_FAMILIES[outcome_model]
    except KeyError:
        raise ValueError(f"unknown outcome model {outcome_model!r}") from None
    return [tags[k % len(tags)] for k in range(m)]


@dataclass(frozen=True)
class EffectCurve:
    """Effect vectors for all m interventions of one trial (m x (T-1))."""

    T: int
    family: str
    deltas: np.ndarray  # shape (m, T-1)

    def __post_init__(self):
        d = np.asarray(self.deltas, dtype=float)
        if d.ndim != 2 or d.shape[1] != self.T - 1:
            raise ValueError(f"deltas must be (m, {self.T - 1})")
        object.__setattr__(self, "deltas", d)

    @property
    def m(self) -> int:
        return self.deltas.shape[0]

    def stacked(self) -> np.ndarray:
        """All vectors concatenated intervention-major, length m(T-1)."""
        return self.deltas.reshape(-1)

    def realized(self) -> np.ndarray:
        """Exposure-time-averaged effect per intervention."""
        return self.deltas.mean(axis=1)

    @classmethod
    def from_outcome_model(cls, outcome_model: str, T: int, targets,
                           low: float | None = None,
                           high: float | None = None) -> "EffectCurve":
        """Build the full curve set for a named outcome model.

        targets supplies the per-intervention average for the
        delta-parameterized families; the linear family ignores it and uses
        (low, high).
        """
        targets = np.atleast_1d(np.asarray(targets, dtype=float))
        m = len(targets)
        tags = outcome_family_tags(outcome_model, m)
        rows = []
        for k in range(1, m + 1):
            fam = tags[k - 1]
            if fam == "linear":
                rows.append(make_curve("linear", T, k, low=low, high=high))
            else:
                rows.append(make_curve(fam, T, k, delta=targets[k - 1]))
        return cls(T=T, family=outcome_model, deltas=np.vstack(rows))

    @classmethod
    def custom(cls, T: int, vectors) -> "EffectCurve":
        rows = [make_curve("custom", T, values=v) for v in vectors]
        return cls(T=T, family="custom", deltas=np.vstack(rows))

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps({
            "T": self.T,
            "family": self.family,
            "deltas": self.deltas.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "EffectCurve":
        doc = json.loads(text)
        return cls(T=int(doc["T"]), family=doc["family"],
                   deltas=np.asarray(doc["deltas"], dtype=float))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["intervention", "exposure", "delta"])
        for k in range(self.m):
            for e in range(1, self.T):
                w.writerow([k + 1, e, repr(float(self.deltas[k, e - 1]))])
        return buf.getvalue()


def realized_estimand(curve: EffectCurve) -> np.ndarray:
    """Average effect over exposure times 1..T-1, per intervention."""
    return curve.realized()


# nominal effect-size regimes used by the bundled study presets; the linear
# family is parameterized by its grid endpoints, every other family by the
# per-intervention averages
_REGIMES = {
    ("small", 5): {"targets": (0.10, 0.14), "low": 0.08, "high": 0.15},
    ("small", 11): {"targets": (0.10, 0.13), "low": 0.08, "high": 0.15},
    ("large", 5): {"targets": (0.28, 0.40), "low": 0.24, "high": 0.45},
    ("large", 11): {"targets": (0.29, 0.40), "low": 0.24, "high": 0.45},
}


def regime_parameters(regime: str, T: int) -> dict:
    """Effect-size parameters (targets, linear grid endpoints) for a named
    regime; defined only for the preset horizons T=5 and T=11."""
    try:
        return dict(_REGIMES[(regime, T)])
    except KeyError:
        raise ValueError(f"no regime {regime!r} at T={T}; use explicit targets") from None
