"""Stepped-wedge layouts with one or more interventions.

A layout records, for every cluster and every intervention, the first period
in which that intervention is switched on (or ``None`` if the cluster never
receives it).  Periods are numbered 1..T and all clusters start under
control, so the earliest admissible start is period 2.  Once on, an
intervention stays on through period T.

Built-in constructors cover the standard single-intervention wedge, the
concurrent multi-intervention wedge (each cluster gets exactly one
intervention), the supplementation wedge (a second intervention layered on
top of the first), and the factorial wedge (both interventions introduced in
both orders with a fixed stagger).  Arbitrary start maps are accepted as
``custom`` layouts for analysing external trials.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "DesignLayout",
    "TreatmentMatrices",
    "IdentifiabilityReport",
    "build_layout",
    "exposure_time",
    "treatment_matrices",
    "check_identifiability",
    "layout_to_json",
    "layout_from_json",
    "ascii_grid",
]

KINDS = ("single", "concurrent", "supplementation", "factorial", "factorial-augmented", "custom")


class DesignError(ValueError):
    """Raised for design parameters that cannot produce a valid layout."""


@dataclass(frozen=True)
class DesignLayout:
    """Cluster-by-period treatment assignment for m interventions.

    ``starts[i][k]`` is the 1-based first treated period of intervention
    k+1 in cluster i+1, or ``None`` if the cluster never receives it.
    """

    kind: str
    T: int
    m: int
    starts: tuple[tuple[int | None, ...], ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DesignError(f"unknown layout kind {self.kind!r}")
        if self.T < 2:
            raise DesignError("need at least 2 periods")
        if self.m < 1:
            raise DesignError("need at least 1 intervention")
        for row in self.starts:
            if len(row) != self.m:
                raise DesignError("each cluster needs one start per intervention")
            for s in row:
                if s is not None and not (2 <= s <= self.T):
                    raise DesignError(f"start period {s} outside 2..{self.T}")

    @property
    def I(self) -> int:
        return len(self.starts)

    def x(self, k: int, i: int, j: int) -> int:
        """Treatment indicator for intervention k, cluster i, period j (all 1-based)."""
        s = self.starts[i - 1][k - 1]
        return int(s is not None and j >= s)

    def replicate(self, times: int) -> "DesignLayout":
        """Repeat every sequence ``times`` times (clusters per sequence)."""
        if times < 1:
            raise DesignError("replication factor must be >= 1")
        if times == 1:
            return self
        rows = tuple(row for row in self.starts for _ in range(times))
        return DesignLayout(self.kind, self.T, self.m, rows)


@dataclass(frozen=True)
class TreatmentMatrices:
    """Per-cluster design blocks: X is T x m, Z is T x m(T-1).

    Row j of the k-th block of Z has a single 1 in the column of the current
    exposure time, and is all-zero while the cluster is untreated; column
    sums of block k recover the treatment indicator column X[:, k].
    """

    X: np.ndarray
    Z: np.ndarray


@dataclass
class IdentifiabilityReport:
    identifiable: bool
    model: str
    rank: int
    n_columns: int
    deficient_combinations: list[str] = field(default_factory=list)


def build_layout(kind: str, T: int, m: int = 1, *, offset: int = 1,
                 augment: bool = False, replicates: int = 1,
                 starts: Sequence[Sequence[int | None]] | None = None) -> DesignLayout:
    """Construct one of the built-in layouts (or wrap an explicit start map).

    offset applies to factorial layouts: the second intervention of a cluster
    begins ``offset`` periods after its first.  ``augment`` appends, for each
    intervention, one extra cluster that adopts only that intervention in the
    final period.
    """
    if kind == "custom":
        if starts is None:
            raise DesignError("custom layouts need an explicit start map")
        rows = tuple(tuple(row) for row in starts)
        return DesignLayout("custom", T, m, rows).replicate(replicates)

    if kind == "single":
        if m != 1:
            raise DesignError("single-intervention layout requires m=1")
        rows = tuple((s + 1,) for s in range(1, T))
        return DesignLayout("single", T, m, rows).replicate(replicates)

    if kind == "concurrent":
        if T < 3 and m > 1:
            raise DesignError("concurrent layout with several interventions needs T >= 3")
        rows = []
        for k in range(1, m + 1):
            for l in range(1, T):
                row: list[int | None] = [None] * m
                row[k - 1] = l + 1
                rows.append(tuple(row))
        return DesignLayout("concurrent", T, m, tuple(rows)).replicate(replicates)

    if kind == "supplementation":
        if m != 2:
            raise DesignError("supplementation layout is defined for m=2")
        if T < 3:
            raise DesignError("supplementation layout needs T >= 3")
        rows = tuple((s + 1, s + 2) for s in range(1, T - 1))
        return DesignLayout("supplementation", T, 2, rows).replicate(replicates)

    if kind in ("factorial", "factorial-augmented"):
        if m != 2:
            raise DesignError("factorial layout is defined for m=2")
        if T < 3:
            raise DesignError("factorial layout needs T >= 3")
        if offset < 1:
            raise DesignError("factorial offset must be >= 1")
        if 2 + offset > T:
            raise DesignError(
                f"offset {offset} pushes the second intervention past period {T} "
                "in the earliest sequence")
        rows = []
        for s in range(1, T - 1):
            first = s + 1
            second: int | None = first + offset
            if second > T:
                second = None
            rows.append((first, second))
            rows.append((second, first))
        augmented = augment or kind == "factorial-augmented"
        # At T=3 the two full sequences alone leave the constant-effect fit
        # rank-deficient, so the terminal single-intervention pair is part of
        # the base factorial layout there.
        if augmented or T == 3:
            rows.append((T, None))
            rows.append((None, T))
        if T == 3:
            # canonical ordering: both-intervention sequences bracket the
            # terminal single-intervention pair
            rows = [rows[0], rows[2], rows[3], rows[1]]
        kind_out = "factorial-augmented" if augmented else "factorial"
        return DesignLayout(kind_out, T, 2, tuple(rows)).replicate(replicates)

    raise DesignError(f"unknown layout kind {kind!r}")


def exposure_time(layout: DesignLayout, k: int, i: int, j: int) -> int:
    """Cumulative number of periods cluster i has spent under intervention k
    by period j; equals the running sum of the treatment indicator."""
    if not (1 <= k <= layout.m and 1 <= i <= layout.I and 1 <= j <= layout.T):
        raise IndexError("exposure_time indices out of range")
    s = layout.starts[i - 1][k - 1]
    if s is None or j < s:
        return 0
    return j - s + 1


def treatment_matrices(layout: DesignLayout) -> list[TreatmentMatrices]:
    """Per-cluster treatment indicator matrix X and exposure indicator matrix Z."""
    T, m = layout.T, layout.m
    out = []
    for i in range(1, layout.I + 1):
        X = np.zeros((T, m))
        Z = np.zeros((T, m * (T - 1)))
        for k in range(1, m + 1):
            s = layout.starts[i - 1][k - 1]
            if s is None:
                continue
            for j in range(s, T + 1):
                X[j - 1, k - 1] = 1.0
                e = j - s + 1
                if e <= T - 1:
                    Z[j - 1, (k - 1) * (T - 1) + (e - 1)] = 1.0
        out.append(TreatmentMatrices(X=X, Z=Z))
    return out


def stacked_design(layout: DesignLayout, model: str) -> np.ndarray:
    """Fixed-effect design over all cluster-periods: period indicators
    followed by the treatment columns ('A') or exposure columns ('B')."""
    T = layout.T
    mats = treatment_matrices(layout)
    blocks = []
    eye = np.eye(T)
    for tm in mats:
        eff = tm.X if model == "A" else tm.Z
        blocks.append(np.hstack([eye, eff]))
    return np.vstack(blocks)


def effect_labels(layout: DesignLayout, model: str) -> list[str]:
    if model == "A":
        return [f"theta[{k}]" for k in range(1, layout.m + 1)]
    return [f"delta[{k},{e}]" for k in range(1, layout.m + 1) for e in range(1, layout.T)]


def check_identifiability(layout: DesignLayout, model: str) -> IdentifiabilityReport:
    """Column-rank check of the stacked fixed-effect design.

    Reports which treatment-effect coordinates are not estimable: a
    coordinate is estimable iff its unit vector lies in the row space of the
    design, tested against an orthonormal basis from the SVD.
    """
    if model not in ("A", "B"):
        raise ValueError("model must be 'A' or 'B'")
    A = stacked_design(layout, model)
    T = layout.T
    _, sv, vt = np.linalg.svd(A, full_matrices=False)
    tol = sv.max() * max(A.shape) * np.finfo(float).eps
    rank = int((sv > tol).sum())
    basis = vt[:rank]  # orthonormal rows spanning the row space
    labels = effect_labels(layout, model)
    deficient = []
    for idx, label in enumerate(labels):
        e = np.zeros(A.shape[1])
        e[T + idx] = 1.0
        resid = e - basis.T @ (basis @ e)
        if np.linalg.norm(resid) > 1e-8:
            deficient.append(label)
    return IdentifiabilityReport(
        identifiable=not deficient,
        model=model,
        rank=rank,
        n_columns=A.shape[1],
        deficient_combinations=deficient,
    )


# ---------------------------------------------------------------------------
# serialization and display

def layout_to_json(layout: DesignLayout) -> str:
    doc = {
        "kind": layout.kind,
        "T": layout.T,
        "m": layout.m,
        "clusters": [
            {"id": i + 1, "starts": list(layout.starts[i])}
            for i in range(layout.I)
        ],
    }
    return json.dumps(doc, indent=2)


def layout_from_json(text: str) -> DesignLayout:
    doc = json.loads(text)
    try:
        kind = doc["kind"]
        T = int(doc["T"])
        m = int(doc["m"])
        clusters = doc["clusters"]
    except (KeyError, TypeError) as exc:
        raise DesignError(f"malformed layout document: {exc}") from exc
    rows = []
    for c in sorted(clusters, key=lambda c: c["id"]):
        row = tuple(None if s is None else int(s) for s in c["starts"])
        rows.append(row)
    return DesignLayout(kind, T, m, tuple(rows))


def ascii_grid(layout: DesignLayout) -> str:
    """Render the layout as a grid of cell labels: '0' under control,
    otherwise the additive exposure labels like 'd1,2+d2,1'."""
    header = ["      "] + [f"j={j}" for j in range(1, layout.T + 1)]
    rows = []
    width = max(10, 3 + 4 * layout.m)
    for i in range(1, layout.I + 1):
        cells = []
        for j in range(1, layout.T + 1):
            parts = [
                f"d{k},{exposure_time(layout, k, i, j)}"
                for k in range(1, layout.m + 1)
                if exposure_time(layout, k, i, j) > 0
            ]
            cells.append("+".join(parts) if parts else "0")
        rows.append([f"i={i:<4d}"] + cells)
    widths = [max(width, *(len(r[c]) for r in rows + [header])) for c in range(len(header))]
    lines = []
    for r in [header] + rows:
        lines.append(" ".join(val.center(w) for val, w in zip(r, widths)))
    return "\n".join(lines)
