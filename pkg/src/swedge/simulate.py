"""Individual-level trial data generation and cluster-period aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .curves import EffectCurve
from .design import DesignLayout, treatment_matrices

__all__ = [
    "SimulationConfig",
    "TrialDataset",
    "CellStats",
    "simulate",
    "cluster_period_means",
    "dataset_to_csv",
    "dataset_from_csv",
]


@dataclass(frozen=True)
class SimulationConfig:
    """Everything needed to draw one trial: layout, true effect curves,
    period effects beta (length T), variance components, cluster-period size
    n (scalar or per-cell I x T array), and a 64-bit seed."""

    layout: DesignLayout
    curve: EffectCurve
    beta: np.ndarray
    sigma_a2: float
    sigma_e2: float
    n: int | np.ndarray
    seed: int

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.shape != (self.layout.T,):
            raise ValueError(f"beta must have length T={self.layout.T}")
        object.__setattr__(self, "beta", beta)
        if self.curve.T != self.layout.T or self.curve.m != self.layout.m:
            raise ValueError("curve dimensions disagree with layout")
        if self.sigma_a2 < 0 or self.sigma_e2 <= 0:
            raise ValueError("need sigma_a2 >= 0 and sigma_e2 > 0")
        object.__setattr__(self, "n", self._cell_sizes())

    def _cell_sizes(self) -> np.ndarray:
        I, T = self.layout.I, self.layout.T
        n = np.asarray(self.n, dtype=int)
        if n.ndim == 0:
            n = np.full((I, T), int(n))
        if n.shape != (I, T) or (n < 1).any():
            raise ValueError("cell sizes must be a positive scalar or I x T array")
        return n


@dataclass(frozen=True)
class TrialDataset:
    """Long-format outcomes, one row per individual, sorted by
    (cluster, period, individual) so each cluster-period is contiguous."""

    T: int
    m: int
    cluster: np.ndarray
    period: np.ndarray
    individual: np.ndarray
    x: np.ndarray     # (N, m) treatment indicators
    expo: np.ndarray  # (N, m) exposure times
    y: np.ndarray

    @property
    def I(self) -> int:
        return int(self.cluster.max())

    @property
    def N(self) -> int:
        return self.y.shape[0]

    def cell_sizes(self) -> np.ndarray:
        sizes = np.zeros((self.I, self.T), dtype=int)
        np.add.at(sizes, (self.cluster - 1, self.period - 1), 1)
        return sizes


@dataclass(frozen=True)
class CellStats:
    """Cluster-period summary: means, sizes, and pooled within-cell sums of
    squares (the sufficient statistics for all models in this package)."""

    ybar: np.ndarray  # (I, T)
    n: np.ndarray     # (I, T)
    within_ss: float  # pooled over all cells
    within_ss_cells: np.ndarray = field(repr=False, default=None)

    @property
    def I(self) -> int:
        return self.ybar.shape[0]

    @property
    def T(self) -> int:
        return self.ybar.shape[1]

    @property
    def N(self) -> int:
        return int(self.n.sum())

    def rows(self):
        """Flat (cluster, period, mean, n, within_ss) view, cluster-major."""
        for i in range(self.I):
            for j in range(self.T):
                wss = self.within_ss_cells[i, j] if self.within_ss_cells is not None else np.nan
                yield (i + 1, j + 1, self.ybar[i, j], int(self.n[i, j]), wss)


def simulate(config: SimulationConfig) -> TrialDataset:
    """Draw one trial: y = beta_j + sum_k x_kij delta_{k,e} + alpha_i + eps.

    The same seed always reproduces the same dataset bit for bit.
    """
    layout, curve = config.layout, config.curve
    I, T, m = layout.I, layout.T, layout.m
    nij = config.n
    gen = _rng.stream(config.seed, "trial")

    mats = treatment_matrices(layout)
    Z = np.stack([tm.Z for tm in mats])          # (I, T, m(T-1))
    cell_mean = config.beta[None, :] + Z @ curve.stacked()   # (I, T)

    alpha = _rng.normal(gen, np.sqrt(config.sigma_a2), I)
    counts = nij.reshape(-1)
    N = int(counts.sum())
    eps = _rng.normal(gen, np.sqrt(config.sigma_e2), N)

    cl = np.repeat(np.arange(1, I + 1), nij.sum(axis=1))
    pr = np.concatenate([np.repeat(np.arange(1, T + 1), nij[i]) for i in range(I)])
    ind = np.concatenate([np.arange(1, c + 1) for c in counts])

    mu_rows = np.repeat(cell_mean.reshape(-1), counts)
    alpha_rows = np.repeat(alpha, nij.sum(axis=1))
    y = mu_rows + alpha_rows + eps

    x_cells = np.stack([tm.X for tm in mats]).reshape(I * T, m)
    e_cells = np.zeros((I * T, m), dtype=int)
    for k in range(1, m + 1):
        for i in range(1, I + 1):
            s = layout.starts[i - 1][k - 1]
            if s is None:
                continue
            j = np.arange(s, T + 1)
            e_cells[(i - 1) * T + (j - 1), k - 1] = j - s + 1
    x_rows = np.repeat(x_cells.astype(np.int8), counts, axis=0)
    e_rows = np.repeat(e_cells, counts, axis=0)

    return TrialDataset(T=T, m=m, cluster=cl.astype(np.int32), period=pr.astype(np.int32),
                        individual=ind.astype(np.int32), x=x_rows, expo=e_rows, y=y)


def cluster_period_means(dataset: TrialDataset) -> CellStats:
    """Exact cell means and pooled within-cell sums of squares."""
    if dataset.N == 0:
        raise ValueError("empty dataset")
    I, T = dataset.I, dataset.T
    nij = dataset.cell_sizes()
    if (nij < 1).any():
        raise ValueError("every cluster-period needs at least one observation")
    sums = np.zeros((I, T))
    np.add.at(sums, (dataset.cluster - 1, dataset.period - 1), dataset.y)
    ybar = sums / nij
    dev = dataset.y - ybar[dataset.cluster - 1, dataset.period - 1]
    cells = np.zeros((I, T))
    np.add.at(cells, (dataset.cluster - 1, dataset.period - 1), dev * dev)
    return CellStats(ybar=ybar, n=nij, within_ss=float(cells.sum()), within_ss_cells=cells)


def cell_value_groups(dataset: TrialDataset) -> list[np.ndarray]:
    """Outcome values per cluster-period, cell-major order (for resampling).

    Relies on the dataset row ordering contract (cluster, period, individual).
    """
    nij = dataset.cell_sizes().reshape(-1)
    offsets = np.concatenate([[0], np.cumsum(nij)])
    order_ok = np.all(np.diff(dataset.cluster.astype(np.int64) * (dataset.T + 1) + dataset.period) >= 0)
    y = dataset.y
    if not order_ok:
        idx = np.lexsort((dataset.individual, dataset.period, dataset.cluster))
        y = y[idx]
    return [y[offsets[c]:offsets[c + 1]] for c in range(len(nij))]


# ---------------------------------------------------------------------------
# CSV round trip: cluster,period,individual,x1..xm,e1..em,y

def dataset_to_csv(dataset: TrialDataset) -> str:
    m = dataset.m
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cluster", "period", "individual"]
               + [f"x{k}" for k in range(1, m + 1)]
               + [f"e{k}" for k in range(1, m + 1)] + ["y"])
    for r in range(dataset.N):
        w.writerow([dataset.cluster[r], dataset.period[r], dataset.individual[r]]
                   + [int(v) for v in dataset.x[r]]
                   + [int(v) for v in dataset.expo[r]]
                   + [repr(float(dataset.y[r]))])
    return buf.getvalue()


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


def dataset_from_csv(text: str) -> TrialDataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetFormatError("empty file", 1) from None
    required_prefix = ["cluster", "period", "individual"]
    if header[:3] != required_prefix or header[-1] != "y":
        raise DatasetFormatError(
            f"expected columns cluster,period,individual,x1..xm,e1..em,y; got {header}", 1)
    mid = header[3:-1]
    m = len(mid) // 2
    if len(mid) != 2 * m or mid != [f"x{k}" for k in range(1, m + 1)] + [f"e{k}" for k in range(1, m + 1)]:
        raise DatasetFormatError(f"malformed treatment columns {mid}", 1)
    cl, pr, ind, xs, es, ys = [], [], [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4 + 2 * m:
            raise DatasetFormatError(f"expected {4 + 2 * m} fields, got {len(row)}", lineno)
        try:
            cl.append(int(row[0])); pr.append(int(row[1])); ind.append(int(row[2]))
            xs.append([int(v) for v in row[3:3 + m]])
            es.append([int(v) for v in row[3 + m:3 + 2 * m]])
            ys.append(float(row[-1]))
        except ValueError as exc:
            raise DatasetFormatError(str(exc), lineno) from None
    if not ys:
        raise DatasetFormatError("no data rows", 2)
    cluster = np.asarray(cl, dtype=np.int32)
    period = np.asarray(pr, dtype=np.int32)
    T = int(period.max())
    ds = TrialDataset(T=T, m=m, cluster=cluster, period=period,
                      individual=np.asarray(ind, dtype=np.int32),
                      x=np.asarray(xs, dtype=np.int8), expo=np.asarray(es, dtype=int),
                      y=np.asarray(ys, dtype=float))
    idx = np.lexsort((ds.individual, ds.period, ds.cluster))
    return TrialDataset(T=T, m=m, cluster=cluster[idx], period=period[idx],
                        individual=ds.individual[idx], x=ds.x[idx], expo=ds.expo[idx],
                        y=ds.y[idx])
