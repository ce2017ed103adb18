"""Mixed-model fitting for multi-intervention stepped-wedge trials.

Three working models share one computational core:

* model "A": one constant effect per intervention,
* model "B": one fixed effect per (intervention, exposure time),
* model "C": per-intervention mean effect plus an exchangeable random
  deviation per exposure time, shared across clusters.

Cluster-period means together with the pooled within-cell sum of squares are
sufficient for every fixed effect and variance component, so all fitting
happens on the aggregated system.  The mean-level covariance is diagonal
plus a low-rank term (cluster intercepts, and for model C the exposure-time
deviations), handled by a Woodbury factorisation; the residual variance is
profiled out of the (restricted) likelihood in closed form, leaving a
1-parameter search for models A/B and an (m+1)-parameter search for model C,
carried out on the log scale with a hard floor standing in for the usual
"singular fit" boundary.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize, minimize_scalar

from . import rng as _rng
from .design import DesignLayout, check_identifiability, treatment_matrices
from .simulate import CellStats, TrialDataset, cell_value_groups, cluster_period_means


def _tri_solve(L: np.ndarray, b: np.ndarray, lower: bool = True) -> np.ndarray:
    return solve_triangular(L, b, lower=lower, check_finite=False)

__all__ = [
    "VarianceComponents",
    "FitResult",
    "BootstrapResult",
    "FitError",
    "IdentifiabilityError",
    "fit_gls",
    "fit_reml",
    "restricted_loglik",
    "estimand_se",
    "bootstrap_ci",
]

LAMBDA_FLOOR = 1e-10     # natural-scale lower bound for variance ratios
LOG_FLOOR = math.log(LAMBDA_FLOOR)
LOG_CEIL = math.log(1e8)
MAX_ITER = 500
REL_OBJ_TOL = 1e-10
GRAD_TOL = 1e-6
_RESTART_SHIFTS = (2.0, -2.0, 4.0)  # deterministic jitter for multi-start


class FitError(RuntimeError):
    """Numerical failure while fitting (singular system, non-convergence)."""


class IdentifiabilityError(ValueError):
    """The requested model is not identifiable on the given layout."""


@dataclass(frozen=True)
class VarianceComponents:
    """Between-cluster and residual variances, plus per-intervention
    deviation variances for model C."""

    sigma_a2: float
    sigma_e2: float
    sigma_k2: tuple[float, ...] = ()

    def __post_init__(self):
        if self.sigma_e2 <= 0:
            raise ValueError("residual variance must be positive")
        if self.sigma_a2 < 0 or any(s < 0 for s in self.sigma_k2):
            raise ValueError("variances must be nonnegative")

    @property
    def icc(self) -> float:
        return self.sigma_a2 / (self.sigma_a2 + self.sigma_e2)


@dataclass
class ConvergenceInfo:
    converged: bool
    iterations: int
    n_evals: int
    grad_norm: float
    boundary: list[str] = field(default_factory=list)
    restarts: int = 0
    objective_path: list[float] = field(default_factory=list)
    message: str = ""


@dataclass
class FitResult:
    """Fitted fixed effects, variance components, and estimand summaries."""

    model: str
    T: int
    m: int
    beta: np.ndarray
    effects: np.ndarray          # theta (A), stacked delta (B), mu (C)
    vc: VarianceComponents
    cov: np.ndarray              # covariance of (beta, effects)
    loglik: float
    convergence: ConvergenceInfo
    reml: bool = True

    def estimands(self) -> tuple[np.ndarray, np.ndarray]:
        """Exposure-time-averaged effect estimate and model SE per
        intervention; for model B this is the uniform average of the
        exposure effects with the matching contrast variance."""
        T, m = self.T, self.m
        if self.model in ("A", "C"):
            est = self.effects.copy()
            se = np.sqrt(np.diag(self.cov)[T:T + m])
            return est, se
        q = T - 1
        est = self.effects.reshape(m, q).mean(axis=1)
        se = np.empty(m)
        for k in range(m):
            c = np.zeros(T + m * q)
            c[T + k * q:T + (k + 1) * q] = 1.0 / q
            se[k] = math.sqrt(c @ self.cov @ c)
        return est, se

    def to_json(self, ci: np.ndarray | None = None) -> str:
        est, se = self.estimands()
        estimands = []
        for k in range(self.m):
            entry = {"k": k + 1, "delta_hat": est[k], "se": se[k]}
            if ci is not None:
                entry["ci_low"] = ci[k, 0]
                entry["ci_high"] = ci[k, 1]
            estimands.append(entry)
        effects_key = {"A": "theta", "B": "delta", "C": "mu"}[self.model]
        vc = {"sigma_a2": self.vc.sigma_a2, "sigma_e2": self.vc.sigma_e2}
        if self.vc.sigma_k2:
            vc["sigma_k2"] = list(self.vc.sigma_k2)
        return json.dumps({
            "model": self.model,
            "beta": self.beta.tolist(),
            "effects": {effects_key: self.effects.tolist()},
            "vc": vc,
            "estimands": estimands,
            "loglik": self.loglik,
            "reml": self.reml,
            "converged": self.convergence.converged,
            "boundary": self.convergence.boundary,
        }, indent=2)


def estimand_se(fit: FitResult) -> np.ndarray:
    """Model-based standard error of the estimand, per intervention."""
    return fit.estimands()[1]


# ---------------------------------------------------------------------------
# aggregated linear system


class MeanSystem:
    """Precomputed pieces of the cluster-period-mean normal equations.

    The mean covariance (up to the residual scale) is
    diag(1/n) + U diag(lam_col) U' with a 0/1 matrix U whose column blocks
    are cluster indicators (ratio lam_a) and, for model C, per-intervention
    exposure-time indicators (ratio lam_k).  Everything that does not depend
    on the ratios or on the outcome is cached here, so re-evaluating the
    profiled objective or re-fitting a bootstrap resample touches only small
    dense blocks.
    """

    def __init__(self, layout: DesignLayout, model: str, nij: np.ndarray):
        if model not in ("A", "B", "C"):
            raise ValueError(f"unknown model {model!r}")
        T, m, I = layout.T, layout.m, layout.I
        if nij.shape != (I, T):
            raise ValueError("cell-size array must be I x T")
        self.layout, self.model = layout, model
        self.T, self.m, self.I = T, m, I

        mats = treatment_matrices(layout)
        eye = np.eye(T)
        eff_blocks = [tm.X if model in ("A", "C") else tm.Z for tm in mats]
        D = np.vstack([np.hstack([eye, eb]) for eb in eff_blocks])
        U_cl = np.repeat(np.eye(I), T, axis=0)
        blocks = [U_cl]
        col_param = [np.zeros(I, dtype=int)]
        if model == "C":
            for k in range(m):
                Zk = np.vstack([tm.Z[:, k * (T - 1):(k + 1) * (T - 1)] for tm in mats])
                blocks.append(Zk)
                col_param.append(np.full(T - 1, k + 1, dtype=int))
        U = np.hstack(blocks)
        self.n_ratio_params = 1 + (m if model == "C" else 0)
        self.col_param = np.concatenate(col_param)

        # cell weights: inverse of the diagonal part diag(1/n) of the
        # mean-level covariance (up to the residual scale)
        wt = nij.astype(float).reshape(-1)
        self.nij = nij
        self.N = int(nij.sum())
        self.p = D.shape[1]
        self.r = U.shape[1]
        self.D, self.U, self.wt = D, U, wt
        Dw = D * wt[:, None]
        Uw = U * wt[:, None]
        self._Dw, self._Uw = Dw, Uw
        self.DdD = Dw.T @ D
        self.UdD = Uw.T @ D
        self.UdU = Uw.T @ U
        self._eye_r = np.eye(self.r)
        # clusters never share a cell, so with only the intercept block the
        # capacitance matrix is diagonal
        self._diag_K = model in ("A", "B")
        self._cluster_wt = nij.sum(axis=1).astype(float)

    def stats(self, ybar: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """Outcome-dependent moments (D'Wy, U'Wy, y'Wy) at W = diag(n)."""
        y = ybar.reshape(-1)
        return self._Dw.T @ y, self._Uw.T @ y, float(y @ (self.wt * y))

    def _reduced(self, lam: np.ndarray, stats):
        """Normal-equations matrix, right side, and scalar terms after
        absorbing the random-effect columns."""
        Ddy, Udy, ydy = stats
        if self._diag_K:
            kvec = 1.0 + lam[0] * self._cluster_wt
            inv_k = lam[0] / kvec
            M = self.DdD - (self.UdD.T * inv_k) @ self.UdD
            rhs = Ddy - self.UdD.T @ (inv_k * Udy)
            ySy = ydy - inv_k @ (Udy * Udy)
            logdetK = float(np.log(kvec).sum())
            return M, rhs, ySy, logdetK
        s = np.sqrt(lam[self.col_param])
        K = self._eye_r + (s[:, None] * self.UdU) * s[None, :]
        try:
            cK = cho_factor(K, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - K is PD by construction
            raise FitError("covariance factorisation failed") from exc
        B1 = s[:, None] * self.UdD
        b2 = s * Udy
        KiB1 = cho_solve(cK, B1, check_finite=False)
        Kib2 = cho_solve(cK, b2, check_finite=False)
        M = self.DdD - B1.T @ KiB1
        rhs = Ddy - B1.T @ Kib2
        ySy = ydy - b2 @ Kib2
        logdetK = float(2.0 * np.log(np.diag(cK[0])).sum())
        return M, rhs, ySy, logdetK

    def _chol_M(self, M: np.ndarray) -> np.ndarray:
        try:
            return np.linalg.cholesky(M)
        except np.linalg.LinAlgError as exc:
            raise FitError("normal equations are singular; check identifiability") from exc

    def objective_terms(self, lam: np.ndarray, stats, ssw: float):
        """(Q, logdetK, logdetM) without forming the coefficient vector."""
        M, rhs, ySy, logdetK = self._reduced(lam, stats)
        L = self._chol_M(M)
        z = _tri_solve(L, rhs)
        Q = ySy - z @ z + ssw
        logdetM = float(2.0 * np.log(np.diag(L)).sum())
        return float(Q), logdetK, logdetM

    def core(self, lam: np.ndarray, stats, ssw: float):
        """Solve the working normal equations at the given variance ratios.

        Returns (phi, M_chol, Q, logdetK, logdetM) where Q is the profiled
        residual quadratic form including the within-cell sum of squares.
        """
        M, rhs, ySy, logdetK = self._reduced(lam, stats)
        L = self._chol_M(M)
        z = _tri_solve(L, rhs)
        phi = _tri_solve(L.T, z, lower=False)
        Q = ySy - z @ z + ssw
        logdetM = float(2.0 * np.log(np.diag(L)).sum())
        return phi, L, float(Q), logdetK, logdetM

    def neg2_profiled(self, loglam: np.ndarray, stats, ssw: float, reml: bool) -> float:
        """-2 x (restricted) log-likelihood profiled over fixed effects and
        the residual scale, up to the fixed constant handled in _loglik."""
        lam = np.exp(np.clip(loglam, LOG_FLOOR, LOG_CEIL))
        Q, logdetK, logdetM = self.objective_terms(lam, stats, ssw)
        dof = self.N - self.p if reml else self.N
        if Q <= 0:
            Q = np.finfo(float).tiny
        val = dof * math.log(Q / dof) + logdetK
        if reml:
            val += logdetM
        return val

    def neg2_profiled_grad(self, loglam: np.ndarray, stats, ssw: float,
                           reml: bool) -> tuple[float, np.ndarray]:
        """Profiled objective and its exact gradient in log-ratio coordinates.

        Uses d logdet V0 / d lam_j = tr(V0^-1 U_j U_j'),
        dQ / d lam_j = -|U_j' V0^-1 r|^2 at the profiled coefficients, and
        d logdet M / d lam_j = -tr(M^-1 (U_j' V0^-1 D)' (U_j' V0^-1 D)).
        """
        lam = np.exp(np.clip(loglam, LOG_FLOOR, LOG_CEIL))
        Ddy, Udy, ydy = stats
        dof = self.N - self.p if reml else self.N
        if self._diag_K:
            kvec = 1.0 + lam[0] * self._cluster_wt
            inv_k = lam[0] / kvec
            M = self.DdD - (self.UdD.T * inv_k) @ self.UdD
            rhs = Ddy - self.UdD.T @ (inv_k * Udy)
            ySy = ydy - inv_k @ (Udy * Udy)
            logdetK = float(np.log(kvec).sum())
            L = self._chol_M(M)
            z = _tri_solve(L, rhs)
            phi = _tri_solve(L.T, z, lower=False)
            Q = float(ySy - z @ z + ssw)
            logdetM = float(2.0 * np.log(np.diag(L)).sum())
            gvec = (Udy - self.UdD @ phi) / kvec
            diagE = self._cluster_wt / kvec
            X = _tri_solve(L, (self.UdD / kvec[:, None]).T)
            hvec = (X * X).sum(axis=0)
            grad_lam = np.array([
                -dof * (gvec @ gvec) / Q + diagE.sum() - (hvec.sum() if reml else 0.0)
            ])
        else:
            s = np.sqrt(lam[self.col_param])
            K = self._eye_r + (s[:, None] * self.UdU) * s[None, :]
            cK = cho_factor(K, lower=True, check_finite=False)
            B1 = s[:, None] * self.UdD
            b2 = s * Udy
            KiB1 = cho_solve(cK, B1, check_finite=False)
            Kib2 = cho_solve(cK, b2, check_finite=False)
            M = self.DdD - B1.T @ KiB1
            rhs = Ddy - B1.T @ Kib2
            ySy = ydy - b2 @ Kib2
            logdetK = float(2.0 * np.log(np.diag(cK[0])).sum())
            L = self._chol_M(M)
            z = _tri_solve(L, rhs)
            phi = _tri_solve(L.T, z, lower=False)
            Q = float(ySy - z @ z + ssw)
            logdetM = float(2.0 * np.log(np.diag(L)).sum())
            Us = self.UdU * s[None, :]
            F = self.UdD - Us @ KiB1
            gvec = (Udy - Us @ Kib2) - F @ phi
            KiUs = cho_solve(cK, Us.T, check_finite=False)
            diagE = np.diag(self.UdU) - (Us * KiUs.T).sum(axis=1)
            X = _tri_solve(L, F.T)
            hvec = (X * X).sum(axis=0)
            grad_lam = np.zeros(self.n_ratio_params)
            for j in range(self.n_ratio_params):
                sel = self.col_param == j
                grad_lam[j] = (-dof * (gvec[sel] @ gvec[sel]) / Q + diagE[sel].sum()
                               - (hvec[sel].sum() if reml else 0.0))
        if Q <= 0:
            Q = np.finfo(float).tiny
        val = dof * math.log(Q / dof) + logdetK + (logdetM if reml else 0.0)
        return val, grad_lam * lam

    def neg2_at(self, lam: np.ndarray, sigma_e2: float, stats, ssw: float, reml: bool) -> float:
        """-2 x (restricted) log-likelihood at fixed variance components."""
        _, _, Q, logdetK, logdetM = self.core(lam, stats, ssw)
        dof = self.N - self.p if reml else self.N
        val = (self.N * math.log(sigma_e2) + logdetK + Q / sigma_e2
               + dof * math.log(2 * math.pi))
        if reml:
            val += logdetM - self.p * math.log(sigma_e2)
        return val

    def profiled_loglik(self, objective_value: float, reml: bool) -> float:
        dof = self.N - self.p if reml else self.N
        return -0.5 * (objective_value + dof * (1.0 + math.log(2 * math.pi)))


def _mean_system(layout: DesignLayout, model: str, nij: np.ndarray) -> MeanSystem:
    return MeanSystem(layout, model, nij)


def _precheck(layout: DesignLayout, model: str) -> None:
    report = check_identifiability(layout, "B" if model == "B" else "A")
    if report.identifiable:
        return
    msg = (f"model {model} is not identifiable on this {layout.kind} layout; "
           f"non-estimable coordinates: {', '.join(report.deficient_combinations)}")
    if layout.kind == "supplementation" and model == "B":
        msg += ("; with the add-on rollout only delta[1,1] and the lagged sums "
                "delta[1,e]+delta[2,e-1] are estimable")
    raise IdentifiabilityError(msg)


def _vc_from(lam: np.ndarray, sigma_e2: float, model: str) -> VarianceComponents:
    sigma_k2 = tuple(float(v) * sigma_e2 for v in lam[1:]) if model == "C" else ()
    return VarianceComponents(sigma_a2=float(lam[0]) * sigma_e2, sigma_e2=float(sigma_e2),
                              sigma_k2=sigma_k2)


def _boundary_flags(lam: np.ndarray, model: str) -> list[str]:
    names = ["sigma_a2"] + ([f"sigma_k2[{k + 1}]" for k in range(len(lam) - 1)] if model == "C" else [])
    return [name for name, v in zip(names, lam) if v <= LAMBDA_FLOOR * 10]


def _result_from(system: MeanSystem, model: str, lam: np.ndarray, stats, ssw: float,
                 reml: bool, conv: ConvergenceInfo) -> FitResult:
    phi, L, Q, logdetK, logdetM = system.core(lam, stats, ssw)
    dof = system.N - system.p if reml else system.N
    sigma_e2 = max(Q / dof, np.finfo(float).tiny)
    obj = dof * math.log(sigma_e2) + logdetK + (logdetM if reml else 0.0)
    loglik = system.profiled_loglik(obj, reml)
    cov = sigma_e2 * cho_solve((L, True), np.eye(system.p), check_finite=False)
    conv.boundary = _boundary_flags(lam, model)
    T = system.T
    return FitResult(model=model, T=T, m=system.m, beta=phi[:T], effects=phi[T:],
                     vc=_vc_from(lam, sigma_e2, model), cov=cov, loglik=loglik,
                     convergence=conv, reml=reml)


# ---------------------------------------------------------------------------
# optimisation of the profiled objective


def _optimize_1d(system: MeanSystem, stats, ssw: float, reml: bool,
                 start: float | None) -> tuple[np.ndarray, ConvergenceInfo]:
    path: list[float] = []
    best = [math.inf]

    def obj(x: float) -> float:
        val = system.neg2_profiled(np.array([x]), stats, ssw, reml)
        if val < best[0]:
            best[0] = val
        path.append(best[0])
        return val

    lo, hi = LOG_FLOOR, LOG_CEIL
    if start is not None:
        # warm bracket around the previous optimum; widen on failure below
        lo = max(LOG_FLOOR, start - 6.0)
        hi = min(LOG_CEIL, start + 6.0)
    res = minimize_scalar(obj, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-9, "maxiter": MAX_ITER})
    x = float(res.x)
    if start is not None and (x < lo + 1e-6 or x > hi - 1e-6) and (lo > LOG_FLOOR or hi < LOG_CEIL):
        res = minimize_scalar(obj, bounds=(LOG_FLOOR, LOG_CEIL), method="bounded",
                              options={"xatol": 1e-9, "maxiter": MAX_ITER})
        x = float(res.x)
    conv = ConvergenceInfo(converged=bool(res.success), iterations=int(res.nfev),
                           n_evals=int(res.nfev), grad_norm=0.0,
                           objective_path=path, message=str(res.message))
    return np.array([x]), conv


def _optimize_nd(system: MeanSystem, stats, ssw: float, reml: bool,
                 start: np.ndarray, record_path: bool) -> tuple[np.ndarray, ConvergenceInfo]:
    nparam = system.n_ratio_params
    bounds = [(LOG_FLOOR, LOG_CEIL)] * nparam
    path: list[float] = []

    def obj(x: np.ndarray):
        return system.neg2_profiled_grad(x, stats, ssw, reml)

    callback = None
    if record_path:
        def callback(xk: np.ndarray) -> None:
            path.append(system.neg2_profiled(xk, stats, ssw, reml))

    attempts = [np.asarray(start, dtype=float)]
    attempts += [np.clip(attempts[0] + shift, LOG_FLOOR + 1, LOG_CEIL - 1)
                 for shift in _RESTART_SHIFTS]
    last = None
    for tries, x0 in enumerate(attempts):
        res = minimize(obj, x0, method="L-BFGS-B", jac=True, bounds=bounds,
                       callback=callback,
                       options={"maxiter": MAX_ITER, "ftol": REL_OBJ_TOL, "gtol": GRAD_TOL})
        last = res
        if res.success:
            conv = ConvergenceInfo(converged=True, iterations=int(res.nit),
                                   n_evals=int(res.nfev),
                                   grad_norm=float(np.linalg.norm(res.jac)),
                                   restarts=tries, objective_path=path,
                                   message=str(res.message))
            return np.asarray(res.x, dtype=float), conv
    conv = ConvergenceInfo(converged=False, iterations=int(last.nit), n_evals=int(last.nfev),
                           grad_norm=float(np.linalg.norm(last.jac)),
                           restarts=len(attempts) - 1, objective_path=path,
                           message=str(last.message))
    return np.asarray(last.x, dtype=float), conv


def _fit_means(system: MeanSystem, ybar: np.ndarray, ssw: float, *, reml: bool = True,
               start_lam: np.ndarray | None = None,
               fixed_vc: VarianceComponents | None = None,
               record_path: bool = False) -> FitResult:
    stats = system.stats(ybar)
    model = system.model
    if fixed_vc is not None:
        lam = _lam_from_vc(fixed_vc, model, system.m)
        phi, L, Q, logdetK, logdetM = system.core(lam, stats, ssw)
        neg2 = system.neg2_at(lam, fixed_vc.sigma_e2, stats, ssw, reml)
        cov = fixed_vc.sigma_e2 * cho_solve((L, True), np.eye(system.p), check_finite=False)
        conv = ConvergenceInfo(converged=True, iterations=0, n_evals=1, grad_norm=0.0)
        T = system.T
        return FitResult(model=model, T=T, m=system.m, beta=phi[:T], effects=phi[T:],
                         vc=fixed_vc, cov=cov, loglik=-0.5 * neg2, convergence=conv,
                         reml=reml)

    if start_lam is None:
        start = np.full(system.n_ratio_params, math.log(0.1))
    else:
        start = np.log(np.clip(start_lam, LAMBDA_FLOOR, math.exp(LOG_CEIL)))
    if system.n_ratio_params == 1:
        loglam, conv = _optimize_1d(system, stats, ssw, reml,
                                    float(start[0]) if start_lam is not None else None)
    else:
        loglam, conv = _optimize_nd(system, stats, ssw, reml, start, record_path)
    if not conv.converged:
        raise FitError(f"variance-parameter search did not converge: {conv.message}")
    lam = np.exp(loglam)
    return _result_from(system, model, lam, stats, ssw, reml, conv)


def _lam_from_vc(vc: VarianceComponents, model: str, m: int) -> np.ndarray:
    lam = [vc.sigma_a2 / vc.sigma_e2]
    if model == "C":
        ks = vc.sigma_k2 if vc.sigma_k2 else (0.0,) * m
        if len(ks) != m:
            raise ValueError(f"need {m} deviation variances for model C")
        lam += [s / vc.sigma_e2 for s in ks]
    return np.asarray(lam, dtype=float)


# ---------------------------------------------------------------------------
# public fitting entry points


def fit_gls(means: CellStats, layout: DesignLayout, model: str,
            vc: VarianceComponents) -> FitResult:
    """Generalized least squares on cluster-period means at known variance
    components (models A and B)."""
    if model not in ("A", "B"):
        raise ValueError("fit_gls handles models A and B")
    _precheck(layout, model)
    system = _mean_system(layout, model, means.n)
    ssw = means.within_ss if means.within_ss is not None and np.isfinite(means.within_ss) else 0.0
    return _fit_means(system, means.ybar, ssw, reml=True, fixed_vc=vc)


def fit_reml(dataset: TrialDataset, layout: DesignLayout, model: str, *,
             reml: bool = True, fixed_vc: VarianceComponents | None = None,
             start_lam: np.ndarray | None = None, record_path: bool = False) -> FitResult:
    """Fit model A, B, or C by profiled (restricted) maximum likelihood."""
    _precheck(layout, model)
    means = cluster_period_means(dataset)
    if means.I != layout.I or means.T != layout.T:
        raise ValueError("dataset dimensions disagree with layout")
    system = _mean_system(layout, model, means.n)
    return _fit_means(system, means.ybar, means.within_ss, reml=reml,
                      start_lam=start_lam, fixed_vc=fixed_vc, record_path=record_path)


def restricted_loglik(dataset: TrialDataset, layout: DesignLayout, model: str,
                      vc: VarianceComponents, *, reml: bool = True) -> float:
    """(Restricted) log-likelihood of the dataset at fixed variance
    components, with fixed effects profiled out by GLS."""
    means = cluster_period_means(dataset)
    system = _mean_system(layout, model, means.n)
    stats = system.stats(means.ybar)
    lam = _lam_from_vc(vc, model, layout.m)
    return -0.5 * system.neg2_at(lam, vc.sigma_e2, stats, means.within_ss, reml)


# ---------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapResult:
    """Percentile interval per intervention plus the resample draws."""

    ci: np.ndarray          # (m, 2)
    estimates: np.ndarray   # (B_ok, m)
    level: float
    n_fail: int
    B: int

    @property
    def sd(self) -> np.ndarray:
        return self.estimates.std(axis=0, ddof=1)


def percentile_interval(draws: np.ndarray, level: float) -> np.ndarray:
    """Type-1 empirical quantile interval: the ceil(q*B)-th order statistic
    at q = (1-level)/2 and 1-(1-level)/2."""
    B = draws.shape[0]
    if B < 2:
        raise ValueError("need at least two bootstrap draws")
    alpha = 1.0 - level
    lo_idx = max(1, math.ceil(alpha / 2 * B))
    hi_idx = min(B, math.ceil((1 - alpha / 2) * B))
    srt = np.sort(draws, axis=0)
    return np.stack([srt[lo_idx - 1], srt[hi_idx - 1]], axis=1)


class _ProfilePencil:
    """Spectral form of the profiled objective for models A/B with a
    constant cell size.

    With every cluster carrying the same total weight, the absorbed normal
    matrix is the one-parameter pencil M(a) = M0 - a C0 with
    a = lam / (1 + lam n T).  A single generalized eigendecomposition of
    (C0, M0) turns each objective evaluation into O(p) arithmetic, which
    makes it cheap to optimize hundreds of bootstrap resamples in lockstep.
    """

    def __init__(self, system: MeanSystem):
        if not system._diag_K:
            raise ValueError("pencil form only applies to models A and B")
        d = system._cluster_wt
        if not np.all(d == d[0]):
            raise ValueError("pencil form needs equal cluster weights")
        from scipy.linalg import eigh
        self.system = system
        self.d = float(d[0])
        M0 = system.DdD
        C0 = system.UdD.T @ system.UdD
        mu, V = eigh(C0, M0)
        self.mu, self.V = mu, V          # V' M0 V = I, V' C0 V = diag(mu)
        sign, logdet0 = np.linalg.slogdet(M0)
        if sign <= 0:
            raise FitError("normal equations are singular; check identifiability")
        self.logdetM0 = float(logdet0)
        self.r = system.r

    def prepare(self, Y: np.ndarray):
        """Per-resample coefficients from a (B, cells) matrix of cell means."""
        sysm = self.system
        Yw = Y * sysm.wt[None, :]
        r0 = Yw @ sysm.D                     # (B, p)
        u = Yw @ sysm.U                      # (B, r)
        r1 = u @ sysm.UdD                    # (B, p)
        ydy = (Yw * Y).sum(axis=1)           # (B,)
        uu = (u * u).sum(axis=1)             # (B,)
        t0 = r0 @ self.V
        t1 = r1 @ self.V
        return t0, t1, ydy, uu

    def neg2(self, loglam: np.ndarray, prep, ssw: np.ndarray, reml: bool) -> np.ndarray:
        """Batched profiled objective at per-problem log ratios (B,)."""
        t0, t1, ydy, uu = prep
        sysm = self.system
        lam = np.exp(loglam)
        a = lam / (1.0 + lam * self.d)
        w = t0 - a[:, None] * t1
        denom = 1.0 - a[:, None] * self.mu[None, :]
        quad = (w * w / denom).sum(axis=1)
        Q = ydy - a * uu - quad + ssw
        np.maximum(Q, np.finfo(float).tiny, out=Q)
        dof = sysm.N - sysm.p if reml else sysm.N
        val = dof * np.log(Q / dof) + self.r * np.log1p(lam * self.d)
        if reml:
            val += self.logdetM0 + np.log(denom).sum(axis=1)
        return val

    def coefficients(self, loglam: np.ndarray, prep) -> np.ndarray:
        """Fixed-effect solutions (B, p) at per-problem log ratios."""
        t0, t1, _, _ = prep
        lam = np.exp(loglam)
        a = lam / (1.0 + lam * self.d)
        w = t0 - a[:, None] * t1
        denom = 1.0 - a[:, None] * self.mu[None, :]
        return (w / denom) @ self.V.T


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _batched_golden(fun, lo: float, hi: float, B: int, tol: float = 1e-7) -> np.ndarray:
    """Minimize B unimodal scalar functions in lockstep by golden section.

    ``fun`` maps a (B,) point vector to (B,) objective values.
    """
    a = np.full(B, lo)
    b = np.full(B, hi)
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1 = fun(x1)
    f2 = fun(x2)
    it = math.ceil(math.log(tol / (hi - lo)) / math.log(_GOLDEN)) + 1
    for _ in range(max(it, 1)):
        left = f1 < f2
        b = np.where(left, x2, b)
        a = np.where(left, a, x1)
        x_old1, f_old1 = x1, f1
        x1 = np.where(left, b - _GOLDEN * (b - a), x2)
        f1 = np.where(left, np.nan, f2)
        x2 = np.where(left, x_old1, a + _GOLDEN * (b - a))
        f2 = np.where(left, f_old1, np.nan)
        need1 = np.isnan(f1)
        fx = fun(np.where(need1, x1, x2))
        f1 = np.where(need1, fx, f1)
        f2 = np.where(need1, f2, fx)
    return 0.5 * (a + b)


def _resample_cells(groups: list[np.ndarray], gen,
                    stacked: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Resample individuals with replacement within every cluster-period;
    returns the new cell means and pooled within-cell SS."""
    if stacked is not None:
        ncells, n = stacked.shape
        idx = gen.integers(0, n, size=(ncells, n))
        vals = np.take_along_axis(stacked, idx, axis=1)
        means = vals.mean(axis=1)
        ssw = float(((vals - means[:, None]) ** 2).sum())
        return means, ssw
    means = np.empty(len(groups))
    ssw = 0.0
    for c, g in enumerate(groups):
        pick = g[gen.integers(0, g.shape[0], size=g.shape[0])]
        mu = pick.mean()
        means[c] = mu
        ssw += float(((pick - mu) ** 2).sum())
    return means, ssw


def _stacked_groups(groups: list[np.ndarray]) -> np.ndarray | None:
    sizes = {g.shape[0] for g in groups}
    return np.vstack(groups) if len(sizes) == 1 else None


def _estimands_from_phi(phi: np.ndarray, model: str, T: int, m: int) -> np.ndarray:
    """Estimand vector(s) from stacked coefficient rows (..., p)."""
    if model in ("A", "C"):
        return phi[..., T:T + m]
    q = T - 1
    return phi[..., T:].reshape(*phi.shape[:-1], m, q).mean(axis=-1)


def _pencil_for(system: MeanSystem) -> _ProfilePencil | None:
    if not system._diag_K:
        return None
    d = system._cluster_wt
    if not np.all(d == d[0]):
        return None
    cached = getattr(system, "_pencil_cache", None)
    if cached is None:
        cached = _ProfilePencil(system)
        system._pencil_cache = cached
    return cached


def _bootstrap_draws(system: MeanSystem, groups: list[np.ndarray], B: int, seed: int,
                     reml: bool, start: np.ndarray | None) -> tuple[np.ndarray, int]:
    """Estimand draws over B within-cell resamples; (draws, n_fail)."""
    I, T = system.I, system.T
    stacked = _stacked_groups(groups)
    pencil = _pencil_for(system)
    if pencil is not None:
        ncells = I * T
        Y = np.empty((B, ncells))
        SSW = np.empty(B)
        for b in range(B):
            gen = _rng.stream(seed, b)
            Y[b], SSW[b] = _resample_cells(groups, gen, stacked)
        prep = pencil.prepare(Y)
        loglam = _batched_golden(lambda x: pencil.neg2(x, prep, SSW, reml),
                                 LOG_FLOOR, LOG_CEIL, B)
        phi = pencil.coefficients(loglam, prep)
        return _estimands_from_phi(phi, system.model, T, system.m), 0
    draws = np.full((B, system.m), np.nan)
    n_fail = 0
    if start is None:
        start_log = np.full(system.n_ratio_params, math.log(0.1))
    else:
        start_log = np.log(np.clip(start, LAMBDA_FLOOR, math.exp(LOG_CEIL)))
    for b in range(B):
        gen = _rng.stream(seed, b)
        ybar, ssw = _resample_cells(groups, gen, stacked)
        stats = system.stats(ybar)
        try:
            if system.n_ratio_params == 1:
                loglam, conv = _optimize_1d(system, stats, ssw, reml, float(start_log[0]))
            else:
                loglam, conv = _optimize_nd(system, stats, ssw, reml, start_log, False)
            if not conv.converged:
                raise FitError(conv.message)
            phi = system.core(np.exp(loglam), stats, ssw)[0]
            draws[b] = _estimands_from_phi(phi, system.model, T, system.m)
        except FitError:
            n_fail += 1
    return draws, n_fail


def bootstrap_ci(dataset: TrialDataset, layout: DesignLayout, model: str, B: int,
                 level: float, seed: int, *, reml: bool = True,
                 _system: MeanSystem | None = None,
                 _groups: list[np.ndarray] | None = None,
                 _start_lam: np.ndarray | None = None) -> BootstrapResult:
    """Percentile bootstrap for the estimand: resample individuals within
    each cluster-period, refit, and take empirical quantiles over resamples.

    Deterministic given the seed; resample b draws from substream (seed, b).
    """
    if B < 2:
        raise ValueError("need B >= 2 bootstrap resamples")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    _precheck(layout, model)
    system = _system
    groups = _groups
    start = _start_lam
    if system is None or groups is None:
        means = cluster_period_means(dataset)
        system = _mean_system(layout, model, means.n)
        groups = cell_value_groups(dataset)
        if start is None and not system._diag_K:
            parent = _fit_means(system, means.ybar, means.within_ss, reml=reml)
            start = np.array([parent.vc.sigma_a2] + list(parent.vc.sigma_k2)) / parent.vc.sigma_e2
    draws, n_fail = _bootstrap_draws(system, groups, B, seed, reml, start)
    ok = draws[~np.isnan(draws).any(axis=1)]
    if ok.shape[0] < 2:
        raise FitError(f"bootstrap failed on {n_fail} of {B} resamples; cannot form an interval")
    if n_fail > 0.01 * B:
        warnings.warn(f"{n_fail} of {B} bootstrap refits failed; interval uses the "
                      f"{ok.shape[0]} successes", RuntimeWarning)
    return BootstrapResult(ci=percentile_interval(ok, level), estimates=ok,
                           level=level, n_fail=n_fail, B=B)
