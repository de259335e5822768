"""Reference estimators for checking generated benchmarks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .data import Dataset
from .errors import (ConvergenceError, DegenerateTreatmentError, DomainError, SeparationError,
                     SingularDesignError)

SEPARATION_ETA = 30.0
MAX_NEWTON_ITER = 100


@dataclass(frozen=True)
class AteEstimate:
    point: float
    stderr: float
    method: str
    n: int

    def __post_init__(self):
        if not self.stderr >= 0:
            raise DomainError("standard error must be non-negative")

    def interval(self, width: float = 2.0) -> tuple[float, float]:
        return self.point - width * self.stderr, self.point + width * self.stderr

    def covers(self, value: float, width: float = 2.0) -> bool:
        lo, hi = self.interval(width)
        return lo <= value <= hi


@dataclass(frozen=True)
class LogisticFit:
    """Intercept and treatment slope with standard errors (and optional covariate terms)."""

    coef: np.ndarray
    stderr: np.ndarray
    method: str
    n: int
    iterations: int

    @property
    def intercept(self) -> float:
        return float(self.coef[0])

    @property
    def slope(self) -> float:
        return float(self.coef[1])

    def covers(self, index: int, value: float, width: float = 2.0) -> bool:
        return abs(self.coef[index] - value) <= width * self.stderr[index]


def _arms(ds: Dataset):
    t = ds.t
    n1 = int(np.sum(t == 1))
    n0 = int(np.sum(t == 0))
    if n1 == 0 or n0 == 0:
        raise DegenerateTreatmentError("both treatment arms must be non-empty")
    return n0, n1


def difference_of_means(ds: Dataset) -> AteEstimate:
    """mean(Y | T=1) - mean(Y | T=0) with the pooled-variance standard error."""
    n0, n1 = _arms(ds)
    y1, y0 = ds.y[ds.t == 1], ds.y[ds.t == 0]
    point = float(y1.mean() - y0.mean())
    dof = n0 + n1 - 2
    pooled = (((y1 - y1.mean()) ** 2).sum() + ((y0 - y0.mean()) ** 2).sum()) / dof if dof > 0 else 0.0
    se = float(np.sqrt(pooled * (1.0 / n0 + 1.0 / n1)))
    return AteEstimate(point, se, "dom", ds.n)


def _ols(x: np.ndarray, y: np.ndarray):
    rank = np.linalg.matrix_rank(x)
    if rank < x.shape[1]:
        raise SingularDesignError(f"design matrix has rank {rank} < {x.shape[1]} columns")
    xtx = x.T @ x
    beta = np.linalg.solve(xtx, x.T @ y)
    resid = y - x @ beta
    dof = x.shape[0] - x.shape[1]
    sigma2 = float(resid @ resid) / dof if dof > 0 else 0.0
    cov = sigma2 * np.linalg.inv(xtx)
    return beta, np.sqrt(np.clip(np.diag(cov), 0.0, None))


def outcome_regression_ate(ds: Dataset, covariates: bool = True) -> AteEstimate:
    """OLS of Y on (1, T, Z); the T coefficient with a homoskedastic standard error."""
    _arms(ds)
    cols = [np.ones(ds.n), ds.t] + ([ds.z[:, j] for j in range(ds.n_covariates)] if covariates else [])
    beta, se = _ols(np.column_stack(cols), ds.y)
    return AteEstimate(float(beta[1]), float(se[1]), "or", ds.n)


def _weighted_logistic(x: np.ndarray, y: np.ndarray, w: np.ndarray, method: str,
                       sandwich: bool) -> LogisticFit:
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("logistic estimators need a binary outcome")
    beta = np.zeros(x.shape[1])

    def nll(b):
        eta = x @ b
        return -float(np.sum(w * (y * log_expit(eta) + (1 - y) * log_expit(-eta))))

    current = nll(beta)
    for it in range(1, MAX_NEWTON_ITER + 1):
        p = expit(x @ beta)
        score = x.T @ (w * (y - p))
        info = (x * (w * p * (1 - p))[:, None]).T @ x
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError("logistic information matrix is singular") from exc
        damp = 1.0
        while True:
            trial = beta + damp * step
            value = nll(trial)
            if value <= current or damp < 1e-10:
                break
            damp *= 0.5
        beta, previous, current = trial, current, value
        if np.max(np.abs(x @ beta)) > SEPARATION_ETA:
            raise SeparationError("linear predictor diverges; outcome is (quasi-)separated")
        if np.max(np.abs(damp * step)) < 1e-10 or abs(previous - current) < 1e-12 * (1 + abs(current)):
            break
    else:
        raise ConvergenceError(f"{method}: Newton iterations did not converge in {MAX_NEWTON_ITER} steps")
    p = expit(x @ beta)
    info = (x * (w * p * (1 - p))[:, None]).T @ x
    bread = np.linalg.inv(info)
    if sandwich:
        u = x * (w * (y - p))[:, None]
        cov = bread @ (u.T @ u) @ bread
    else:
        cov = bread
    return LogisticFit(beta, np.sqrt(np.clip(np.diag(cov), 0.0, None)), method, x.shape[0], it)


def ipw_logistic(ds: Dataset, propensity) -> LogisticFit:
    """Marginal logistic model Y ~ 1 + T fitted with inverse propensity weights.

    ``propensity`` is an array of p(T=1 | z) per row or a callable of Z.
    Standard errors use the robust sandwich form.
    """
    _arms(ds)
    p = propensity(ds.z) if callable(propensity) else np.asarray(propensity, dtype=float)
    p = np.broadcast_to(p, ds.t.shape)
    if not np.all((p > 0.0) & (p < 1.0)):
        raise DomainError("propensities must lie strictly inside (0, 1)")
    w = np.where(ds.t == 1, 1.0 / p, 1.0 / (1.0 - p))
    x = np.column_stack([np.ones(ds.n), ds.t])
    return _weighted_logistic(x, ds.y, w, "ipw", sandwich=True)


def logistic_regression(ds: Dataset, covariates: bool = True) -> LogisticFit:
    """Plain logistic outcome regression of Y on (1, T[, Z])."""
    _arms(ds)
    cols = [np.ones(ds.n), ds.t] + ([ds.z[:, j] for j in range(ds.n_covariates)] if covariates else [])
    return _weighted_logistic(np.column_stack(cols), ds.y, np.ones(ds.n), "logistic-or", sandwich=False)
