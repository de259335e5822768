"""Ground-truth simulator: Gaussian copula over known covariate margins and a
known Gaussian causal margin, with a sigmoid propensity.

Rows are drawn as (V_Z, V_Y) from the copula, Z by inverting the covariate
margins, T from the propensity given Z, and Y = mu(t, w) + sigma Phi^-1(V_Y).
Under do(T=t) the outcome keeps the N(mu(t, w), sigma^2) law, so the ATE is
known exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import expit, log_expit

from .data import Dataset
from .errors import InvalidParameterError, SpecError
from .rng import substream

R4 = np.array([
    [1.0, 0.5, 0.3, 0.1, 0.8],
    [0.5, 1.0, 0.4, 0.1, 0.8],
    [0.3, 0.4, 1.0, 0.1, 0.8],
    [0.1, 0.1, 0.1, 1.0, 0.8],
    [0.8, 0.8, 0.8, 0.8, 1.0],
])

# The source values for entries (5, 10) and (10, 5) differ (0.4 vs 0.2);
# both use their average so the matrix is symmetric.
R10 = np.array([
    [1.0, 0.3, 0.4, 0.5, 0.1, 0.2, 0.7, 0.5, 0.4, 0.5, 0.5],
    [0.3, 1.0, 0.3, 0.6, 0.3, 0.4, 0.4, 0.6, 0.3, 0.2, 0.5],
    [0.4, 0.3, 1.0, 0.5, 0.2, 0.1, 0.1, 0.0, 0.4, 0.4, 0.5],
    [0.5, 0.6, 0.5, 1.0, 0.2, 0.2, 0.5, 0.5, 0.3, 0.4, 0.5],
    [0.1, 0.3, 0.2, 0.2, 1.0, 0.1, 0.5, 0.6, 0.2, 0.3, 0.5],
    [0.2, 0.4, 0.1, 0.2, 0.1, 1.0, 0.0, 0.4, 0.2, 0.5, 0.5],
    [0.7, 0.4, 0.1, 0.5, 0.5, 0.0, 1.0, 0.4, 0.4, 0.4, 0.5],
    [0.5, 0.6, 0.0, 0.5, 0.6, 0.4, 0.4, 1.0, 0.4, 0.4, 0.5],
    [0.4, 0.3, 0.4, 0.3, 0.2, 0.2, 0.4, 0.4, 1.0, 0.4, 0.5],
    [0.5, 0.2, 0.4, 0.4, 0.3, 0.5, 0.4, 0.4, 0.4, 1.0, 0.5],
    [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 1.0],
])

# Minimum eigenvalue used when repairing the built-in matrices.
BUILTIN_PD_FLOOR = 0.1


def spearman_to_pearson(rs):
    """Gaussian-copula Pearson parameter with Spearman correlation ``rs``."""
    rs = np.asarray(rs, dtype=float)
    if np.any(np.abs(rs) > 1.0):
        raise InvalidParameterError("Spearman correlation must lie in [-1, 1]")
    out = 2.0 * np.sin(np.pi * rs / 6.0)
    return float(out) if out.ndim == 0 else out


def pearson_to_spearman(r):
    return (6.0 / np.pi) * np.arcsin(np.asarray(r, dtype=float) / 2.0)


def repair_correlation(p: np.ndarray, floor: float) -> np.ndarray:
    """Clip eigenvalues at ``floor`` and rescale back to unit diagonal."""
    w, vecs = np.linalg.eigh(p)
    if w.min() >= floor:
        return p
    q = vecs @ np.diag(np.maximum(w, floor)) @ vecs.T
    d = np.sqrt(np.diag(q))
    q = q / np.outer(d, d)
    np.fill_diagonal(q, 1.0)
    return 0.5 * (q + q.T)


@dataclass(frozen=True)
class CovariateMargin:
    """``gamma`` (mean ``a``, dispersion ``b``), ``bernoulli`` (p = ``a``) or ``normal`` (mean ``a``, sd ``b``)."""

    family: str
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.family not in ("gamma", "bernoulli", "normal"):
            raise SpecError(f"unknown covariate family {self.family!r}")
        if self.family == "bernoulli" and not 0.0 < self.a < 1.0:
            raise SpecError("bernoulli probability must lie in (0, 1)")
        if self.family in ("gamma", "normal") and self.b <= 0:
            raise SpecError(f"{self.family} scale parameter must be positive")
        if self.family == "gamma" and self.a <= 0:
            raise SpecError("gamma mean must be positive")

    @property
    def kind(self) -> str:
        return "discrete" if self.family == "bernoulli" else "continuous"

    def _dist(self):
        if self.family == "gamma":
            # mean/dispersion: shape 1/phi, rate 1/(mu phi)
            return stats.gamma(a=1.0 / self.b, scale=self.a * self.b)
        if self.family == "normal":
            return stats.norm(loc=self.a, scale=self.b)
        return None

    def ppf(self, v) -> np.ndarray:
        if self.family == "bernoulli":
            return (np.asarray(v) > 1.0 - self.a).astype(float)
        return self._dist().ppf(v)

    def cdf(self, x) -> np.ndarray:
        if self.family == "bernoulli":
            x = np.asarray(x, dtype=float)
            return np.where(x < 0, 0.0, np.where(x < 1, 1.0 - self.a, 1.0))
        return self._dist().cdf(x)

    def logpdf(self, x) -> np.ndarray:
        if self.family == "bernoulli":
            x = np.asarray(x, dtype=float)
            return np.where(x == 1.0, math.log(self.a), math.log(1.0 - self.a))
        return self._dist().logpdf(x)

    @property
    def mean(self) -> float:
        return self.a


@dataclass(frozen=True)
class DgpSpec:
    margins: tuple
    matrix: np.ndarray
    matrix_kind: str = "spearman"
    intercept: float = 1.0
    ate: float = 1.0
    sigma: float = 1.0
    prop_intercept: float = 0.0
    prop_coef: tuple = ()
    prop_interactions: tuple = ()
    w_coef: tuple = ()
    tw_coef: tuple = ()
    pd_floor: float = 1e-6
    repair: bool = True
    name: str = "custom"

    def __post_init__(self):
        d = len(self.margins)
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (d + 1, d + 1):
            raise SpecError(f"correlation matrix must be {(d + 1, d + 1)} for {d} covariates")
        if not np.allclose(m, m.T) or not np.allclose(np.diag(m), 1.0) or np.any(np.abs(m) > 1.0):
            raise SpecError("correlation matrix must be symmetric with unit diagonal and entries in [-1, 1]")
        if self.matrix_kind not in ("spearman", "pearson"):
            raise SpecError("matrix_kind must be 'spearman' or 'pearson'")
        if self.sigma <= 0:
            raise SpecError("outcome scale must be positive")
        for name in ("prop_coef", "w_coef", "tw_coef"):
            coef = getattr(self, name)
            if len(coef) not in (0, d):
                raise SpecError(f"{name} needs one entry per covariate")
        for i, j, _ in self.prop_interactions:
            if not (0 <= i < d and 0 <= j < d):
                raise SpecError("propensity interaction refers to a missing covariate")
        modifiers = np.flatnonzero(np.asarray(self.w_coef or np.zeros(d)) != 0) if d else []
        modifiers = set(modifiers) | set(np.flatnonzero(np.asarray(self.tw_coef or np.zeros(d)) != 0))
        for j in modifiers:
            if m[j, d] != 0.0:
                raise SpecError("effect-modifier ranks must be uncorrelated with the outcome rank")
        self.pearson()

    @property
    def n_covariates(self) -> int:
        return len(self.margins)

    def pearson(self) -> np.ndarray:
        m = np.asarray(self.matrix, dtype=float)
        p = spearman_to_pearson(m) if self.matrix_kind == "spearman" else m.copy()
        np.fill_diagonal(p, 1.0)
        if np.linalg.eigvalsh(p).min() <= 0.0:
            if not self.repair:
                raise SpecError("converted correlation matrix is not positive definite")
            p = repair_correlation(p, self.pd_floor)
        return p

    def linear_predictor(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        eta = np.full(z.shape[0], float(self.prop_intercept))
        if self.prop_coef:
            eta = eta + z @ np.asarray(self.prop_coef, dtype=float)
        for i, j, c in self.prop_interactions:
            eta = eta + c * z[:, i] * z[:, j]
        return eta

    def propensity(self, z) -> np.ndarray:
        return expit(self.linear_predictor(z))

    def outcome_mean(self, t, z) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        mu = self.intercept + self.ate * t
        if self.w_coef:
            mu = mu + np.asarray(z) @ np.asarray(self.w_coef, dtype=float)
        if self.tw_coef:
            mu = mu + t * (np.asarray(z) @ np.asarray(self.tw_coef, dtype=float))
        return mu

    def true_ate(self) -> float:
        ate = float(self.ate)
        if self.tw_coef:
            means = np.array([m.mean for m in self.margins])
            ate += float(np.asarray(self.tw_coef, dtype=float) @ means)
        return ate

    def with_ate(self, ate: float) -> "DgpSpec":
        return _replace(self, ate=float(ate))


def _replace(spec: DgpSpec, **kw) -> DgpSpec:
    fields = {f: getattr(spec, f) for f in spec.__dataclass_fields__}
    fields.update(kw)
    return DgpSpec(**fields)


_M12_PROP = dict(prop_intercept=-0.3, prop_coef=(0.1, 0.2, -0.2, 1.0), prop_interactions=((0, 1, 0.5),))
_GAMMA = CovariateMargin("gamma", 1.0, 1.0)
_BERN = CovariateMargin("bernoulli", 0.5)


def builtin_spec(name: str, ate: float | None = None) -> DgpSpec:
    """Registered specs: ``m1``, ``m2``, ``m3`` (ATE 1) and ``logistic`` (ATE 2)."""
    name = name.lower()
    if ate is None:
        ate = 2.0 if name == "logistic" else 1.0
    if name == "m1":
        return DgpSpec((_GAMMA,) * 4, R4, ate=ate, pd_floor=BUILTIN_PD_FLOOR, name="m1", **_M12_PROP)
    if name == "m2":
        return DgpSpec((_GAMMA, _BERN, _GAMMA, _BERN), R4, ate=ate, pd_floor=BUILTIN_PD_FLOOR,
                       name="m2", **_M12_PROP)
    if name == "m3":
        return DgpSpec((_GAMMA, _BERN) * 5, R10, ate=ate, pd_floor=BUILTIN_PD_FLOOR, name="m3",
                       prop_intercept=-0.3,
                       prop_coef=(0.1, 0.2, 0.5, -0.2, 1.0, 0.3, -0.4, 0.7, -0.1, 0.9))
    if name == "logistic":
        # covariate N(0, sd 2) linked to the outcome rank with Pearson 0.8
        return DgpSpec((CovariateMargin("normal", 0.0, 2.0),), np.array([[1.0, 0.8], [0.8, 1.0]]),
                       matrix_kind="pearson", intercept=0.0, ate=ate,
                       prop_intercept=0.0, prop_coef=(0.5,), name="logistic")
    raise SpecError(f"unknown built-in DGP {name!r}; choose m1, m2, m3 or logistic")


BUILTINS = ("m1", "m2", "m3", "logistic")


class DgpDensity:
    """Exact log-densities of a simulated process."""

    def __init__(self, spec: DgpSpec):
        self.spec = spec
        self.corr = spec.pearson()
        self._copula = stats.multivariate_normal(mean=np.zeros(len(self.corr)), cov=self.corr)
        d = spec.n_covariates
        self._z_copula = stats.multivariate_normal(mean=np.zeros(d), cov=self.corr[:d, :d]) if d else None

    def log_copula(self, v) -> np.ndarray:
        """Gaussian copula log-density of rank rows ordered (V_Z, V_Y)."""
        return self._log_copula_scores(stats.norm.ppf(np.asarray(v, dtype=float)))

    def _log_copula_scores(self, g) -> np.ndarray:
        return np.atleast_1d(self._copula.logpdf(g)) - stats.norm.logpdf(g).sum(axis=-1)

    def outcome_logpdf(self, y, t, z=None) -> np.ndarray:
        mu = self.spec.outcome_mean(t, z)
        return stats.norm.logpdf(y, loc=mu, scale=self.spec.sigma)

    def outcome_rank(self, y, t, z=None) -> np.ndarray:
        return stats.norm.cdf((np.asarray(y) - self.spec.outcome_mean(t, z)) / self.spec.sigma)

    def frugal_factor(self, y, t, v_z, z=None) -> np.ndarray:
        """log p(y | do(t)) + log c(v_Z, v_Y): the quantity a frugal flow fits."""
        # the outcome's normal score is its standardised residual; going
        # through the rank would lose the far tails to rounding
        g_y = (np.asarray(y, dtype=float) - self.spec.outcome_mean(t, z)) / self.spec.sigma
        g = np.column_stack([stats.norm.ppf(np.asarray(v_z, dtype=float)), np.broadcast_to(g_y, np.shape(v_z)[:1])])
        return self.outcome_logpdf(y, t, z) + self._log_copula_scores(g)

    def joint(self, z, t, y) -> np.ndarray:
        """log p(z, t, y) for continuous covariates."""
        spec = self.spec
        if any(m.family == "bernoulli" for m in spec.margins):
            raise SpecError("the joint density is only available for continuous covariates")
        z = np.atleast_2d(np.asarray(z, dtype=float))
        t = np.asarray(t, dtype=float)
        v_z = np.column_stack([m.cdf(z[:, j]) for j, m in enumerate(spec.margins)])
        out = sum(m.logpdf(z[:, j]) for j, m in enumerate(spec.margins))
        eta = spec.linear_predictor(z)
        out = out + np.where(t == 1.0, log_expit(eta), log_expit(-eta))
        return out + self.frugal_factor(y, t, v_z, z)


@dataclass
class Simulation:
    data: Dataset
    true_ate: float
    density: DgpDensity
    v_z: np.ndarray = field(repr=False, default=None)
    v_y: np.ndarray = field(repr=False, default=None)


def simulate_dgp(spec: DgpSpec | str, n: int, seed: int = 0) -> Simulation:
    if isinstance(spec, str):
        spec = builtin_spec(spec)
    if n < 1:
        raise InvalidParameterError("sample size must be positive")
    corr = spec.pearson()
    d = spec.n_covariates
    g = substream(seed, "dgp-copula").standard_normal((n, d + 1)) @ np.linalg.cholesky(corr).T
    v = stats.norm.cdf(g)
    v_z, v_y = v[:, :d], v[:, d]
    z = np.column_stack([m.ppf(v_z[:, j]) for j, m in enumerate(spec.margins)])
    p = spec.propensity(z)
    t = (substream(seed, "dgp-treatment").random(n) < p).astype(float)
    y = spec.outcome_mean(t, z) + spec.sigma * stats.norm.ppf(v_y)
    kinds = tuple(m.kind for m in spec.margins)
    data = Dataset(z, t, y, tuple(f"z{j + 1}" for j in range(d)), kinds)
    return Simulation(data, spec.true_ate(), DgpDensity(spec), v_z, v_y)
