"""Benchmark generation from a fitted frugal flow and treatment model.

Steps, in order: (1) a Gaussian-copula pair (U_T, V_Y) carrying the chosen
unobserved confounding, (2) independent uniforms U_Z, (3) the copula flow
inverse giving correlated covariate ranks V_Z, (4) covariates through the
marginal inverses, (5) treatment from the propensity at U_T, (6) outcome from
the chosen causal margin at (V_Y, T).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, ndtr, ndtri

from .data import Dataset
from .errors import InvalidParameterError, SchemaError, SpecError
from .frugal import FrugalFlowModel
from .marginals import RANK_EPS
from .propensity import PropensityFlowModel, PropensityOverride, sample_treatment, treatment_from_propensity
from .rng import substream

MARGINS = ("gaussian", "logistic", "probit", "learned-nsf")
PROPENSITIES = ("learned", "override", "randomized")
_V_CLIP = 1e-16


@dataclass(frozen=True)
class MarginSpec:
    """Outcome law under do(T): gaussian(tau, intercept, sigma), logistic/probit(beta, c) or learned-nsf(tau)."""

    kind: str = "gaussian"
    tau: float = 0.0
    intercept: float = 0.0
    sigma: float = 1.0
    beta: float = 0.0
    c: float = 0.0

    def __post_init__(self):
        if self.kind not in MARGINS:
            raise SpecError(f"unknown margin {self.kind!r}; choose from {MARGINS}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise SpecError("gaussian margin needs sigma > 0")


@dataclass(frozen=True)
class PropensitySpec:
    kind: str = "learned"
    p: float = 0.5
    override: PropensityOverride | None = None

    def __post_init__(self):
        if self.kind not in PROPENSITIES:
            raise SpecError(f"unknown propensity {self.kind!r}; choose from {PROPENSITIES}")
        if self.kind == "randomized" and not 0.0 < self.p < 1.0:
            raise SpecError("randomized treatment probability must lie in (0, 1)")
        if self.kind == "override" and self.override is None:
            raise SpecError("override propensity needs a PropensityOverride")


@dataclass(frozen=True)
class HeterogeneitySpec:
    """Effect modification by covariates W.

    ``learned`` reuses the fitted conditional margin; ``linear`` uses
    y = intercept + tau t + sum_j coef_j t w_j + sigma Phi^-1(v).
    """

    w_columns: tuple
    tag: str = "learned"
    coef: tuple = ()

    def __post_init__(self):
        if self.tag not in ("learned", "linear"):
            raise SpecError(f"unknown heterogeneity tag {self.tag!r}")
        if self.tag == "linear" and len(self.coef) != len(self.w_columns):
            raise SpecError("linear heterogeneity needs one coefficient per effect modifier")


@dataclass(frozen=True)
class BenchmarkSpec:
    n: int
    seed: int = 0
    rho: float = 0.0
    margin: MarginSpec = field(default_factory=MarginSpec)
    propensity: PropensitySpec = field(default_factory=PropensitySpec)
    heterogeneity: HeterogeneitySpec | None = None

    def __post_init__(self):
        if int(self.n) < 1:
            raise SpecError("benchmark size n must be at least 1")
        if not abs(self.rho) < 1.0:
            raise SpecError("confounding correlation rho must satisfy |rho| < 1")
        if self.heterogeneity is not None and self.margin.kind != "gaussian":
            raise SpecError("heterogeneous effects are only defined for the gaussian margin")

    def with_(self, **kw) -> "BenchmarkSpec":
        return replace(self, **kw)


@dataclass
class Benchmark:
    data: Dataset
    v_y: np.ndarray
    u_t: np.ndarray
    v_z: np.ndarray
    spec: BenchmarkSpec


def gaussian_copula_pair(rho: float, n: int, seed: int = 0):
    """(u1, u2) uniform ranks with Gaussian-copula correlation ``rho``."""
    if not abs(rho) < 1.0:
        raise InvalidParameterError("Gaussian copula correlation must satisfy |rho| < 1")
    g = substream(seed, "copula-pair").standard_normal((2, int(n)))
    u1 = ndtr(g[0])
    u2 = ndtr(rho * g[0] + np.sqrt(1.0 - rho * rho) * g[1])
    return np.clip(u1, _V_CLIP, 1 - _V_CLIP), np.clip(u2, _V_CLIP, 1 - _V_CLIP)


def outcome_from_margin(v, t, margin: MarginSpec, model: FrugalFlowModel | None = None, w=None,
                        heterogeneity: HeterogeneitySpec | None = None) -> np.ndarray:
    v = np.clip(np.asarray(v, dtype=float), _V_CLIP, 1 - _V_CLIP)
    t = np.asarray(t, dtype=float)
    if heterogeneity is not None:
        if heterogeneity.tag == "learned":
            if model is None or model.w_columns != tuple(heterogeneity.w_columns):
                raise SpecError("learned heterogeneity needs a model fitted with the same effect modifiers")
            return model.margin.inverse(v, t, w)
        coef = np.asarray(heterogeneity.coef, dtype=float)
        return (margin.intercept + margin.tau * t + t * (np.asarray(w) @ coef)
                + margin.sigma * ndtri(v))
    if margin.kind == "gaussian":
        return margin.intercept + margin.tau * t + margin.sigma * ndtri(v)
    if margin.kind == "logistic":
        return (v < expit(margin.beta * t + margin.c)).astype(float)
    if margin.kind == "probit":
        return (v < ndtr(margin.beta * t + margin.c)).astype(float)
    if margin.kind == "learned-nsf":
        if model is None:
            raise SpecError("the learned-nsf margin needs a fitted frugal flow")
        return model.margin.inverse(v, np.zeros_like(t), w) + margin.tau * t
    raise SpecError(f"unknown margin {margin.kind!r}")


def _check_models(ff: FrugalFlowModel, pf, spec: BenchmarkSpec):
    if spec.propensity.kind == "learned":
        if not isinstance(pf, PropensityFlowModel):
            raise SchemaError("a learned propensity needs a fitted propensity flow")
        if pf.n_covariates != ff.n_covariates:
            raise SchemaError(f"propensity flow expects {pf.n_covariates} covariates, "
                              f"frugal flow has {ff.n_covariates}")
    het = spec.heterogeneity
    if het is not None and tuple(het.w_columns) != ff.w_columns:
        if het.tag == "learned" or ff.w_columns:
            raise SpecError("heterogeneity spec does not match the model's effect modifiers")
    if het is None and ff.w_columns:
        raise SpecError("the model has effect modifiers; give a heterogeneity spec")


def generate_benchmark_details(ff: FrugalFlowModel, pf, spec: BenchmarkSpec) -> Benchmark:
    _check_models(ff, pf, spec)
    n, seed, d = int(spec.n), spec.seed, ff.n_covariates
    # (1) confounded rank pair
    u_t, v_y = gaussian_copula_pair(spec.rho, n, seed)
    # (2) independent covariate uniforms
    u_z = substream(seed, "u-z").random((n, d))
    # (3) copula inverse with V_Y in its fixed slot
    base = np.column_stack([v_y if key == "y" else u_z[:, key] for key in ff.rank_order])
    ranks = ff.copula.sample(np.clip(base, RANK_EPS, 1 - RANK_EPS))
    v_z = np.empty((n, d))
    for pos, key in enumerate(ff.rank_order):
        if key != "y":
            v_z[:, key] = ranks[:, pos]
    # (4) covariates
    z = ff.covariates_from_ranks(v_z)
    # (5) treatment
    prop = spec.propensity
    if prop.kind == "learned":
        t = sample_treatment(pf, z, u_t)
    elif prop.kind == "override":
        t = treatment_from_propensity(prop.override.validate(z)(z), u_t)
    else:
        t = treatment_from_propensity(np.full(n, prop.p), u_t)
    # (6) outcome
    w = z[:, list(spec.heterogeneity.w_columns)] if spec.heterogeneity is not None else None
    y = outcome_from_margin(v_y, t, spec.margin, ff, w, spec.heterogeneity)
    data = Dataset(z, t, y, ff.z_names, ff.z_kinds)
    return Benchmark(data, v_y, u_t, v_z, spec)


def generate_benchmark(ff: FrugalFlowModel, pf, spec: BenchmarkSpec) -> Dataset:
    return generate_benchmark_details(ff, pf, spec).data


def _midpoints(k: int = 4096) -> np.ndarray:
    return (np.arange(k) + 0.5) / k


def generation_ate(spec: BenchmarkSpec, ff: FrugalFlowModel | None = None) -> float:
    """E[Y | do(T=1)] - E[Y | do(T=0)] of the generator, from the outcome map itself.

    Under do(T) the outcome rank is uniform, so the ATE is the average over v
    of y(v, 1) - y(v, 0). For location-shift margins that difference is tau at
    every v. Binary margins give the risk difference.
    """
    m = spec.margin
    if m.kind in ("logistic", "probit"):
        link = expit if m.kind == "logistic" else ndtr
        return float(link(m.beta + m.c) - link(m.c))
    if spec.heterogeneity is not None:
        raise SpecError("the ATE of a heterogeneous benchmark depends on the covariate law; "
                        "use conditional effects instead")
    v = _midpoints()
    diff = outcome_from_margin(v, np.ones_like(v), m, ff) - outcome_from_margin(v, np.zeros_like(v), m, ff)
    return float(np.mean(diff))


@dataclass
class SweepRow:
    rho: float
    mean_bias: float
    mean_abs_bias: float
    sd: float
    repeats: int


def confounding_sweep(ff: FrugalFlowModel, pf, base: BenchmarkSpec, rho_list, repeats: int = 20) -> list[SweepRow]:
    """Difference-of-means bias per confounding level, averaged over replicate datasets."""
    from .estimators import difference_of_means

    rho_list = [float(r) for r in rho_list]
    if rho_list != sorted(rho_list):
        raise InvalidParameterError("rho_list must be sorted")
    if base.margin.kind not in ("gaussian", "learned-nsf"):
        raise SpecError("the sweep compares against tau; use a gaussian or learned-nsf margin")
    tau = base.margin.tau
    rows = []
    for rho in rho_list:
        bias = np.array([difference_of_means(generate_benchmark(
            ff, pf, base.with_(rho=rho, seed=base.seed + r))).point - tau for r in range(repeats)])
        rows.append(SweepRow(rho, float(bias.mean()), float(np.abs(bias).mean()),
                             float(bias.std(ddof=1)) if repeats > 1 else 0.0, repeats))
    return rows
