"""Treatment model: a conditional spline flow on dequantised treatment ranks.

The flow maps the rank V_T in (0,1) to a base uniform given covariates z,
so its forward map is a conditional CDF C(v | z). Because T = 1 exactly when
V_T > F_T(0), the implied propensity is 1 - C(F_T(0) | z).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import bijectors as bij
from .engine import MaskedMLP, no_grad
from .engine import tensor as T
from .errors import DegenerateTreatmentError, DimensionError, DomainError, InvalidParameterError
from .marginals import RANK_EPS, StepCdf, distributional_transform, inverse_distributional_transform
from .rng import substream
from .training import History, TrainConfig, fit, train_val_split

POSITIVITY_EPS = 1e-4


def check_binary(t) -> np.ndarray:
    t = np.asarray(t, dtype=float).ravel()
    if not np.all((t == 0.0) | (t == 1.0)):
        raise DomainError("treatment must be coded 0/1")
    return t


class PropensityFlowModel:
    def __init__(self, cdf: StepCdf, n_covariates: int, z_loc, z_scale, layers: int = 5,
                 knots: int = 8, width: int = 50, depth: int = 4, seed: int = 0):
        self.cdf = cdf
        self.n_covariates = n_covariates
        self.z_loc = np.asarray(z_loc, dtype=float)
        self.z_scale = np.asarray(z_scale, dtype=float)
        self.knots = knots
        self.width = width
        self.depth = depth
        self.n_params = bij.n_spline_params(knots)
        rng = substream(seed, "propensity-init")
        init = bij.identity_raw(knots)
        self.nets = [MaskedMLP([], np.ones(self.n_params, dtype=int), width, depth,
                               context_dim=n_covariates, rng=rng, final_bias=init)
                     for _ in range(layers)]
        self.trained = False
        self.history: History | None = None

    def parameters(self) -> list:
        return [p for net in self.nets for p in net.parameters()]

    def _context(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[1] != self.n_covariates:
            raise DimensionError(f"expected {self.n_covariates} covariates, got {z.shape[1]}")
        return (z - self.z_loc) / self.z_scale

    def log_density_tensor(self, v, ctx):
        s = T.as_tensor(2.0 * np.asarray(v, dtype=float) - 1.0)
        total = 0.0
        for net in self.nets:
            xk, yk, d = bij.spline_knots(net(None, ctx), self.knots)
            s, ld = bij.rqs_forward(s, xk, yk, d)
            total = total + ld
        return total

    def conditional_cdf(self, v, z) -> np.ndarray:
        """C(v | z) for ranks ``v`` broadcast against the covariate rows."""
        ctx = self._context(z)
        v = np.broadcast_to(np.asarray(v, dtype=float), (ctx.shape[0],))
        with no_grad():
            s = T.Tensor(2.0 * v - 1.0)
            for net in self.nets:
                xk, yk, d = bij.spline_knots(net(None, ctx), self.knots)
                s, _ = bij.rqs_forward(s, xk, yk, d)
        return 0.5 * (s.value + 1.0)

    def inverse_cdf(self, u, z) -> np.ndarray:
        ctx = self._context(z)
        s = 2.0 * np.asarray(u, dtype=float) - 1.0
        with no_grad():
            for net in reversed(self.nets):
                xk, yk, d = bij.spline_knots(net(None, ctx), self.knots)
                s, _ = bij.rqs_inverse(s, xk.value, yk.value, d.value)
        return 0.5 * (s + 1.0)

    def propensity(self, z) -> np.ndarray:
        cut = self.cdf.values[0]
        return 1.0 - self.conditional_cdf(cut, z)

    def state(self) -> dict:
        return {"support": self.cdf.support, "left": self.cdf.left, "values": self.cdf.values,
                "n_covariates": self.n_covariates, "z_loc": self.z_loc, "z_scale": self.z_scale,
                "knots": self.knots, "width": self.width, "depth": self.depth,
                "params": [p.value for p in self.parameters()], "layers": len(self.nets)}

    @classmethod
    def from_state(cls, st: dict) -> "PropensityFlowModel":
        cdf = StepCdf(np.asarray(st["support"]), np.asarray(st["left"]), np.asarray(st["values"]))
        model = cls(cdf, int(st["n_covariates"]), st["z_loc"], st["z_scale"], layers=int(st["layers"]),
                    knots=int(st["knots"]), width=int(st["width"]), depth=int(st["depth"]))
        params = model.parameters()
        if len(params) != len(st["params"]):
            raise DimensionError("stored propensity parameters do not match the architecture")
        for p, value in zip(params, st["params"]):
            p.value = np.array(value, dtype=float)
        model.trained = True
        return model


def fit_propensity_flow(t, z, cfg: TrainConfig | None = None, seed: int | None = None) -> PropensityFlowModel:
    cfg = cfg or TrainConfig()
    seed = cfg.seed if seed is None else seed
    t = check_binary(t)
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] != t.size:
        raise DimensionError("treatment and covariates have different row counts")
    if np.unique(t).size < 2:
        raise DegenerateTreatmentError("both treatment arms must be present to fit a propensity flow")
    scale = z.std(axis=0)
    scale[scale == 0.0] = 1.0
    cdf = StepCdf.from_samples(t)
    model = PropensityFlowModel(cdf, z.shape[1], z.mean(axis=0), scale, cfg.flow_layers, cfg.knots,
                                cfg.nn_width, cfg.nn_depth, seed=seed)
    v = distributional_transform(t, cdf, substream(seed, "dequantise").random(t.size))
    v = np.clip(v, RANK_EPS, 1.0 - RANK_EPS)
    ctx = model._context(z)
    rng = substream(seed, "propensity-fit")
    train_idx, val_idx = train_val_split(t.size, cfg.train_fraction, rng, strata=t)

    def nll(rows):
        return -T.mean(model.log_density_tensor(v[rows], ctx[rows]))

    model.history = fit(model.parameters(), nll, train_idx, val_idx, cfg, rng, label="propensity flow")
    model.trained = True
    return model


def sample_treatment(model: PropensityFlowModel, z, u) -> np.ndarray:
    """Invert the conditional flow at ``u`` and map the rank back to {0, 1}."""
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise DomainError("treatment uniforms must lie strictly inside (0, 1)")
    v = model.inverse_cdf(u, z)
    return inverse_distributional_transform(v, model.cdf)


@dataclass(frozen=True)
class PropensityOverride:
    """Built-in propensity functions: ``constant`` or ``logistic`` (linear in z)."""

    kind: str
    p: float = 0.5
    intercept: float = 0.0
    coef: tuple = field(default_factory=tuple)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if self.kind == "constant":
            return np.full(z.shape[0], float(self.p))
        if self.kind == "logistic":
            coef = np.asarray(self.coef, dtype=float)
            if coef.size != z.shape[1]:
                raise DimensionError(f"logistic override has {coef.size} coefficients for {z.shape[1]} covariates")
            return expit(self.intercept + z @ coef)
        raise InvalidParameterError(f"unknown propensity override {self.kind!r}")

    def validate(self, z, rows: int = 1000, seed: int = 0) -> "PropensityOverride":
        if self.kind == "constant" and not 0.0 < self.p < 1.0:
            raise InvalidParameterError(f"constant propensity must lie in (0, 1), got {self.p}")
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        pick = substream(seed, "override-check").integers(0, z.shape[0], size=min(rows, z.shape[0]))
        p = self(z[pick])
        if not np.all((p > 0.0) & (p < 1.0)):
            raise InvalidParameterError("propensity override leaves (0, 1) on sampled covariates")
        return self


def treatment_from_propensity(p, u) -> np.ndarray:
    """T = 1{u > 1 - p}; monotone in both p and u."""
    return (np.asarray(u, dtype=float) > 1.0 - np.asarray(p, dtype=float)).astype(float)
