"""Joint fit of the causal margin Y | do(T) and the copula of (V_Y, V_Z).

The outcome rank V_Y = F(y | do(t)) enters the copula flow as its first,
untransformed dimension, so it stays marginally uniform while the covariate
ranks condition on it. Maximising the sum of the margin log-density and the
copula log-density fits the interventional margin rather than the observed
conditional law of Y given T.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .copula import CopulaFlow
from .data import Dataset
from .engine import Parameter, no_grad
from .engine import tensor as T
from .errors import (DegenerateTreatmentError, InsufficientDataError, InvalidParameterError, NumericError,
                     SpecError, UnsupportedVariantError)
from .marginals import (RANK_EPS, DiscreteMarginal, SplineStack, StepCdf, fit_marginal_flow,
                        marginal_from_state)
from .propensity import check_binary
from .rng import substream
from .training import History, TrainConfig, fit, train_val_split

VARIANTS = ("parametric-gaussian", "nsf-with-ate-shift", "nsf-unconditional")
MIN_ROWS = 100
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG_HALF = math.log(0.5)


# ---------------------------------------------------------------------------
# causal margins
#
# Each margin maps (y, t) to s = 2 F(y | do(t)) - 1 in [-1, 1] together with
# log p(y | do(t)).


class GaussianMargin:
    """Y | do(T=t) ~ N(a + tau t + sum_j (c_j + d_j t) w_j, sigma^2) with shared sigma."""

    tag = "parametric-gaussian"

    def __init__(self, intercept=0.0, ate=0.0, scale=1.0, w_coef=(), tw_coef=()):
        if scale <= 0:
            raise InvalidParameterError("gaussian margin scale must be positive")
        self.intercept = Parameter(np.array(float(intercept)), "intercept")
        self.ate = Parameter(np.array(float(ate)), "ate")
        self.log_scale = Parameter(np.array(math.log(scale)), "log_scale")
        self.w_coef = Parameter(np.asarray(w_coef, dtype=float).reshape(-1), "w_coef")
        self.tw_coef = Parameter(np.asarray(tw_coef, dtype=float).reshape(-1), "tw_coef")

    @property
    def n_w(self) -> int:
        return self.w_coef.value.size

    @property
    def scale(self) -> float:
        return float(np.exp(self.log_scale.value))

    def parameters(self):
        ps = [self.intercept, self.ate, self.log_scale]
        return ps + ([self.w_coef, self.tw_coef] if self.n_w else [])

    def _mean(self, t, w):
        mu = self.intercept + self.ate * t
        if self.n_w:
            mu = mu + T.matmul(T.as_tensor(w), T.reshape(self.w_coef, (self.n_w, 1))).reshape(-1)
            tw = np.asarray(w) * np.asarray(t)[:, None]
            mu = mu + T.matmul(T.as_tensor(tw), T.reshape(self.tw_coef, (self.n_w, 1))).reshape(-1)
        return mu

    def forward(self, y, t, w=None):
        e = (T.as_tensor(y) - self._mean(t, w)) * T.exp(-self.log_scale)
        logp = -0.5 * e * e - _LOG_SQRT_2PI - self.log_scale
        return 2.0 * T.normal_cdf(e) - 1.0, logp

    def inverse(self, v, t, w=None) -> np.ndarray:
        with no_grad():
            mu = self._mean(np.asarray(t, dtype=float), w).value
        return mu + self.scale * ndtri(v)

    def conditional_ate(self, w=None) -> np.ndarray | float:
        if w is None or not self.n_w:
            return float(self.ate.value)
        return float(self.ate.value) + np.atleast_2d(w) @ self.tw_coef.value

    def state(self) -> dict:
        return {"tag": self.tag, "intercept": float(self.intercept.value), "ate": float(self.ate.value),
                "log_scale": float(self.log_scale.value), "w_coef": self.w_coef.value,
                "tw_coef": self.tw_coef.value}

    @classmethod
    def from_state(cls, st) -> "GaussianMargin":
        m = cls(st["intercept"], st["ate"], 1.0, st["w_coef"], st["tw_coef"])
        m.log_scale.value = np.array(float(st["log_scale"]))
        return m


class SplineMargin:
    """Standardise, optionally remove a location shift tau t, tanh, spline stack.

    With ``shift`` the law of Y | do(T=1) is the law of Y | do(T=0) moved by
    tau, so tau is the ATE. Without it the margin ignores T.
    """

    def __init__(self, loc: float, scale: float, layers: int, knots: int, shift: bool, ate: float = 0.0,
                 raw=None):
        self.loc = float(loc)
        self.scale = float(scale)
        self.shift = shift
        self.stack = SplineStack(layers, knots, raw)
        self.ate = Parameter(np.array(float(ate) if shift else 0.0), "ate")

    @property
    def tag(self) -> str:
        return "nsf-with-ate-shift" if self.shift else "nsf-unconditional"

    @property
    def n_w(self) -> int:
        return 0

    def parameters(self):
        return self.stack.params + ([self.ate] if self.shift else [])

    def forward(self, y, t, w=None):
        y = T.as_tensor(y)
        if self.shift:
            y = y - self.ate * t
        ys = (y - self.loc) * (1.0 / self.scale)
        s, ld = self.stack.forward(T.tanh(ys))
        return s, ld - 2.0 * T.log_cosh(ys) - math.log(self.scale) + _LOG_HALF

    def inverse(self, v, t, w=None) -> np.ndarray:
        h = np.clip(self.stack.inverse(2.0 * np.asarray(v, dtype=float) - 1.0), -1.0 + 1e-15, 1.0 - 1e-15)
        y = self.loc + self.scale * np.arctanh(h)
        return y + float(self.ate.value) * np.asarray(t, dtype=float) if self.shift else y

    def conditional_ate(self, w=None) -> float:
        if not self.shift:
            raise UnsupportedVariantError(
                "the unconditional spline margin does not learn an ATE during training")
        return float(self.ate.value)

    def state(self) -> dict:
        return {"tag": self.tag, "loc": self.loc, "scale": self.scale, "knots": self.stack.knots,
                "raw": self.stack.raw(), "ate": float(self.ate.value)}

    @classmethod
    def from_state(cls, st) -> "SplineMargin":
        raw = np.asarray(st["raw"])
        return cls(st["loc"], st["scale"], raw.shape[0], int(st["knots"]),
                   st["tag"] == "nsf-with-ate-shift", st["ate"], raw=list(raw))


def margin_from_state(st):
    return GaussianMargin.from_state(st) if st["tag"] == "parametric-gaussian" else SplineMargin.from_state(st)


def initial_margin(variant: str, y, t, cfg: TrainConfig, n_w: int = 0):
    """Margin initialised from simple data summaries (arm means, pooled scale)."""
    if variant not in VARIANTS:
        raise SpecError(f"unknown causal margin variant {variant!r}; choose from {VARIANTS}")
    y0, y1 = y[t == 0], y[t == 1]
    dom = float(y1.mean() - y0.mean())
    pooled = float(np.sqrt((((y0 - y0.mean()) ** 2).sum() + ((y1 - y1.mean()) ** 2).sum()) / (y.size - 2)))
    if variant == "parametric-gaussian":
        return GaussianMargin(float(y0.mean()), dom, max(pooled, 1e-3), np.zeros(n_w), np.zeros(n_w))
    if n_w:
        raise SpecError("heterogeneous effects need the parametric-gaussian margin")
    shift = variant == "nsf-with-ate-shift"
    base = y - dom * t if shift else y
    return SplineMargin(float(base.mean()), max(float(base.std()), 1e-3), cfg.flow_layers, cfg.knots,
                        shift, ate=dom)


# ---------------------------------------------------------------------------
# model


@dataclass
class LogLikelihood:
    margin: np.ndarray
    copula: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.margin + self.copula

    def mean(self) -> float:
        return float(np.mean(self.total))


class FrugalFlowModel:
    def __init__(self, margin, copula: CopulaFlow, marginals: list, z_names, z_kinds,
                 cfg: TrainConfig, w_columns=()):
        self.margin = margin
        self.copula = copula
        self.marginals = list(marginals)
        self.z_names = tuple(z_names)
        self.z_kinds = tuple(z_kinds)
        self.cfg = cfg
        self.w_columns = tuple(int(j) for j in w_columns)
        d = len(self.marginals)
        self.wbar_columns = tuple(j for j in range(d) if j not in self.w_columns)
        # copula dimension order: W ranks, outcome rank, remaining covariate ranks
        self.rank_order = self.w_columns + ("y",) + self.wbar_columns
        self.history: History | None = None
        self.trained = False

    @property
    def variant(self) -> str:
        return self.margin.tag

    @property
    def n_covariates(self) -> int:
        return len(self.marginals)

    @property
    def y_position(self) -> int:
        return len(self.w_columns)

    def parameters(self):
        return self.margin.parameters() + self.copula.parameters()

    def covariate_ranks(self, z, rng=None) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        rng = rng or substream(self.cfg.seed, "dequantise")
        return np.column_stack([m.to_ranks(z[:, j], rng) for j, m in enumerate(self.marginals)])

    def covariates_from_ranks(self, v_z) -> np.ndarray:
        return np.column_stack([m.from_ranks(v_z[:, j]) for j, m in enumerate(self.marginals)])

    def _w(self, z):
        if not self.w_columns:
            return None
        return np.asarray(z, dtype=float)[:, list(self.w_columns)]

    def _assemble(self, s_y, s_z):
        """Copula input tensor with columns in ``rank_order``."""
        n = s_z.shape[0]
        cols = []
        for key in self.rank_order:
            if key == "y":
                cols.append(T.reshape(s_y, (n, 1)))
            else:
                cols.append(T.Tensor(s_z[:, key:key + 1]))
        return T.concat(cols, axis=-1)

    def log_likelihood_tensors(self, y, t, v_z, z=None):
        s_y, margin_lp = self.margin.forward(y, t, self._w(z))
        copula_lp = self.copula.log_density_from(self._assemble(s_y, 2.0 * v_z - 1.0))
        return margin_lp, copula_lp

    def rank_matrix(self, y, t, v_z, z=None) -> np.ndarray:
        """Copula-space ranks in ``rank_order`` for observed rows."""
        v_y = causal_margin_ranks(self, y, t, z)
        cols = [v_y if key == "y" else v_z[:, key] for key in self.rank_order]
        return np.column_stack(cols)

    def state(self) -> dict:
        return {
            "margin": self.margin.state(), "copula": self.copula.state(),
            "marginals": [m.state() for m in self.marginals],
            "z_names": list(self.z_names), "z_kinds": list(self.z_kinds),
            "cfg": self.cfg.to_dict(), "w_columns": list(self.w_columns),
        }

    @classmethod
    def from_state(cls, st: dict) -> "FrugalFlowModel":
        model = cls(margin_from_state(st["margin"]), CopulaFlow.from_state(st["copula"]),
                    [marginal_from_state(m) for m in st["marginals"]], st["z_names"], st["z_kinds"],
                    TrainConfig.from_dict(st["cfg"]), st["w_columns"])
        model.trained = True
        return model


def frugal_log_likelihood(model: FrugalFlowModel, y, t, v_z, z=None) -> LogLikelihood:
    """Per-row log p(y | do(t)) and log c(v_Z | v_Y), reported separately."""
    y = np.asarray(y, dtype=float).ravel()
    t = check_binary(t)
    v_z = np.asarray(v_z, dtype=float)
    if v_z.ndim == 1:
        v_z = v_z[:, None]
    with no_grad(), np.errstate(invalid="ignore"):
        margin_lp, copula_lp = model.log_likelihood_tensors(y, t, v_z, z)
    m = np.broadcast_to(margin_lp.value, y.shape).copy()
    c = np.broadcast_to(copula_lp.value, y.shape).copy()
    for name, arr in (("causal margin", m), ("copula", c)):
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise NumericError(f"non-finite {name} log-density at row {bad[0]}", op=name, row=int(bad[0]))
    return LogLikelihood(m, c)


def _build_marginals(data: Dataset, cfg: TrainConfig, seed: int) -> list:
    out = []
    for j, kind in enumerate(data.z_kinds):
        col = data.z[:, j]
        if kind == "discrete":
            out.append(DiscreteMarginal(StepCdf.from_samples(col)))
        else:
            out.append(fit_marginal_flow(col, cfg, seed=seed + j))
    return out


def _check_data(data: Dataset):
    if data.n < MIN_ROWS:
        raise InsufficientDataError(f"need at least {MIN_ROWS} rows to fit a frugal flow, got {data.n}")
    t = check_binary(data.t)
    if np.unique(t).size < 2:
        raise DegenerateTreatmentError("both treatment arms must be present")
    if not (np.all(np.isfinite(data.y)) and np.all(np.isfinite(data.z))):
        raise InvalidParameterError("data contain non-finite values")


def fit_frugal_flow(data: Dataset, variant: str = "parametric-gaussian", cfg: TrainConfig | None = None,
                    marginals=None, mode: str = "joint", resample_dequantisation: bool = False,
                    w_columns=(), pinned: bool = True) -> FrugalFlowModel:
    """Fit the causal margin and the conditional copula by maximum likelihood.

    ``mode="joint"`` optimises both terms together. ``mode="sequential"``
    first fits the margin alone (which then learns Y | T rather than
    Y | do(T)) and afterwards fits the copula with the margin frozen; it is
    kept as a baseline.
    """
    cfg = cfg or TrainConfig()
    if mode not in ("joint", "sequential"):
        raise SpecError(f"unknown fit mode {mode!r}")
    _check_data(data)
    seed = cfg.seed
    if marginals is None:
        marginals = _build_marginals(data, cfg, seed)
    elif len(marginals) != data.n_covariates:
        raise SpecError("one marginal handler per covariate is required")
    w_columns = tuple(int(j) for j in w_columns)
    margin = initial_margin(variant, data.y, data.t, cfg, n_w=len(w_columns))

    d = data.n_covariates
    k = len(w_columns)
    fixed = np.zeros(d + 1, dtype=bool)
    fixed[0] = True
    fixed[k] = True
    if k:
        orders = [np.concatenate([np.arange(k + 1), o]) for o in
                  _wbar_orders(d - k, cfg.flow_layers, k + 1, seed)]
    else:
        orders = None
    copula = CopulaFlow(d + 1, cfg.flow_layers, cfg.knots, cfg.nn_width, cfg.nn_depth, seed=seed,
                        fixed=fixed, orders=orders, pinned=pinned)
    model = FrugalFlowModel(margin, copula, marginals, data.z_names, data.z_kinds, cfg, w_columns)

    deq = substream(seed, "dequantise")
    v_z = model.covariate_ranks(data.z, deq)
    y, t, z = data.y, data.t, data.z
    rng = substream(seed, "frugal-fit")
    train_idx, val_idx = train_val_split(data.n, cfg.train_fraction, rng, strata=t)
    needs_noise = resample_dequantisation and any(m.kind == "discrete" for m in marginals)

    def redraw(epoch):
        nonlocal v_z
        if needs_noise and epoch > 0:
            v_z = model.covariate_ranks(z, deq)

    def joint_nll(rows):
        m_lp, c_lp = model.log_likelihood_tensors(y[rows], t[rows], v_z[rows], z[rows])
        return -T.mean(m_lp + c_lp)

    def margin_nll(rows):
        m_lp, _ = model.log_likelihood_tensors(y[rows], t[rows], v_z[rows], z[rows])
        return -T.mean(m_lp)

    def copula_nll(rows):
        with no_grad():
            s_y, _ = model.margin.forward(y[rows], t[rows], model._w(z[rows]))
        s = model._assemble(T.Tensor(s_y.value), 2.0 * v_z[rows] - 1.0)
        return -T.mean(model.copula.log_density_from(s))

    if mode == "joint":
        model.history = fit(model.parameters(), joint_nll, train_idx, val_idx, cfg, rng,
                            label="frugal flow", on_epoch=redraw)
    else:
        fit(margin.parameters(), margin_nll, train_idx, val_idx, cfg, rng, label="causal margin")
        model.history = fit(copula.parameters(), copula_nll, train_idx, val_idx, cfg, rng,
                            label="copula given margin", on_epoch=redraw)
    model.trained = True
    copula.trained = True
    return model


def _wbar_orders(n: int, layers: int, offset: int, seed: int) -> list[np.ndarray]:
    rng = substream(seed, "copula-permutation")
    base = np.arange(offset, offset + n)
    return [base.copy()] + [base[rng.permutation(n)] for _ in range(1, layers)]


def fit_heterogeneous_frugal_flow(data: Dataset, w_columns, cfg: TrainConfig | None = None,
                                  marginals=None, pinned: bool = True) -> FrugalFlowModel:
    """Frugal flow whose Gaussian margin depends on the effect modifiers W.

    The copula orders ranks as (V_W, V_Y, V_Wbar). The outcome rank is fixed
    and W ranks never condition on it, so V_Y stays uniform and independent of
    V_W; only Wbar ranks depend on it.
    """
    w_columns = sorted({int(j) for j in w_columns})
    d = data.n_covariates
    if not w_columns:
        raise SpecError("no effect modifiers given; use fit_frugal_flow for a homogeneous effect")
    if len(w_columns) >= d:
        raise SpecError("effect modifiers cover every covariate; use fit_frugal_flow instead")
    if any(j < 0 or j >= d for j in w_columns):
        raise SpecError(f"effect-modifier columns must lie in [0, {d})")
    return fit_frugal_flow(data, "parametric-gaussian", cfg, marginals, w_columns=tuple(w_columns),
                           pinned=pinned)


def estimated_ate(model: FrugalFlowModel) -> float:
    """The learned ATE: the treatment coefficient or the location shift."""
    ate = model.margin.conditional_ate()
    return float(ate)


def conditional_ate(model: FrugalFlowModel, w) -> np.ndarray:
    """Effect of T at effect-modifier values ``w`` (rows of the W columns)."""
    return np.asarray(model.margin.conditional_ate(np.atleast_2d(np.asarray(w, dtype=float))))


def causal_margin_ranks(model: FrugalFlowModel, y, t, z=None) -> np.ndarray:
    """V_Y = F(y | do(t)), clamped into (0, 1)."""
    y = np.asarray(y, dtype=float).ravel()
    t = check_binary(t)
    with no_grad():
        s, _ = model.margin.forward(y, t, model._w(z))
    v = 0.5 * (np.broadcast_to(s.value, y.shape) + 1.0)
    return np.clip(v, RANK_EPS, 1.0 - RANK_EPS)


def gaussian_margin_cdf(y, t, intercept: float, ate: float, scale: float) -> np.ndarray:
    return ndtr((np.asarray(y) - intercept - ate * np.asarray(t)) / scale)
