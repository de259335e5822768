"""Univariate covariate models: spline flows for continuous columns and
dequantised empirical CDFs for discrete ones."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import bijectors as bij
from .engine import Parameter, no_grad
from .engine import tensor as T
from .errors import DegenerateColumnError, DomainError, InsufficientDataError, UnknownLevelError
from .rng import substream
from .training import History, TrainConfig, fit, train_val_split

RANK_EPS = 1e-6
_LOG_HALF = math.log(0.5)


class SplineStack:
    """Unconditional composition of splines on [-1, 1] with free knot parameters."""

    def __init__(self, layers: int, knots: int, raw=None):
        self.knots = knots
        if raw is None:
            raw = [bij.identity_raw(knots) for _ in range(layers)]
        self.params = [Parameter(np.array(r, dtype=float)) for r in raw]

    @property
    def layers(self) -> int:
        return len(self.params)

    def forward(self, s):
        """Tensor in, (Tensor, log-derivative Tensor) out."""
        total = 0.0
        for p in self.params:
            xk, yk, d = bij.spline_knots(p, self.knots)
            s, ld = bij.rqs_forward(s, xk, yk, d)
            total = total + ld
        return s, total

    def inverse(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        with no_grad():
            for p in reversed(self.params):
                xk, yk, d = bij.spline_knots(p, self.knots)
                s, _ = bij.rqs_inverse(s, xk.value, yk.value, d.value)
        return s

    def frozen(self) -> list[bij.RqsSpline]:
        return [bij.RqsSpline.from_raw(p.value, self.knots) for p in self.params]

    def raw(self) -> np.ndarray:
        return np.stack([p.value for p in self.params])


class UnivariateFlow:
    """Learned CDF of one continuous column.

    x -> standardise -> tanh -> spline stack on [-1, 1] -> affine to [0, 1].
    """

    kind = "continuous"

    def __init__(self, loc: float, scale: float, stack: SplineStack, trained: bool = False):
        self.loc = float(loc)
        self.scale = float(scale)
        self.stack = stack
        self.trained = trained
        self.history: History | None = None

    def parameters(self):
        return self.stack.params

    def log_prob_tensor(self, x):
        xs = (T.as_tensor(x) - self.loc) * (1.0 / self.scale)
        s, ld = self.stack.forward(T.tanh(xs))
        return ld - 2.0 * T.log_cosh(xs) - math.log(self.scale) + _LOG_HALF

    def log_prob(self, x) -> np.ndarray:
        with no_grad():
            return self.log_prob_tensor(np.asarray(x, dtype=float)).value

    def cdf(self, x) -> np.ndarray:
        with no_grad():
            xs = (np.asarray(x, dtype=float) - self.loc) / self.scale
            s, _ = self.stack.forward(T.Tensor(np.tanh(xs)))
        return 0.5 * (s.value + 1.0)

    def to_ranks(self, x, rng=None) -> np.ndarray:
        return np.clip(self.cdf(x), RANK_EPS, 1.0 - RANK_EPS)

    def from_ranks(self, u) -> np.ndarray:
        u = np.clip(np.asarray(u, dtype=float), RANK_EPS, 1.0 - RANK_EPS)
        t = self.stack.inverse(2.0 * u - 1.0)
        t = np.clip(t, -1.0 + 1e-15, 1.0 - 1e-15)
        return self.loc + self.scale * np.arctanh(t)

    def bijector(self) -> bij.Compose:
        """The density-direction map x -> rank as a frozen composition."""
        parts = [bij.Affine(1.0 / self.scale, -self.loc / self.scale), bij.Tanh()]
        parts += self.stack.frozen()
        parts.append(bij.Affine(0.5, 0.5))
        return bij.Compose(parts)

    def state(self) -> dict:
        return {"kind": self.kind, "loc": self.loc, "scale": self.scale,
                "knots": self.stack.knots, "raw": self.stack.raw()}

    @classmethod
    def from_state(cls, st: dict) -> "UnivariateFlow":
        stack = SplineStack(len(st["raw"]), int(st["knots"]), raw=list(st["raw"]))
        return cls(st["loc"], st["scale"], stack, trained=True)


def fit_marginal_flow(samples, cfg: TrainConfig | None = None, seed: int | None = None) -> UnivariateFlow:
    """Maximum-likelihood fit of a :class:`UnivariateFlow` to one column."""
    cfg = cfg or TrainConfig()
    seed = cfg.seed if seed is None else seed
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 50:
        raise InsufficientDataError(f"need at least 50 samples to fit a marginal flow, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DomainError("marginal flow samples must be finite")
    scale = float(np.std(x))
    if scale == 0.0 or np.unique(x).size < 2:
        raise DegenerateColumnError("column is constant; declare it discrete instead")
    flow = UnivariateFlow(float(np.mean(x)), scale, SplineStack(cfg.flow_layers, cfg.knots))
    rng = substream(seed, "marginal-flow")
    train_idx, val_idx = train_val_split(x.size, cfg.train_fraction, rng)
    xt = x

    def nll(rows):
        return -T.mean(flow.log_prob_tensor(xt[rows]))

    flow.history = fit(flow.parameters(), nll, train_idx, val_idx, cfg, rng, label="marginal flow")
    flow.trained = True
    return flow


# ---------------------------------------------------------------------------
# discrete columns


@dataclass(frozen=True)
class StepCdf:
    support: np.ndarray
    left: np.ndarray
    values: np.ndarray

    @classmethod
    def from_samples(cls, x) -> "StepCdf":
        x = np.asarray(x, dtype=float).ravel()
        if x.size == 0:
            raise InsufficientDataError("cannot build an empirical CDF from no data")
        support, counts = np.unique(x, return_counts=True)
        values = np.cumsum(counts) / x.size
        values[-1] = 1.0
        left = np.concatenate([[0.0], values[:-1]])
        return cls(support, left, values)

    @classmethod
    def from_probabilities(cls, support, probs) -> "StepCdf":
        probs = np.asarray(probs, dtype=float)
        values = np.cumsum(probs) / probs.sum()
        values[-1] = 1.0
        return cls(np.asarray(support, dtype=float), np.concatenate([[0.0], values[:-1]]), values)

    def level_index(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.support, x)
        ok = (idx < self.support.size) & (self.support[np.minimum(idx, self.support.size - 1)] == x)
        if not np.all(ok):
            bad = np.asarray(x)[~ok].ravel()[:5]
            raise UnknownLevelError(f"values {bad.tolist()} are not in the CDF support")
        return idx


def distributional_transform(x, cdf: StepCdf, v=None, seed: int | None = None) -> np.ndarray:
    """U = F(x-) + V (F(x) - F(x-)); draws V from ``seed`` when not supplied."""
    idx = cdf.level_index(x)
    if v is None:
        v = substream(0 if seed is None else seed, "dequantise").random(idx.shape)
    v = np.asarray(v, dtype=float)
    return cdf.left[idx] + v * (cdf.values[idx] - cdf.left[idx])


def inverse_distributional_transform(u, cdf: StepCdf) -> np.ndarray:
    """The support value x with F(x-) < u <= F(x)."""
    idx = np.searchsorted(cdf.values, np.asarray(u, dtype=float), side="left")
    return cdf.support[np.minimum(idx, cdf.support.size - 1)]


class DiscreteMarginal:
    kind = "discrete"

    def __init__(self, cdf: StepCdf):
        self.cdf = cdf
        self.trained = True

    def to_ranks(self, x, rng=None) -> np.ndarray:
        rng = rng or np.random.default_rng(0)
        v = rng.random(np.shape(x))
        u = distributional_transform(x, self.cdf, v)
        return np.clip(u, RANK_EPS, 1.0 - RANK_EPS)

    def from_ranks(self, u) -> np.ndarray:
        return inverse_distributional_transform(u, self.cdf)

    def state(self) -> dict:
        return {"kind": self.kind, "support": self.cdf.support, "left": self.cdf.left,
                "values": self.cdf.values}

    @classmethod
    def from_state(cls, st: dict) -> "DiscreteMarginal":
        return cls(StepCdf(np.asarray(st["support"]), np.asarray(st["left"]), np.asarray(st["values"])))


def marginal_from_state(st: dict):
    return UnivariateFlow.from_state(st) if st["kind"] == "continuous" else DiscreteMarginal.from_state(st)


def to_ranks(flow, x, rng=None) -> np.ndarray:
    return flow.to_ranks(x, rng)


def from_ranks(flow, u) -> np.ndarray:
    return flow.from_ranks(u)
