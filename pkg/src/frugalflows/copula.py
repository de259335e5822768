"""Autoregressive spline flow over rank space.

Ranks v in (0,1)^D are mapped to s = 2v - 1, pushed through a stack of
masked autoregressive spline layers on [-1, 1] and read as a uniform base
point. The two affine wrappers cancel in the log-density, so log c(v) is the
sum of the spline log-derivatives.

Dimensions flagged as ``fixed`` are never transformed. With the default
layout only dimension 0 is fixed and it carries degree 1 in every layer, so
every other dimension may condition on it and its own density factor is 1.
"""
from __future__ import annotations

import numpy as np

from . import bijectors as bij
from .engine import MaskedMLP, no_grad
from .engine import tensor as T
from .errors import DimensionError, DomainError, InvalidParameterError
from .rng import substream
from .training import History, TrainConfig, fit, train_val_split


def _layer_degrees(n_dims: int, order: np.ndarray) -> np.ndarray:
    deg = np.empty(n_dims, dtype=int)
    deg[order] = np.arange(1, n_dims + 1)
    return deg


def default_orders(n_dims: int, layers: int, permutable, seed: int) -> list[np.ndarray]:
    """Per-layer conditioning orders; only ``permutable`` positions are shuffled."""
    permutable = np.asarray(permutable, dtype=int)
    rng = substream(seed, "copula-permutation")
    base = np.arange(n_dims)
    orders = [base.copy()]
    for _ in range(1, layers):
        order = base.copy()
        if permutable.size > 1:
            order[permutable] = permutable[rng.permutation(permutable.size)]
        orders.append(order)
    return orders


class CopulaFlow:
    def __init__(self, n_dims: int, layers: int = 5, knots: int = 8, width: int = 50, depth: int = 4,
                 seed: int = 0, fixed=None, orders=None, pinned: bool = True):
        if n_dims < 1:
            raise InvalidParameterError("copula flow needs at least one dimension")
        self.n_dims = n_dims
        self.knots = knots
        self.pinned = pinned
        self.width = width
        self.depth = depth
        fixed = np.zeros(n_dims, dtype=bool) if fixed is None else np.asarray(fixed, dtype=bool)
        if fixed.shape != (n_dims,):
            raise DimensionError("fixed mask must have one entry per dimension")
        self.fixed = fixed
        self.active = np.flatnonzero(~fixed)
        if orders is None:
            movable = self.active if fixed[0] else np.arange(n_dims)
            orders = default_orders(n_dims, layers, movable, seed)
        self.orders = [np.asarray(o, dtype=int) for o in orders]
        self.n_params = bij.n_spline_params(knots, pinned)
        rng = substream(seed, "copula-init")
        self.nets = []
        init = np.tile(bij.identity_raw(knots, pinned), self.active.size)
        for order in self.orders:
            deg = _layer_degrees(n_dims, order)
            out_deg = np.repeat(deg[self.active], self.n_params)
            self.nets.append(MaskedMLP(deg, out_deg, width, depth, rng=rng, final_bias=init)
                             if self.active.size else None)
        self.trained = False
        self.history: History | None = None

    @property
    def layers(self) -> int:
        return len(self.orders)

    def parameters(self) -> list:
        return [p for net in self.nets if net is not None for p in net.parameters()]

    def _check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2 or v.shape[1] != self.n_dims:
            raise DimensionError(f"expected rank rows of width {self.n_dims}, got {v.shape}")
        if not np.all((v > 0.0) & (v < 1.0)):
            raise DomainError("copula ranks must lie strictly inside (0, 1)")
        return v

    def _layer_forward(self, net, s):
        raw = net(s)
        n = s.shape[0]
        cols = [s[:, i:i + 1] for i in range(self.n_dims)]
        total = 0.0
        for k, i in enumerate(self.active):
            r = raw[:, k * self.n_params:(k + 1) * self.n_params]
            xk, yk, d = bij.spline_knots(r, self.knots, pinned=self.pinned)
            y, ld = bij.rqs_forward(T.reshape(cols[i], (n,)), xk, yk, d)
            cols[i] = T.reshape(y, (n, 1))
            total = total + ld
        return T.concat(cols, axis=-1), total

    def log_density_tensor(self, v):
        return self.log_density_from(T.as_tensor(2.0 * np.asarray(v, dtype=float) - 1.0))

    def log_density_from(self, s):
        """Log-density for rank tensors already mapped to [-1, 1]."""
        total = T.Tensor(np.zeros(s.shape[0]))
        for net in self.nets:
            if net is None:
                continue
            s, ld = self._layer_forward(net, s)
            total = total + ld
        return total

    def log_density(self, v) -> np.ndarray:
        v = self._check(v)
        with no_grad():
            return self.log_density_tensor(v).value

    def to_base(self, v) -> np.ndarray:
        v = self._check(v)
        with no_grad():
            s = T.Tensor(2.0 * v - 1.0)
            for net in self.nets:
                if net is not None:
                    s, _ = self._layer_forward(net, s)
        return 0.5 * (s.value + 1.0)

    def sample(self, u) -> np.ndarray:
        """Invert the flow: base uniforms -> correlated ranks. Fixed columns pass through."""
        u = np.asarray(u, dtype=float)
        if u.ndim != 2 or u.shape[1] != self.n_dims:
            raise DimensionError(f"expected base rows of width {self.n_dims}, got {u.shape}")
        s = 2.0 * u - 1.0
        with no_grad():
            for order, net in zip(reversed(self.orders), reversed(self.nets)):
                if net is None:
                    continue
                deg = _layer_degrees(self.n_dims, order)
                x = s.copy()
                for k in np.argsort(deg[self.active], kind="stable"):
                    i = self.active[k]
                    raw = net(x).value[:, k * self.n_params:(k + 1) * self.n_params]
                    xk, yk, d = bij.spline_knots(raw, self.knots, pinned=self.pinned)
                    x[:, i], _ = bij.rqs_inverse(s[:, i], xk.value, yk.value, d.value)
                s = x
        return np.clip(0.5 * (s + 1.0), 0.0, 1.0)

    def state(self) -> dict:
        return {
            "n_dims": self.n_dims, "knots": self.knots, "pinned": self.pinned,
            "width": self.width, "depth": self.depth,
            "fixed": self.fixed.astype(np.int64), "orders": np.stack(self.orders),
            "params": [p.value for p in self.parameters()],
        }

    @classmethod
    def from_state(cls, st: dict) -> "CopulaFlow":
        flow = cls(int(st["n_dims"]), knots=int(st["knots"]), width=int(st["width"]),
                   depth=int(st["depth"]), fixed=np.asarray(st["fixed"], dtype=bool),
                   orders=list(np.asarray(st["orders"])), pinned=bool(st["pinned"]))
        params = flow.parameters()
        if len(params) != len(st["params"]):
            raise DimensionError("stored copula parameters do not match the architecture")
        for p, value in zip(params, st["params"]):
            p.value = np.array(value, dtype=float)
        flow.trained = True
        return flow


def frugal_copula(n_covariates: int, cfg: TrainConfig, seed: int | None = None,
                  pinned: bool = True) -> CopulaFlow:
    """Copula over (V_Y, V_Z1..V_ZD) with the outcome rank held fixed and first."""
    fixed = np.zeros(n_covariates + 1, dtype=bool)
    fixed[0] = True
    return CopulaFlow(n_covariates + 1, cfg.flow_layers, cfg.knots, cfg.nn_width, cfg.nn_depth,
                      seed=cfg.seed if seed is None else seed, fixed=fixed, pinned=pinned)


def copula_log_density(flow: CopulaFlow, v) -> np.ndarray:
    out = flow.log_density(v)
    return out if np.ndim(v) > 1 else out[0]


def copula_sample(flow: CopulaFlow, v1, u_rest) -> np.ndarray:
    """Correlated ranks given the leading rank ``v1`` and independent uniforms."""
    v1 = np.asarray(v1, dtype=float).reshape(-1, 1)
    u_rest = np.asarray(u_rest, dtype=float)
    if u_rest.ndim == 1:
        u_rest = u_rest[:, None]
    if u_rest.shape[0] != v1.shape[0] or u_rest.shape[1] != flow.n_dims - 1:
        raise DimensionError(f"expected {v1.shape[0]} rows of {flow.n_dims - 1} uniforms, got {u_rest.shape}")
    return flow.sample(np.hstack([v1, u_rest]))


def fit_copula_flow(ranks, cfg: TrainConfig | None = None, fixed=None, seed: int | None = None,
                    pinned: bool = True) -> CopulaFlow:
    """Maximum-likelihood fit of a copula flow to a rank matrix."""
    cfg = cfg or TrainConfig()
    seed = cfg.seed if seed is None else seed
    v = np.asarray(ranks, dtype=float)
    flow = CopulaFlow(v.shape[1], cfg.flow_layers, cfg.knots, cfg.nn_width, cfg.nn_depth,
                      seed=seed, fixed=fixed, pinned=pinned)
    v = flow._check(v)
    rng = substream(seed, "copula-fit")
    train_idx, val_idx = train_val_split(v.shape[0], cfg.train_fraction, rng)

    def nll(rows):
        return -T.mean(flow.log_density_tensor(v[rows]))

    flow.history = fit(flow.parameters(), nll, train_idx, val_idx, cfg, rng, label="copula flow")
    flow.trained = True
    return flow
