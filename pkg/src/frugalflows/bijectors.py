"""Invertible transforms with forward, inverse and log|det J|.

The rational-quadratic spline is written once against the engine ops so the
same code path serves training (recorded on the tape) and inference (under
``no_grad``). The inverse is closed form and only ever used for sampling, so
it is plain numpy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import tensor as T
from .errors import CompositionError, InvalidParameterError, InvalidSplineError

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3

_IDENTITY_DERIV_RAW = math.log(math.expm1(1.0 - MIN_DERIVATIVE))


def n_spline_params(knots: int, pinned: bool = True) -> int:
    """Raw parameters per transformed coordinate: widths, heights, derivatives."""
    return 3 * knots - 1 if pinned else 3 * knots + 1


def identity_raw(knots: int, pinned: bool = True) -> np.ndarray:
    """Raw parameter vector whose spline is the identity map."""
    n_deriv = knots - 1 if pinned else knots + 1
    return np.concatenate([np.zeros(2 * knots), np.full(n_deriv, _IDENTITY_DERIV_RAW)])


def _knot_positions(raw_bins, bound, min_size, knots):
    sizes = T.softmax(raw_bins, axis=-1) * (1.0 - knots * min_size) + min_size
    inner = T.cumsum(sizes, axis=-1)[..., : knots - 1] * (2.0 * bound) - bound
    lead = raw_bins.shape[:-1]
    lo = T.Tensor(np.full(lead + (1,), -bound))
    hi = T.Tensor(np.full(lead + (1,), bound))
    return T.concat([lo, inner, hi], axis=-1)


def spline_knots(raw, knots: int, bound: float = 1.0, pinned: bool = True):
    """Map unconstrained conditioner outputs to (x-knots, y-knots, derivatives).

    ``raw`` has trailing size ``n_spline_params(knots, pinned)``. With
    ``pinned`` the two boundary derivatives are fixed to 1 so the spline joins
    the identity tails with a continuous first derivative.
    """
    raw = T.as_tensor(raw)
    xk = _knot_positions(raw[..., :knots], bound, MIN_BIN_WIDTH, knots)
    yk = _knot_positions(raw[..., knots: 2 * knots], bound, MIN_BIN_HEIGHT, knots)
    d = T.softplus(raw[..., 2 * knots:]) + MIN_DERIVATIVE
    if pinned:
        ones = T.Tensor(np.ones(raw.shape[:-1] + (1,)))
        d = T.concat([ones, d, ones], axis=-1)
    return xk, yk, d


def _bin_index(x: np.ndarray, knots_x: np.ndarray) -> np.ndarray:
    inner = knots_x[..., 1:-1]
    idx = np.sum(x[..., None] >= inner, axis=-1)
    return idx[..., None]


def rqs_forward(x, xk, yk, d, bound: float = 1.0):
    """Spline forward map and log-derivative; identity outside [-bound, bound]."""
    x = T.as_tensor(x)
    xv = x.value
    inside = np.abs(xv) <= bound
    all_inside = bool(inside.all())
    x_in = x if all_inside else T.where(inside, x, 0.0)
    idx = _bin_index(np.where(inside, xv, 0.0), np.broadcast_to(xk.value, xv.shape + xk.shape[-1:]))
    idx1 = idx + 1

    def pick(arr, at):
        return T.reshape(T.take_along_axis(arr, at), xv.shape)

    x_lo, x_hi = pick(xk, idx), pick(xk, idx1)
    y_lo, y_hi = pick(yk, idx), pick(yk, idx1)
    d0, d1 = pick(d, idx), pick(d, idx1)
    w = x_hi - x_lo
    h = y_hi - y_lo
    s = h / w
    xi = (x_in - x_lo) / w
    xi1m = xi * (1.0 - xi)
    den = s + (d0 + d1 - 2.0 * s) * xi1m
    y = y_lo + h * (s * xi * xi + d0 * xi1m) / den
    dnum = s * s * (d1 * xi * xi + 2.0 * s * xi1m + d0 * (1.0 - xi) * (1.0 - xi))
    logdet = T.log(dnum) - 2.0 * T.log(den)
    if all_inside:
        return y, logdet
    return T.where(inside, y, x), T.where(inside, logdet, 0.0)


def rqs_inverse(y: np.ndarray, xk: np.ndarray, yk: np.ndarray, d: np.ndarray, bound: float = 1.0):
    """Closed-form inverse of :func:`rqs_forward` (numpy, no tape)."""
    y = np.asarray(y, dtype=np.float64)
    inside = np.abs(y) <= bound
    yc = np.where(inside, y, 0.0)
    shape = yc.shape + xk.shape[-1:]
    xk, yk, d = (np.broadcast_to(a, shape) for a in (xk, yk, d))
    idx = _bin_index(yc, yk)

    def pick(arr, at):
        return np.take_along_axis(arr, at, axis=-1)[..., 0]

    x_lo, x_hi = pick(xk, idx), pick(xk, idx + 1)
    y_lo, y_hi = pick(yk, idx), pick(yk, idx + 1)
    d0, d1 = pick(d, idx), pick(d, idx + 1)
    w, h = x_hi - x_lo, y_hi - y_lo
    s = h / w
    dy = yc - y_lo
    k = d0 + d1 - 2.0 * s
    a = h * (s - d0) + dy * k
    b = h * d0 - dy * k
    c = -s * dy
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    xi = (2.0 * c) / (-b - np.sqrt(disc))
    xi = np.clip(xi, 0.0, 1.0)
    x = x_lo + xi * w
    xi1m = xi * (1.0 - xi)
    den = s + k * xi1m
    dnum = s * s * (d1 * xi * xi + 2.0 * s * xi1m + d0 * (1.0 - xi) ** 2)
    logdet = -(np.log(dnum) - 2.0 * np.log(den))
    return np.where(inside, x, y), np.where(inside, logdet, 0.0)


# ---------------------------------------------------------------------------
# frozen bijectors


@dataclass(frozen=True)
class Interval:
    lo: float = -math.inf
    hi: float = math.inf

    def contains(self, other: "Interval") -> bool:
        return self.lo <= other.lo and other.hi <= self.hi


REAL = Interval()


class Bijector:
    kind = "bijector"
    domain = REAL
    codomain = REAL

    def forward(self, x):
        raise NotImplementedError

    def inverse(self, y):
        raise NotImplementedError


class Identity(Bijector):
    kind = "identity"

    def __init__(self, domain: Interval = REAL):
        self.domain = self.codomain = domain

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x.copy(), np.zeros_like(x)

    def inverse(self, y):
        return self.forward(y)


class Affine(Bijector):
    kind = "affine"

    def __init__(self, scale: float, shift: float, domain: Interval = REAL):
        if scale == 0 or not np.isfinite(scale):
            raise InvalidParameterError("affine scale must be finite and non-zero")
        self.scale, self.shift = float(scale), float(shift)
        self.domain = domain
        ends = sorted([scale * domain.lo + shift if np.isfinite(domain.lo) else -math.copysign(math.inf, scale),
                       scale * domain.hi + shift if np.isfinite(domain.hi) else math.copysign(math.inf, scale)])
        self.codomain = Interval(*ends)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.scale * x + self.shift, np.full_like(x, math.log(abs(self.scale)))

    def inverse(self, y):
        y = np.asarray(y, dtype=np.float64)
        return (y - self.shift) / self.scale, np.full_like(y, -math.log(abs(self.scale)))


class Tanh(Bijector):
    kind = "tanh"
    codomain = Interval(-1.0, 1.0)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        with T.no_grad():
            logdet = -2.0 * T.log_cosh(x).value
        return np.tanh(x), logdet

    def inverse(self, y):
        y = np.asarray(y, dtype=np.float64)
        x = np.arctanh(y)
        with T.no_grad():
            logdet = 2.0 * T.log_cosh(x).value
        return x, logdet


class Permutation(Bijector):
    """Reorders the last axis; ``y[..., i] = x[..., perm[i]]``."""

    kind = "permutation"

    def __init__(self, perm):
        perm = np.asarray(perm, dtype=int)
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise InvalidParameterError(f"{perm.tolist()} is not a permutation")
        self.perm = perm
        self.inverse_perm = np.argsort(perm)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x[..., self.perm], np.zeros(x.shape[:-1])

    def inverse(self, y):
        y = np.asarray(y, dtype=np.float64)
        return y[..., self.inverse_perm], np.zeros(y.shape[:-1])


class RqsSpline(Bijector):
    """A monotone rational-quadratic spline with fixed knots on [-bound, bound]."""

    kind = "rqs"

    def __init__(self, knots_x, knots_y, derivatives, bound: float = 1.0, bounded: bool = False):
        xk = np.asarray(knots_x, dtype=np.float64)
        yk = np.asarray(knots_y, dtype=np.float64)
        d = np.asarray(derivatives, dtype=np.float64)
        if xk.shape != yk.shape or xk.shape != d.shape or xk.shape[-1] < 2:
            raise InvalidSplineError("knot arrays must share a shape with at least two knots")
        if np.any(np.diff(xk, axis=-1) <= 0) or np.any(np.diff(yk, axis=-1) <= 0):
            raise InvalidSplineError("spline knots must be strictly increasing")
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise InvalidSplineError("spline derivatives must be positive and finite")
        for arr in (xk, yk):
            if not (np.allclose(arr[..., 0], -bound) and np.allclose(arr[..., -1], bound)):
                raise InvalidSplineError(f"knots must span [-{bound}, {bound}]")
        self.knots_x, self.knots_y, self.derivatives = xk, yk, d
        self.bound = float(bound)
        self.K = xk.shape[-1] - 1
        if bounded:
            self.domain = self.codomain = Interval(-bound, bound)

    @classmethod
    def from_raw(cls, raw, knots: int, bound: float = 1.0, pinned: bool = True, bounded: bool = False):
        with T.no_grad():
            xk, yk, d = spline_knots(np.asarray(raw, dtype=np.float64), knots, bound, pinned)
        return cls(xk.value, yk.value, d.value, bound=bound, bounded=bounded)

    @classmethod
    def identity(cls, knots: int, bound: float = 1.0):
        return cls.from_raw(identity_raw(knots), knots, bound)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        with T.no_grad():
            y, ld = rqs_forward(x, T.Tensor(self.knots_x), T.Tensor(self.knots_y),
                                T.Tensor(self.derivatives), self.bound)
        return y.value, ld.value

    def inverse(self, y):
        return rqs_inverse(y, self.knots_x, self.knots_y, self.derivatives, self.bound)


def rqs_apply(x, spline: RqsSpline, direction: str = "forward"):
    """Apply ``spline`` forward or inverse; returns ``(value, log|dvalue/dinput|)``."""
    if direction == "forward":
        return spline.forward(x)
    if direction == "inverse":
        return spline.inverse(x)
    raise InvalidParameterError(f"unknown direction {direction!r}")


class Compose(Bijector):
    kind = "compose"

    def __init__(self, parts):
        parts = list(parts)
        if not parts:
            raise CompositionError("cannot compose an empty list")
        for left, right in zip(parts, parts[1:]):
            if not right.domain.contains(left.codomain):
                raise CompositionError(
                    f"{left.kind} codomain {left.codomain} does not fit {right.kind} domain {right.domain}")
        self.parts = parts
        self.domain = parts[0].domain
        self.codomain = parts[-1].codomain

    def forward(self, x):
        total = 0.0
        for part in self.parts:
            x, ld = part.forward(x)
            total = total + ld
        return x, total

    def inverse(self, y):
        total = 0.0
        for part in reversed(self.parts):
            y, ld = part.inverse(y)
            total = total + ld
        return y, total


def compose(parts) -> Compose:
    return Compose(parts)


def tanh_bijector() -> Tanh:
    return Tanh()


def affine_bijector(scale: float, shift: float, domain: Interval = REAL) -> Affine:
    return Affine(scale, shift, domain)


def permutation_bijector(perm) -> Permutation:
    return Permutation(perm)
