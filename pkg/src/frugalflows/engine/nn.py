"""Masked multilayer perceptrons used as spline conditioners."""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from . import tensor as T


def autoregressive_mask(in_degrees, out_degrees, strict: bool) -> np.ndarray:
    """Binary (n_out, n_in) mask; entry is 1 iff out >= in (or > when strict)."""
    in_degrees = np.asarray(in_degrees)
    out_degrees = np.asarray(out_degrees)
    if strict:
        return (out_degrees[:, None] > in_degrees[None, :]).astype(np.float64)
    return (out_degrees[:, None] >= in_degrees[None, :]).astype(np.float64)


def hidden_degrees(width: int, in_degrees, out_degrees) -> np.ndarray:
    """Sequential degree assignment cycling through the admissible range."""
    lo = int(np.min(in_degrees)) if len(in_degrees) else 1
    hi = int(np.max(out_degrees)) - 1
    if hi < lo:
        return np.zeros(width, dtype=int)
    return lo + np.arange(width) % (hi - lo + 1)


class MaskedMLP:
    """MADE-style conditioner with an optional unmasked context input.

    Output unit ``o`` depends only on inputs with degree strictly below
    ``out_degrees[o]``, plus the context. The context enters every layer.
    ``final_bias`` sets the output bias; final weights start at zero so the
    initial output equals the bias regardless of the input.
    """

    def __init__(self, in_degrees, out_degrees, width: int, depth: int,
                 context_dim: int = 0, rng=None, final_bias=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_degrees = np.asarray(in_degrees, dtype=int)
        self.out_degrees = np.asarray(out_degrees, dtype=int)
        self.context_dim = context_dim
        n_in = len(self.in_degrees)
        degrees = [self.in_degrees]
        for _ in range(depth):
            degrees.append(hidden_degrees(width, self.in_degrees, self.out_degrees))
        degrees.append(self.out_degrees)

        self.masks, self.weights, self.ctx_weights, self.biases = [], [], [], []
        for layer in range(depth + 1):
            d_in, d_out = degrees[layer], degrees[layer + 1]
            strict = layer == depth
            mask = autoregressive_mask(d_in, d_out, strict).T
            fan_in = max(len(d_in) + context_dim, 1)
            if strict:
                w = np.zeros((len(d_in), len(d_out)))
                c = np.zeros((context_dim, len(d_out)))
                b = np.zeros(len(d_out)) if final_bias is None else np.array(final_bias, dtype=float)
            else:
                scale = 1.0 / np.sqrt(fan_in)
                w = rng.normal(0.0, scale, size=(len(d_in), len(d_out)))
                c = rng.normal(0.0, scale, size=(context_dim, len(d_out)))
                b = np.zeros(len(d_out))
            self.masks.append(mask)
            self.weights.append(T.Parameter(w * mask))
            self.ctx_weights.append(T.Parameter(c) if context_dim else None)
            self.biases.append(T.Parameter(b))
        self.n_in = n_in
        self.n_out = len(self.out_degrees)

    def parameters(self) -> list:
        out = []
        for w, c, b in zip(self.weights, self.ctx_weights, self.biases):
            out.append(w)
            if c is not None:
                out.append(c)
            out.append(b)
        return out

    def __call__(self, x, context=None):
        n_layers = len(self.weights)
        if x is not None:
            x = T.as_tensor(x)
            if x.ndim != 2 or x.shape[1] != self.n_in:
                raise DimensionError(f"expected input width {self.n_in}, got {x.shape}")
            n = x.shape[0]
        if self.context_dim:
            if context is None:
                raise DimensionError("conditioner expects a context input")
            context = T.as_tensor(context)
            if context.ndim != 2 or context.shape[1] != self.context_dim:
                raise DimensionError(f"expected context width {self.context_dim}, got {context.shape}")
            n = context.shape[0]
        h = x
        for layer in range(n_layers):
            pre = None
            if h is not None and h.shape[1] > 0:
                pre = T.matmul(h, T.mul(self.weights[layer], self.masks[layer]))
            if self.context_dim:
                term = T.matmul(context, self.ctx_weights[layer])
                pre = term if pre is None else pre + term
            if pre is None:
                pre = T.Tensor(np.zeros((n, self.biases[layer].shape[0])))
            pre = pre + self.biases[layer]
            h = T.tanh(pre) if layer < n_layers - 1 else pre
        return h
