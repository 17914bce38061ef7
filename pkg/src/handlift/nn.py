"""Small layer helpers on top of the autodiff primitives."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def glorot(rng, fan_in, fan_out, gain=1.0):
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    """``y = x @ W + b``; ``zero=True`` gives an all-zero layer."""

    def __init__(self, store, name, fan_in, fan_out, rng, bias=True, zero=False, gain=1.0):
        w = np.zeros((fan_in, fan_out)) if zero else glorot(rng, fan_in, fan_out, gain)
        self.W = store.add(f"{name}.W", w)
        self.b = store.add(f"{name}.b", np.zeros(fan_out)) if bias else None
        self.fan_in, self.fan_out = fan_in, fan_out

    def __call__(self, x):
        y = ad.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class MLP:
    """Two dense layers with a tanh in between."""

    def __init__(self, store, name, fan_in, hidden, fan_out, rng, zero_last=False, bias=True):
        self.l1 = Linear(store, f"{name}.0", fan_in, hidden, rng, bias=bias)
        self.l2 = Linear(store, f"{name}.1", hidden, fan_out, rng, bias=bias, zero=zero_last)

    def __call__(self, x):
        return self.l2(ad.tanh(self.l1(x)))


def sinusoidal(x, n_freq):
    """Sin/cos features of each column of ``x`` (plain numpy, no gradient).

    Output width is ``x.shape[-1] * 2 * n_freq``.
    """
    x = np.asarray(x, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(n_freq)
    ang = x[..., :, None] * freqs
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(*x.shape[:-1], x.shape[-1] * 2 * n_freq)
