"""Conditional RealNVP over per-view 2D poses.

The flow lives in model coordinates: ``x = (p - decoded) / scale`` where
``decoded`` are the soft-argmax joints of the view, so the latent mean maps
to the decoded pose when the flow is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import MLP

LOG_2PI = np.log(2.0 * np.pi)


def checkerboard_mask(k, parity=0):
    """Mask over the flattened (k, 2) joint coordinates."""
    i, c = np.meshgrid(np.arange(k), np.arange(2), indexing="ij")
    return (((i + c) % 2) == parity).astype(np.float64).reshape(-1)


class CouplingLayer:
    """Affine coupling: identity on ``mask`` dims, scale+shift on the rest."""

    def __init__(self, store, rng, name, mask, cond_dim, hidden=64, s_max=3.0):
        self.mask = np.asarray(mask, dtype=np.float64)
        self.active = 1.0 - self.mask
        dim = self.mask.size
        self.s_max = s_max
        self.s_net = MLP(store, f"{name}.s", dim + cond_dim, hidden, dim, rng, zero_last=True)
        self.t_net = MLP(store, f"{name}.t", dim + cond_dim, hidden, dim, rng, zero_last=True)

    def _st(self, fixed, cond):
        h = ad.concat([fixed, cond], -1)
        s = ad.mul(ad.tanh(ad.mul(self.s_net(h), 1.0 / self.s_max)), self.s_max)
        s = ad.mul(s, self.active)
        t = ad.mul(self.t_net(h), self.active)
        return s, t

    def forward(self, h, cond):
        fixed = ad.mul(h, self.mask)
        s, t = self._st(fixed, cond)
        y = ad.add(fixed, ad.mul(ad.add(ad.mul(h, ad.exp(s)), t), self.active))
        return y, ad.sum_(s, axis=-1)

    def inverse(self, y, cond):
        fixed = ad.mul(y, self.mask)
        s, t = self._st(fixed, cond)
        h = ad.add(fixed, ad.mul(ad.mul(ad.sub(y, t), ad.exp(ad.mul(s, -1.0))), self.active))
        return h, ad.mul(ad.sum_(s, axis=-1), -1.0)


@dataclass
class HypothesisSet:
    key: np.ndarray         # (..., k, 2) px
    samples: np.ndarray     # (..., M, k, 2) px
    view_id: object = None

    @property
    def size(self):
        return self.samples.shape[-3] + 1


class ConditionalFlow:
    def __init__(self, store, rng, k=21, cond_dim=64, n_layers=6, hidden=64, s_max=3.0,
                 scale=8.0, name="flow"):
        self.k = k
        self.dim = 2 * k
        self.scale = scale
        self.layers = [CouplingLayer(store, rng, f"{name}.c{i}", checkerboard_mask(k, i % 2),
                                     cond_dim, hidden, s_max) for i in range(n_layers)]

    def forward(self, z, cond):
        """z (N, 2k), cond (N, D_f) -> (x, log|det dx/dz|)."""
        h = ad.as_tensor(z)
        logdet = None
        for layer in self.layers:
            h, ld = layer.forward(h, cond)
            logdet = ld if logdet is None else ad.add(logdet, ld)
        return h, logdet

    def inverse(self, x, cond):
        h = ad.as_tensor(x)
        logdet = None
        for layer in reversed(self.layers):
            h, ld = layer.inverse(h, cond)
            logdet = ld if logdet is None else ad.add(logdet, ld)
        return h, logdet

    def nll(self, x, cond):
        """Per-sample -log p(x | cond) under a standard-normal latent, (N,) tensor."""
        z, logdet_inv = self.inverse(x, cond)
        sq = ad.sum_(ad.square(z), axis=-1)
        return ad.sub(ad.add(ad.mul(sq, 0.5), 0.5 * self.dim * LOG_2PI), logdet_inv)

    def to_model(self, points2d, decoded):
        p = np.asarray(points2d, dtype=np.float64)
        return (p - decoded) / self.scale

    def loss_nll(self, pseudo2d, decoded, cond):
        """Mean NLL of pseudo labels (N, k, 2) given decoded joints (N, k, 2)."""
        x = ad.Tensor(self.to_model(pseudo2d, decoded).reshape(-1, self.dim))
        return ad.mean(self.nll(x, cond))

    def sample_hypotheses(self, cond, M, seed, decoded):
        """Key hypothesis from the zero latent plus M prior draws, in pixels.

        cond (N, D_f) array/tensor; decoded (N, k, 2).  Returns HypothesisSet
        with key (N, k, 2) and samples (N, M, k, 2).
        """
        if M < 1:
            raise ValueError("M must be >= 1")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        cond = ad.as_tensor(cond).data
        N = cond.shape[0]
        z = np.concatenate([np.zeros((N, 1, self.dim)), rng.standard_normal((N, M, self.dim))], axis=1)
        with ad.no_grad():
            x, _ = self.forward(z.reshape(N * (M + 1), self.dim),
                                np.repeat(cond, M + 1, axis=0))
        px = x.data.reshape(N, M + 1, self.k, 2) * self.scale + np.asarray(decoded)[:, None]
        return HypothesisSet(px[:, 0], px[:, 1:])
