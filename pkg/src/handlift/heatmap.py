"""Gaussian joint heatmaps, soft-argmax decoding, confidence, and the
heatmap-space losses.

Grid convention: cell ``(h_v, h_u)`` covers image pixels
``[h_u * res, (h_u + 1) * res)``; its centre sits at pixel
``h_u * res + (res - 1) / 2``.  Pixel coordinates put pixel centres on
integers.  ``sigma`` is expressed in grid cells.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import EmptyHeatmapError, ShapeError

GRID = 32
RESOLUTION = 8
SIGMA = 2.0
CONF_EPS = 1e-3


def px_to_cell(p, res=RESOLUTION):
    return (np.asarray(p, dtype=np.float64) - (res - 1) / 2.0) / res


def cell_to_px(c, res=RESOLUTION):
    return np.asarray(c, dtype=np.float64) * res + (res - 1) / 2.0


def render_heatmap(joints2d, sigma=SIGMA, grid=(GRID, GRID), res=RESOLUTION, peaks=None):
    """Render one unnormalised Gaussian per joint.

    joints2d: (..., 2) pixels.  Returns (heatmaps (..., H, W), out_of_frame
    (...,) bool).  A joint farther than 3 sigma outside the grid renders as
    all zeros and is flagged.
    """
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    H, W = grid
    j = np.asarray(joints2d, dtype=np.float64)
    lead = j.shape[:-1]
    c = px_to_cell(j.reshape(-1, 2), res)
    n = c.shape[0]
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), lead).reshape(-1)
    pk = np.ones(n) if peaks is None else np.broadcast_to(np.asarray(peaks, float), lead).reshape(-1)
    maps = kernels.render_gaussians(c, sig, pk, H, W)
    pad = 3.0 * sig
    out = (c[:, 0] < -pad) | (c[:, 0] > W - 1 + pad) | (c[:, 1] < -pad) | (c[:, 1] > H - 1 + pad)
    maps[out] = 0.0
    return maps.reshape(*lead, H, W), out.reshape(lead)


def render_evidence(joints2d, confidence, sigma=SIGMA, flatten=1.0, grid=(GRID, GRID), res=RESOLUTION):
    """Corrupted-observation heatmaps: peak scaled to the confidence and the
    bump widened by ``1 + flatten * (1 - confidence)``."""
    conf = np.clip(np.asarray(confidence, dtype=np.float64), CONF_EPS, 1.0)
    sig = sigma * (1.0 + flatten * (1.0 - conf))
    return render_heatmap(joints2d, sig, grid, res, peaks=conf)


def _coord_grids(H, W):
    return np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64)


def soft_argmax(heatmap, res=RESOLUTION):
    """Expected (u, v) under the sum-normalised map, in pixels.

    heatmap: (..., H, W) nonnegative array.  Raises on an all-zero grid.
    """
    h = np.asarray(heatmap, dtype=np.float64)
    s = h.sum(axis=(-2, -1))
    if np.any(s <= 0):
        raise EmptyHeatmapError("soft-argmax of an all-zero heatmap is undefined")
    uu, vv = _coord_grids(*h.shape[-2:])
    u = (h.sum(axis=-2) * uu).sum(-1) / s
    v = (h.sum(axis=-1) * vv).sum(-1) / s
    return cell_to_px(np.stack([u, v], axis=-1), res)


def soft_argmax_tensor(heatmap, res=RESOLUTION):
    """Differentiable soft-argmax of an (..., H, W) tensor; returns (..., 2) px."""
    heatmap = ad.as_tensor(heatmap)
    if np.any(heatmap.data.sum(axis=(-2, -1)) <= 0):
        raise EmptyHeatmapError("soft-argmax of an all-zero heatmap is undefined")
    H, W = heatmap.shape[-2:]
    uu, vv = _coord_grids(H, W)
    s = ad.sum_(ad.sum_(heatmap, -1), -1)
    u = ad.div(ad.sum_(ad.mul(ad.sum_(heatmap, -2), uu), -1), s)
    v = ad.div(ad.sum_(ad.mul(ad.sum_(heatmap, -1), vv), -1), s)
    lead = s.shape
    uv = ad.concat([u.reshape(*lead, 1), v.reshape(*lead, 1)], -1)
    return ad.add(ad.mul(uv, float(res)), (res - 1) / 2.0)


def joint_confidence(heatmap):
    """max over the unnormalised grid, clamped to [1e-3, 1]."""
    h = np.asarray(heatmap.data if isinstance(heatmap, ad.Tensor) else heatmap, dtype=np.float64)
    return np.clip(h.max(axis=(-2, -1)), CONF_EPS, 1.0)


def loss_hmap(pred, pseudo):
    """Mean squared error between predicted and pseudo-label heatmaps."""
    pred = ad.as_tensor(pred)
    pseudo = ad.as_tensor(pseudo)
    if pred.shape != pseudo.shape:
        raise ShapeError(f"loss_hmap: shapes {pred.shape} and {pseudo.shape} differ")
    return ad.mean(ad.square(ad.sub(pred, pseudo)))


def loss_hm2d(decoded, pseudo):
    """Mean over joints of squared 2D distance (summed over u, v)."""
    decoded = ad.as_tensor(decoded)
    pseudo = ad.as_tensor(pseudo)
    if decoded.shape != pseudo.shape or decoded.shape[-1] != 2:
        raise ShapeError(f"loss_hm2d: shapes {decoded.shape} and {pseudo.shape} differ")
    return ad.mean(ad.sum_(ad.square(ad.sub(decoded, pseudo)), axis=-1))


class HeatmapRefiner:
    """Per-joint local refiner of corrupted heatmaps.

    ``pred = input * sigmoid(w * input + c + b) / sigmoid(b)`` with ``w`` a
    zero-initialised 3x3 filter.  The gate only attenuates (gain at most
    ``1 / sigmoid(b)``, about 1.8% for b = 4), it is the identity at init,
    and being translation-equivariant it cannot learn where on the image a
    joint usually lies.  Input maps are data: no gradient flows into them.
    """

    def __init__(self, store, rng=None, grid=(GRID, GRID), headroom=4.0, name="hm"):
        self.grid = tuple(grid)
        self.headroom = headroom
        self.w = store.add(f"{name}.W", np.zeros(9))
        self.b = store.add(f"{name}.b", np.zeros(1))

    def gate(self, maps):
        data = maps.data if isinstance(maps, ad.Tensor) else np.asarray(maps, dtype=np.float64)
        if data.shape[-2:] != self.grid:
            raise ShapeError(f"refiner expects {self.grid} grids, got {data.shape[-2:]}")
        flat = data.reshape(-1, *self.grid)
        w, b = self.w.data, self.b.data
        g = kernels.local_gate(flat, w, b, self.headroom).reshape(data.shape)

        def vjp(grad):
            return kernels.local_gate_grad(flat, w, b, self.headroom, grad.reshape(flat.shape))
        return data, ad._make(g, (self.w, self.b), vjp)

    def __call__(self, maps):
        data, gate = self.gate(maps)
        return ad.mul(data, gate)
