"""Probabilistic point cloud and the spatiotemporal point transformer.

Query points (one per joint) come from the key hypotheses, anchors from the
random ones.  Anchors never move.  Each block runs kNN spatial attention
within a frame, temporal attention per joint, then cross-attention from the
queries to their nearest anchors followed by a residual coordinate update.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .camera import triangulate_batch
from .heatmap import RESOLUTION, px_to_cell
from .nn import MLP, Linear, sinusoidal
from .skeleton import NUM_JOINTS
from .synthetic import FRAME_SIZE, WORKING_VOLUME

log = logging.getLogger(__name__)

FAR = 1e9


@dataclass
class ProbPointCloud:
    """Per-frame anchor/query clouds; leading dims are (..., frame)."""
    query: np.ndarray          # (..., k, 3) mm
    anchors: np.ndarray        # (..., M*k, 3) mm, FAR where invalid
    anchor_valid: np.ndarray   # (..., M*k) bool
    dropped: int = 0
    query_failed: int = 0
    query_feat: object = None
    anchor_feat: object = None


def lift_hypotheses(key, samples, confidence, P):
    """Triangulate hypotheses across views.

    key: (V, k, 2) px; samples: (V, M, k, 2); confidence: (V, k); P: (V, 3, 4).
    Extra leading dims are allowed on all hypothesis arrays.  Sample ``r``
    is triangulated across views only with sample ``r`` of the other views.
    """
    key = np.asarray(key, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    conf = np.asarray(confidence, dtype=np.float64)
    V, M, k = samples.shape[-4:-1]
    lead = key.shape[:-3]
    # (..., k, V, 2) / (..., M, k, V, 2)
    q_pts = np.moveaxis(key, -3, -2)
    q_w = np.moveaxis(conf, -2, -1)
    query, qs = triangulate_batch(q_pts, q_w, P)
    a_pts = np.moveaxis(samples, -4, -2)  # (..., M, k, V, 2)
    a_w = np.broadcast_to(q_w[..., None, :, :], (*lead, M, k, V))
    anchors, st = triangulate_batch(a_pts, a_w, P)
    anchors = anchors.reshape(*lead, M * k, 3)
    valid = (st == 0).reshape(*lead, M * k)
    anchors[~valid] = FAR
    q_fail = qs != 0
    if np.any(q_fail):
        # fall back to the valid anchors of the same joint
        anc = anchors.reshape(*lead, M, k, 3)
        ok = valid.reshape(*lead, M, k)[..., None]
        cnt = ok.sum(axis=-3)
        mean = np.where(ok, anc, 0.0).sum(axis=-3) / np.maximum(cnt, 1)
        fallback = np.where(cnt > 0, mean, 0.0)
        query = np.where(q_fail[..., None], fallback, query)
    dropped = int((~valid).sum())
    if dropped:
        log.debug("dropped %d anchor points that failed to triangulate", dropped)
    return ProbPointCloud(query, anchors, valid, dropped, int(q_fail.sum()))


def bilinear_sample(maps, uv_cells):
    """Sample (..., C, H, W) maps at (..., N, 2) cell coordinates -> (..., N, C).

    Outside the grid the value is zero.
    """
    return kernels.bilinear_sample(maps, uv_cells)


class PointFeatureEncoder:
    """Multi-view point features from projections.

    Per view: heatmap responses sampled at the projection, a sine encoding of
    the projected position, the confidence of the nearest decoded joint, and
    the offset/confidence of the same-index decoded joint.  A shared layer
    embeds each view; embeddings are averaged over the views in front of the
    point, concatenated with normalised coordinates and a joint-id embedding,
    and squeezed through a bottleneck layer.
    """

    def __init__(self, store, rng, d_point=32, k=NUM_JOINTS, n_freq=4, hidden=32, name="pfe",
                 frame=FRAME_SIZE, volume=WORKING_VOLUME, offset_scale=16.0):
        self.k = k
        self.n_freq = n_freq
        self.frame = frame
        self.half = volume / 2.0
        self.offset_scale = offset_scale
        self.d_view = k + 4 * n_freq + 1 + 3
        self.view_layer = Linear(store, f"{name}.view", self.d_view, hidden, rng)
        self.bottleneck = Linear(store, f"{name}.bottleneck", hidden + 3, d_point, rng)
        self.joint_emb = store.add(f"{name}.joint_emb", rng.normal(scale=0.5, size=(k, d_point)))
        self.d_point = d_point

    def view_inputs(self, points, heatmaps, decoded, conf, P):
        """Raw per-view encodings.

        points (..., N, 3); heatmaps (..., V, k, H, W); decoded (..., V, k, 2);
        conf (..., V, k); P (..., V, 3, 4).  Returns (enc (..., V, N, d_view),
        front (..., V, N) bool).
        """
        pts = np.asarray(points)
        N = pts.shape[-2]
        h = np.einsum("...vij,...nj->...vni", P[..., :3], pts) + P[..., None, :, 3]
        w = h[..., 2]
        front = w > 1e-6
        uv = h[..., :2] / np.where(front, w, 1.0)[..., None]
        uv = np.where(front[..., None], uv, -1e3)
        feat_hm = bilinear_sample(heatmaps, px_to_cell(uv, RESOLUTION))
        pe = sinusoidal(np.clip(uv / (self.frame - 1.0), -1.0, 2.0), self.n_freq)
        d2 = ((uv[..., :, None, :] - decoded[..., None, :, :]) ** 2).sum(-1)  # (..., V, N, k)
        nearest = np.argmin(d2, axis=-1)
        conf_near = np.take_along_axis(conf[..., None, :], nearest[..., None], -1)  # (..., V, N, 1)
        jid = np.arange(N) % self.k
        same = decoded[..., jid, :]
        offset = np.tanh((uv - same) / self.offset_scale)
        conf_same = conf[..., jid][..., None]
        enc = np.concatenate([feat_hm, pe, conf_near, offset, conf_same], -1)
        enc = np.where(front[..., None], enc, 0.0)
        return enc, front

    def __call__(self, points, heatmaps, decoded, conf, P, center=np.zeros(3)):
        enc, front = self.view_inputs(points, heatmaps, decoded, conf, P)
        e = ad.tanh(self.view_layer(ad.Tensor(enc)))
        wts = front.astype(np.float64)
        cnt = wts.sum(axis=-2)  # (..., N)
        behind_all = cnt == 0
        if np.any(behind_all):
            log.info("%d points are behind every camera; their view features are zero", int(behind_all.sum()))
        wts = wts / np.maximum(cnt, 1.0)[..., None, :]
        pooled = ad.sum_(ad.mul(e, wts[..., None]), axis=-3)  # (..., N, hidden)
        coords = (np.asarray(points) - center) / self.half
        x = ad.concat([pooled, ad.Tensor(coords)], -1)
        out = ad.tanh(self.bottleneck(x))
        N = coords.shape[-2]
        return ad.add(out, ad.gather(self.joint_emb, np.arange(N) % self.k, axis=0))


def fuse_point_features(encoder, cloud, heatmaps, decoded, conf, P, center=np.zeros(3)):
    cloud.query_feat = encoder(cloud.query, heatmaps, decoded, conf, P, center)
    cloud.anchor_feat = encoder(np.where(cloud.anchor_valid[..., None], cloud.anchors, 0.0),
                                heatmaps, decoded, conf, P, center)
    return cloud


def _batched_gather(x, idx):
    """x (N, P, D) tensor, idx (N, Q, K) ints -> (N, Q, K, D)."""
    x = ad.as_tensor(x)
    N, Pn = x.shape[:2]
    flat = x.reshape(N * Pn, *x.shape[2:])
    offs = (np.arange(N) * Pn)[:, None, None]
    return ad.gather(flat, idx + offs, axis=0)


class StptBlock:
    def __init__(self, store, rng, name, d=32, d_pos=32, k_nn=8, t_max=16, local_scale=20.0,
                 refine_scale=20.0):
        self.d = d
        self.k_nn = k_nn
        self.local_scale = local_scale
        self.refine_scale = refine_scale
        self.sp = {n: Linear(store, f"{name}.sp.{n}", d, d, rng, bias=False) for n in "qkv"}
        self.sp_pos = MLP(store, f"{name}.sp.pos", 3, d_pos, d, rng, bias=False)
        self.frame_emb = store.add(f"{name}.tp.frame_emb", rng.normal(scale=0.1, size=(t_max, d)))
        self.tp = {n: Linear(store, f"{name}.tp.{n}", d, d, rng, bias=False) for n in "qkv"}
        self.tp_pos = MLP(store, f"{name}.tp.pos", 3, d_pos, d, rng, bias=False)
        self.cr = {n: Linear(store, f"{name}.cr.{n}", d, d, rng, bias=False) for n in "qkv"}
        self.cr_pos = MLP(store, f"{name}.cr.pos", 3, d_pos, d, rng, bias=False)
        self.ffn = MLP(store, f"{name}.ffn", d, d, 3, rng, zero_last=True)
        self.attn = {}

    # Each attention returns (features, weights) so tests can inspect rows.

    def spatial_attention(self, feats, coords, idx=None):
        """feats (N, J, d), coords (N, J, 3) -> (N, J, d)."""
        feats = ad.as_tensor(feats)
        coords = ad.as_tensor(coords)
        if idx is None:
            idx = kernels.knn(coords.data, coords.data, min(self.k_nn, coords.shape[1]))
        q = self.sp["q"](feats)
        k_nb = _batched_gather(self.sp["k"](feats), idx)
        v_nb = _batched_gather(self.sp["v"](feats), idx)
        c_nb = _batched_gather(coords, idx)
        rel = ad.mul(ad.sub(coords.reshape(*coords.shape[:2], 1, 3), c_nb), 1.0 / self.local_scale)
        delta = self.sp_pos(rel)
        keys = ad.add(k_nb, delta)
        vals = ad.add(v_nb, delta)
        N, J = feats.shape[:2]
        logits = ad.mul(ad.sum_(ad.mul(q.reshape(N, J, 1, self.d), keys), -1), 1.0 / np.sqrt(self.d))
        w = ad.softmax(logits, axis=-1)
        self.attn["spatial"] = w.data
        out = ad.sum_(ad.mul(w.reshape(*w.shape, 1), vals), axis=2)
        return ad.add(feats, out)

    def temporal_attention(self, feats, coords=None):
        """feats (B, T, J, d) -> (B, T, J, d); attention over T per joint.

        With ``coords`` (B, T, J, 3) the displacement between frames of the
        same joint is encoded and added to keys and values, as in the
        spatial step.
        """
        feats = ad.as_tensor(feats)
        B, T, J, d = feats.shape
        x = ad.add(feats, self.frame_emb[:T].reshape(1, T, 1, d))
        xt = ad.transpose(x, (0, 2, 1, 3))  # (B, J, T, d)
        q, k, v = self.tp["q"](xt), self.tp["k"](xt), self.tp["v"](xt)
        if coords is None:
            logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
            w = ad.softmax(logits, axis=-1)
            out = ad.matmul(w, v)
        else:
            ct = ad.transpose(ad.as_tensor(coords), (0, 2, 1, 3))  # (B, J, T, 3)
            rel = ad.mul(ad.sub(ct.reshape(B, J, T, 1, 3), ct.reshape(B, J, 1, T, 3)), 1.0 / self.local_scale)
            delta = self.tp_pos(rel)  # (B, J, T, T, d)
            keys = ad.add(k.reshape(B, J, 1, T, d), delta)
            vals = ad.add(v.reshape(B, J, 1, T, d), delta)
            logits = ad.mul(ad.sum_(ad.mul(q.reshape(B, J, T, 1, d), keys), -1), 1.0 / np.sqrt(d))
            w = ad.softmax(logits, axis=-1)
            out = ad.sum_(ad.mul(w.reshape(B, J, T, T, 1), vals), axis=3)
        self.attn["temporal"] = w.data
        return ad.add(feats, ad.transpose(out, (0, 2, 1, 3)))

    def cross_attention_refine(self, q_feats, q_coords, a_feats, a_coords, a_valid=None, idx=None):
        """Queries (N, J, ·) attend to their k_nn nearest anchors (N, A, ·).

        Returns (refined coords tensor (N, J, 3), features (N, J, d)).
        """
        q_feats = ad.as_tensor(q_feats)
        q_coords = ad.as_tensor(q_coords)
        a_coords = np.asarray(a_coords, dtype=np.float64)
        if a_valid is None:
            a_valid = np.ones(a_coords.shape[:2], dtype=bool)
        if a_coords.shape[1] == 0 or not np.any(a_valid):
            log.warning("empty anchor set: skipping refinement")
            return q_coords, q_feats
        n_nb = min(self.k_nn, int(a_valid.sum(axis=1).min()))
        if idx is None:
            idx = kernels.knn(q_coords.data, a_coords, n_nb, a_valid)
        N, J = q_feats.shape[:2]
        q = self.cr["q"](q_feats)
        k_nb = _batched_gather(self.cr["k"](a_feats), idx)
        v_nb = _batched_gather(self.cr["v"](a_feats), idx)
        c_nb = _batched_gather(ad.Tensor(a_coords), idx)
        rel = ad.mul(ad.sub(q_coords.reshape(N, J, 1, 3), c_nb), 1.0 / self.local_scale)
        delta = self.cr_pos(rel)
        keys = ad.add(k_nb, delta)
        vals = ad.add(v_nb, delta)
        logits = ad.mul(ad.sum_(ad.mul(q.reshape(N, J, 1, self.d), keys), -1), 1.0 / np.sqrt(self.d))
        w = ad.softmax(logits, axis=-1)
        self.attn["cross"] = w.data
        feats = ad.add(q_feats, ad.sum_(ad.mul(w.reshape(*w.shape, 1), vals), axis=2))
        coords = ad.add(q_coords, ad.mul(self.ffn(feats), self.refine_scale))
        return coords, feats

    def __call__(self, q_feats, q_coords, a_feats, a_coords, a_valid):
        """All inputs carry leading (B, T); returns (coords, feats) with the same layout."""
        q_feats = ad.as_tensor(q_feats)
        B, T, J, d = q_feats.shape
        coords = ad.as_tensor(q_coords).reshape(B * T, J, 3)
        f = self.spatial_attention(q_feats.reshape(B * T, J, d), coords)
        f = self.temporal_attention(f.reshape(B, T, J, d), coords.reshape(B, T, J, 3)).reshape(B * T, J, d)
        A = a_coords.shape[-2]
        c, f = self.cross_attention_refine(f, coords, ad.as_tensor(a_feats).reshape(B * T, A, d),
                                           np.asarray(a_coords).reshape(B * T, A, 3),
                                           np.asarray(a_valid).reshape(B * T, A))
        return c.reshape(B, T, J, 3), f.reshape(B, T, J, d)


class Stpt:
    def __init__(self, store, rng, n_blocks=4, d=32, k_nn=8, t_max=16, name="stpt", **kw):
        if n_blocks < 1:
            raise ValueError("need at least one STPT block")
        self.blocks = [StptBlock(store, rng, f"{name}.b{i}", d=d, k_nn=k_nn, t_max=t_max, **kw)
                       for i in range(n_blocks)]

    def __call__(self, q_feats, q_coords, a_feats, a_coords, a_valid, n_blocks=None):
        """Refine (B, T, k, 3) query coordinates; anchors are read-only."""
        coords = ad.Tensor(np.array(q_coords, dtype=np.float64))
        feats = q_feats
        for block in self.blocks[:n_blocks]:
            coords, feats = block(feats, coords, a_feats, a_coords, a_valid)
        return coords, feats


def stpt_forward(stpt, cloud, n_blocks=None):
    return stpt(cloud.query_feat, cloud.query, cloud.anchor_feat, cloud.anchors, cloud.anchor_valid, n_blocks)
