"""The full lifting pipeline.

Frame stage (per frame, all views): corrupted evidence heatmaps -> refiner ->
soft-argmax joints and confidences -> joint-graph fusion -> flow hypotheses
-> anchor/query clouds with point features.  Window stage: the point
transformer refines the query cloud over T frames and the skeleton head fits
the centre frame.  Only the centre frame of a window carries gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .flow import ConditionalFlow
from .graph import GraphInteraction
from .heatmap import (HeatmapRefiner, joint_confidence, loss_hm2d, loss_hmap, render_evidence,
                      soft_argmax_tensor)
from .skeleton import NUM_JOINTS, SkeletonHead, loss_proj2d, total_loss
from .stpt import PointFeatureEncoder, Stpt, fuse_point_features, lift_hypotheses


@dataclass
class FrameOutput:
    maps: ad.Tensor          # (N, V, k, H, W) refined heatmaps
    decoded: ad.Tensor       # (N, V, k, 2) px
    conf: np.ndarray         # (N, V, k)
    fused: ad.Tensor         # (N, V, D_f)
    cloud: object            # ProbPointCloud with (N, ...) leading dim


class HandLifter:
    def __init__(self, cfg: TrainConfig | None = None, seed=None, flatten=1.0, template=None):
        self.cfg = cfg or TrainConfig()
        seed = self.cfg.seed if seed is None else seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
        self.store = ad.ParamStore()
        self.flatten = flatten
        k = NUM_JOINTS
        self.refiner = HeatmapRefiner(self.store, rng)
        self.graph = GraphInteraction(self.store, rng, k=k)
        self.flow = ConditionalFlow(self.store, rng, k=k, cond_dim=self.graph.d_fuse)
        self.encoder = PointFeatureEncoder(self.store, rng, d_point=self.cfg.d_point, k=k)
        self.stpt = Stpt(self.store, rng, n_blocks=self.cfg.K, d=self.cfg.d_point, k_nn=self.cfg.k_nn,
                         t_max=max(self.cfg.T, 7))
        self.head = SkeletonHead(self.store, rng, self.cfg.d_point, template=template)

    # ------------------------------------------------------------ stages

    def frame_stage(self, evidence2d, evidence_conf, P, rng):
        """evidence2d (N, V, k, 2), evidence_conf (N, V, k), P (V, 3, 4)."""
        N, V, k, _ = evidence2d.shape
        maps_in, _ = render_evidence(evidence2d, evidence_conf, flatten=self.flatten)
        maps = self.refiner(maps_in)
        decoded = soft_argmax_tensor(maps)
        # everything below the graph input sees plain arrays
        maps_d = ad.detach(maps)
        dec_d = ad.detach(decoded)
        conf = joint_confidence(maps_d)
        fused = self.graph(dec_d, conf)
        hyps = self.flow.sample_hypotheses(ad.detach(fused).reshape(N * V, -1), self.cfg.M, rng,
                                           dec_d.reshape(N * V, k, 2))
        key = ad.detach(hyps.key).reshape(N, V, k, 2)
        samples = ad.detach(hyps.samples).reshape(N, V, self.cfg.M, k, 2)
        cloud = lift_hypotheses(key, samples, conf, P)
        fuse_point_features(self.encoder, cloud, maps_d, dec_d, conf, P)
        return FrameOutput(maps, decoded, conf, fused, cloud)

    def window_stage(self, q_feat, query, a_feat, anchors, valid, n_blocks=None):
        """(B, T, ...) clouds -> (refined coords (B, T, k, 3), feats (B, T, k, d))."""
        return self.stpt(q_feat, query, a_feat, anchors, valid, n_blocks)

    # ------------------------------------------------------------ training

    def forward_train(self, batch, P, rng):
        """Losses for a batch of windows.

        batch: dict with evidence2d (B, T, V, k, 2), evidence_conf (B, T, V, k),
        pseudo2d (B, V, k, 2), pseudo_conf (B, V, k) for the centre frames.
        Returns (total loss tensor, dict of term tensors, centre prediction).
        """
        ev, ec = batch["evidence2d"], batch["evidence_conf"]
        B, T, V, k, _ = ev.shape
        c = T // 2
        centre = self.frame_stage(ev[:, c], ec[:, c], P, rng)
        ctx = None
        if T > 1:
            idx = [t for t in range(T) if t != c]
            with ad.no_grad():
                ctx = self.frame_stage(ev[:, idx].reshape(B * (T - 1), V, k, 2),
                                       ec[:, idx].reshape(B * (T - 1), V, k), P, rng)
        q_feat, query, a_feat, anchors, valid = self._assemble(centre, ctx, B, T)
        coords, feats = self.window_stage(q_feat, query, a_feat, anchors, valid)
        pred = coords[:, c]
        params, skel = self.head(feats[:, c], pred)

        pseudo2d = batch["pseudo2d"]
        target_maps, _ = render_evidence(pseudo2d, batch["pseudo_conf"], flatten=self.flatten)
        terms = {
            "hmap": loss_hmap(centre.maps, target_maps),
            "hm2d": loss_hm2d(centre.decoded, pseudo2d),
            "nll": self.flow.loss_nll(pseudo2d.reshape(B * V, k, 2), ad.detach(centre.decoded).reshape(B * V, k, 2),
                                      centre.fused.reshape(B * V, -1)),
            "proj2d": loss_proj2d(pred, skel, pseudo2d, centre.conf, P)[0],
        }
        return total_loss(terms, self.cfg.loss_weights()), terms, pred

    @staticmethod
    def _assemble(centre, ctx, B, T):
        c = T // 2
        cc = centre.cloud

        def join(cen, oth, arr):
            cen = cen.reshape(B, 1, *cen.shape[1:])
            if oth is None:
                return cen
            # context frames ran without a tape; their values are constants
            oth = ad.detach(oth).reshape(B, T - 1, *oth.shape[1:])
            if arr:
                return np.concatenate([oth[:, :c], cen, oth[:, c:]], axis=1)
            return ad.concat([ad.as_tensor(oth[:, :c]), cen, ad.as_tensor(oth[:, c:])], axis=1)

        oc = ctx.cloud if ctx is not None else None
        q_feat = join(cc.query_feat, oc and oc.query_feat, False)
        a_feat = join(cc.anchor_feat, oc and oc.anchor_feat, False)
        query = join(cc.query, oc and oc.query, True)
        anchors = join(cc.anchors, oc and oc.anchors, True)
        valid = join(cc.anchor_valid, oc and oc.anchor_valid, True)
        return q_feat, query, a_feat, anchors, valid

    # ------------------------------------------------------------ inference

    def predict_sequence(self, evidence2d, evidence_conf, P, rng, chunk=64):
        """Run a whole sequence; returns dict of per-frame predictions.

        evidence2d (F, V, k, 2).  Each frame's window uses replication padding.
        """
        from .train import window_indices
        Fn = evidence2d.shape[0]
        T = self.cfg.T
        outs = []
        with ad.no_grad():
            for s in range(0, Fn, chunk):
                outs.append(self.frame_stage(evidence2d[s:s + chunk], evidence_conf[s:s + chunk], P, rng))
            cat = lambda get: np.concatenate([get(o) for o in outs], axis=0)
            q_feat = cat(lambda o: o.cloud.query_feat.data)
            a_feat = cat(lambda o: o.cloud.anchor_feat.data)
            query = cat(lambda o: o.cloud.query)
            anchors = cat(lambda o: o.cloud.anchors)
            valid = cat(lambda o: o.cloud.anchor_valid)
            win = window_indices(Fn, T)  # (F, T)
            preds, skels = [], []
            for s in range(0, Fn, chunk):
                w = win[s:s + chunk]
                coords, feats = self.window_stage(q_feat[w], query[w], a_feat[w], anchors[w], valid[w])
                pred = coords.data[:, T // 2]
                _, sk = self.head(ad.Tensor(feats.data[:, T // 2]), ad.Tensor(pred))
                preds.append(pred)
                skels.append(sk.data)
        return {
            "joints3d": np.concatenate(preds),
            "skeleton3d": np.concatenate(skels),
            "query3d": query,
            "decoded2d": cat(lambda o: o.decoded.data),
            "conf": cat(lambda o: o.conf),
        }
