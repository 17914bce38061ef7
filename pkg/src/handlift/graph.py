"""Confidence-aware joint-graph interaction across views.

Tokens per (view, joint) are the sinusoidal embedding of the decoded 2D
joint concatenated with a learned joint-id embedding; the joint confidence
rides along as an extra channel seen by the attention projections.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .nn import MLP, Linear, sinusoidal
from .skeleton import NUM_JOINTS, PARENTS
from .synthetic import FRAME_SIZE


@dataclass
class JointGraph:
    tokens: ad.Tensor       # (B, V, k, D)
    confidence: np.ndarray  # (B, V, k)

    @property
    def n_views(self):
        return self.tokens.shape[1]


def kinematic_adjacency(k=NUM_JOINTS, parents=PARENTS):
    A = np.eye(k)
    for j in range(1, k):
        A[j, parents[j]] = A[parents[j], j] = 1.0
    return A


class GraphInteraction:
    def __init__(self, store, rng, k=NUM_JOINTS, d_pos=32, d_joint=32, d_attn=32, d_fuse=64,
                 n_layers=2, frame=FRAME_SIZE, name="graph"):
        if d_pos % 4:
            raise ValueError("d_pos must be a multiple of 4")
        self.k = k
        self.frame = frame
        self.n_freq = d_pos // 4
        self.D = d_pos + d_joint
        self.d_attn = d_attn
        self.joint_emb = store.add(f"{name}.joint_emb", rng.normal(scale=0.5, size=(k, d_joint)))
        self.layers = []
        for i in range(n_layers):
            A0 = kinematic_adjacency(k) + rng.normal(scale=0.01, size=(k, k))
            agcn = {
                "A": store.add(f"{name}.agcn{i}.A", A0),
                "W": store.add(f"{name}.agcn{i}.W", rng.normal(scale=0.5 / np.sqrt(self.D), size=(self.D, self.D))),
            }
            casa = {
                "q": Linear(store, f"{name}.casa{i}.q", self.D + 1, d_attn, rng, bias=False),
                "k": Linear(store, f"{name}.casa{i}.k", self.D + 1, d_attn, rng, bias=False),
                "v": Linear(store, f"{name}.casa{i}.v", self.D + 1, self.D, rng, bias=False, gain=0.5),
            }
            self.layers.append((agcn, casa))
        self.fuse_mlp = MLP(store, f"{name}.fuse", self.D, d_fuse, d_fuse, rng)
        self.d_fuse = d_fuse
        self.last_attention = []

    # -- building blocks

    def build_tokens(self, joints2d, confidence):
        """joints2d (B, V, k, 2) px, confidence (B, V, k) -> JointGraph."""
        j = np.asarray(joints2d, dtype=np.float64)
        c = np.asarray(confidence, dtype=np.float64)
        if j.ndim != 4 or j.shape[2] != self.k or j.shape[-1] != 2 or c.shape != j.shape[:-1]:
            raise ShapeError(f"inconsistent joint observations: joints {j.shape}, confidence {c.shape}")
        B, V = j.shape[:2]
        pos = sinusoidal(j / (self.frame - 1.0), self.n_freq)
        emb = ad.mul(self.joint_emb, np.ones((B, V, 1, 1)))
        return JointGraph(ad.concat([ad.Tensor(pos), emb], -1), c)

    def agcn_layer(self, graph, p):
        A = ad.softmax(p["A"], axis=-1)
        msg = ad.matmul(ad.matmul(A, graph.tokens), p["W"])
        return JointGraph(ad.add(graph.tokens, msg), graph.confidence)

    def casa_layer(self, graph, p, keep=False):
        B, V, k, D = graph.tokens.shape
        x = graph.tokens.reshape(B, V * k, D)
        xt = ad.concat([x, ad.Tensor(graph.confidence.reshape(B, V * k, 1))], -1)
        q, kk, v = p["q"](xt), p["k"](xt), p["v"](xt)
        logits = ad.mul(ad.matmul(q, ad.transpose(kk, (0, 2, 1))), 1.0 / np.sqrt(self.d_attn))
        w = ad.softmax(logits, axis=-1)
        if keep:
            self.last_attention.append(w.data.copy())
        out = ad.add(x, ad.matmul(w, v))
        return JointGraph(out.reshape(B, V, k, D), graph.confidence)

    def fuse(self, graph):
        """Mean over joints per view, then a 2-layer MLP -> (B, V, d_fuse)."""
        return self.fuse_mlp(ad.mean(graph.tokens, axis=2))

    def __call__(self, joints2d, confidence, keep_attention=False):
        self.last_attention = []
        g = self.build_tokens(joints2d, confidence)
        for agcn, casa in self.layers:
            g = self.agcn_layer(g, agcn)
            g = self.casa_layer(g, casa, keep=keep_attention)
        return self.fuse(g)


def attention_mass_by_confidence(attn, confidence, low=0.1, high=0.9):
    """Mean attention received per token for low- and high-confidence tokens.

    attn: (B, N, N) row-stochastic; confidence: (B, N).
    """
    received = np.asarray(attn).sum(axis=1)  # (B, N)
    conf = np.asarray(confidence).reshape(received.shape)
    lo = received[conf < low]
    hi = received[conf > high]
    return (float(lo.mean()) if lo.size else np.nan, float(hi.mean()) if hi.size else np.nan)
