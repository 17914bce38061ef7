"""21-joint kinematic hand skeleton, parameter regression head and the
projection / total losses.

Joint order: wrist, then thumb, index, middle, ring, pinky with four joints
each (base to tip).  Each non-root joint owns the bone from its parent and a
local axis-angle rotation of that bone; rotations compose down the chain.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .camera import kabsch
from .errors import BehindCameraError, NonFiniteError, ShapeError
from .nn import MLP

log = logging.getLogger(__name__)

NUM_JOINTS = 21
NUM_BONES = 20
PARAM_DIM = 3 + 3 + 3 * NUM_BONES + NUM_BONES  # 86
SCALE_MIN, SCALE_MAX = 0.5, 2.0

PARENTS = np.array([-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19])

# canonical right hand in mm, wrist at the origin, fingers along +y
REST_JOINTS = np.array([
    [0.0, 0.0, 0.0],
    [-20.0, 20.0, 6.0], [-36.0, 45.0, 9.0], [-46.0, 70.0, 9.0], [-53.0, 90.0, 9.0],
    [-20.0, 85.0, 0.0], [-22.0, 125.0, 0.0], [-23.0, 150.0, 0.0], [-24.0, 170.0, 0.0],
    [0.0, 88.0, 0.0], [0.0, 132.0, 0.0], [0.0, 160.0, 0.0], [0.0, 182.0, 0.0],
    [18.0, 83.0, 0.0], [20.0, 122.0, 0.0], [21.0, 148.0, 0.0], [22.0, 168.0, 0.0],
    [34.0, 75.0, 0.0], [37.0, 105.0, 0.0], [39.0, 124.0, 0.0], [40.0, 140.0, 0.0],
])

BONES = np.array([
    [0, 1], [1, 2], [2, 3], [3, 4], [0, 5], [5, 6], [6, 7], [7, 8], [0, 9], [9, 10],
    [10, 11], [11, 12], [0, 13], [13, 14], [14, 15], [15, 16], [0, 17], [17, 18],
    [18, 19], [19, 20],
])


@dataclass
class SkeletonTemplate:
    parents: np.ndarray
    rest_bones: np.ndarray  # (21, 3); row 0 unused (zeros)

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest_bones = np.asarray(self.rest_bones, dtype=np.float64)
        roots = np.flatnonzero(self.parents < 0)
        if len(self.parents) != NUM_JOINTS or self.rest_bones.shape != (NUM_JOINTS, 3):
            raise ShapeError("template must describe 21 joints")
        if roots.tolist() != [0]:
            raise ValueError("template needs exactly one root, at index 0")
        if np.any(self.parents[1:] >= np.arange(1, NUM_JOINTS)):
            raise ValueError("parents must precede children (acyclic, topological order)")

    @classmethod
    def canonical(cls):
        bones = np.zeros((NUM_JOINTS, 3))
        bones[1:] = REST_JOINTS[1:] - REST_JOINTS[PARENTS[1:]]
        return cls(PARENTS.copy(), bones)

    @property
    def bone_lengths(self):
        return np.linalg.norm(self.rest_bones[1:], axis=1)

    def rest_pose(self):
        j = np.zeros((NUM_JOINTS, 3))
        for i in range(1, NUM_JOINTS):
            j[i] = j[self.parents[i]] + self.rest_bones[i]
        return j

    def to_dict(self):
        return {"parents": self.parents.tolist(), "rest_bones": self.rest_bones.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["parents"]), np.array(d["rest_bones"]))


@dataclass
class SkeletonParams:
    translation: np.ndarray      # (3,) mm, wrist position
    global_rot: np.ndarray       # (3,) axis-angle
    joint_rots: np.ndarray       # (20, 3) axis-angle per bone
    bone_scales: np.ndarray      # (20,)

    def to_vector(self):
        return np.concatenate([self.translation, self.global_rot, np.ravel(self.joint_rots), self.bone_scales])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != PARAM_DIM:
            raise ShapeError(f"expected {PARAM_DIM} parameters, got {v.shape[-1]}")
        return cls(v[0:3], v[3:6], v[6:66].reshape(20, 3), v[66:86])

    @classmethod
    def rest(cls, translation=(0.0, 0.0, 0.0)):
        return cls(np.asarray(translation, float), np.zeros(3), np.zeros((20, 3)), np.ones(20))


# ------------------------------------------------------------ rotations

def _skew(w):
    """(..., 3) tensor -> (..., 3, 3) cross-product matrices."""
    w = ad.as_tensor(w)
    x, y, z = w[..., 0:1], w[..., 1:2], w[..., 2:3]
    zero = ad.mul(x, 0.0)
    rows = [ad.concat([zero, -z, y], -1), ad.concat([z, zero, -x], -1), ad.concat([-y, x, zero], -1)]
    lead = w.shape[:-1]
    return ad.concat([r.reshape(*lead, 1, 3) for r in rows], -2)


def axis_angle_to_matrix(w, squarings=4, order=12):
    """Matrix exponential of the skew matrix of ``w``.

    Scaling and squaring with a truncated Taylor series; built only from
    matmul/add so it differentiates everywhere, including at ``w = 0``.
    Accurate to ~1e-15 for |w| <= pi.
    """
    w = ad.as_tensor(w)
    A = ad.mul(_skew(w), 1.0 / 2 ** squarings)
    lead = w.shape[:-1]
    eye = np.broadcast_to(np.eye(3), (*lead, 3, 3))
    term = ad.Tensor(eye)
    out = ad.Tensor(eye)
    for n in range(1, order + 1):
        term = ad.mul(ad.matmul(term, A), 1.0 / n)
        out = ad.add(out, term)
    for _ in range(squarings):
        out = ad.matmul(out, out)
    return out


def _scales_from_raw(raw):
    """Smooth map R -> [0.5, 2]: 2 ** tanh(raw)."""
    return ad.exp(ad.mul(ad.tanh(raw), np.log(2.0)))


def forward_kinematics(template, params, clamp=True):
    """Joint positions (..., 21, 3) in mm.

    ``params`` is a SkeletonParams, a (..., 86) array or a (..., 86) Tensor.
    Array/dataclass input returns a numpy array; Tensor input returns a Tensor.
    """
    as_array = not isinstance(params, ad.Tensor)
    if isinstance(params, SkeletonParams):
        params = params.to_vector()
    p = ad.as_tensor(params)
    if p.shape[-1] != PARAM_DIM:
        raise ShapeError(f"expected (..., {PARAM_DIM}) parameters, got {p.shape}")
    lead = p.shape[:-1]
    trans = p[..., 0:3]
    grot = p[..., 3:6]
    jrot = p[..., 6:66].reshape(*lead, NUM_BONES, 3)
    scales = p[..., 66:86]
    if clamp:
        sd = scales.data
        if np.any(sd < SCALE_MIN) or np.any(sd > SCALE_MAX):
            log.warning("bone-length scales outside [%.1f, %.1f] clamped", SCALE_MIN, SCALE_MAX)
            inside = (sd >= SCALE_MIN) & (sd <= SCALE_MAX)
            scales = ad.add(ad.mul(scales, inside.astype(float)), np.clip(sd, SCALE_MIN, SCALE_MAX) * ~inside)
    Rg = axis_angle_to_matrix(grot)
    Rl = axis_angle_to_matrix(jrot)
    bones = np.asarray(template.rest_bones)
    parents = template.parents
    G = [None] * NUM_JOINTS
    J = [None] * NUM_JOINTS
    G[0] = Rg
    J[0] = trans
    for j in range(1, NUM_JOINTS):
        par = parents[j]
        Gj = ad.matmul(G[par], Rl[..., j - 1, :, :])
        b = ad.mul(scales[..., j - 1:j], bones[j])
        off = ad.matmul(Gj, b.reshape(*lead, 3, 1)).reshape(*lead, 3)
        G[j] = Gj
        J[j] = ad.add(J[par], off)
    out = ad.concat([x.reshape(*lead, 1, 3) for x in J], -2)
    return out.data.copy() if as_array else out


# ------------------------------------------------------------ regression head

class SkeletonHead:
    """Regress skeleton parameters from refined query features and coordinates.

    The global rotation starts from the Kabsch fit of the rest pose to the
    query cloud and the translation from the query wrist; the MLP predicts
    residuals (its last layer is zero-initialised).
    """

    def __init__(self, store, rng, feat_dim, hidden=64, name="skel", template=None, coord_scale=100.0):
        self.template = template or SkeletonTemplate.canonical()
        self.rest = self.template.rest_pose()
        self.coord_scale = coord_scale
        self.mlp = MLP(store, f"{name}.mlp", feat_dim + 3 * NUM_JOINTS, hidden, PARAM_DIM, rng, zero_last=True)

    def init_pose(self, coords):
        """Per-sample (axis-angle of Kabsch rotation, wrist) from (N, 21, 3) coords."""
        from scipy.spatial.transform import Rotation
        coords = np.asarray(coords)
        rots = np.stack([kabsch(self.rest, c) for c in coords.reshape(-1, NUM_JOINTS, 3)])
        aa = Rotation.from_matrix(rots).as_rotvec().reshape(*coords.shape[:-2], 3)
        return aa, coords[..., 0, :], rots.reshape(*coords.shape[:-2], 3, 3)

    def regress(self, feats, coords):
        """feats (N, 21, D) tensor, coords (N, 21, 3) tensor -> (N, 86) params tensor."""
        feats = ad.as_tensor(feats)
        coords = ad.as_tensor(coords)
        n = coords.shape[0]
        aa, wrist, R0 = self.init_pose(ad.detach(coords))
        local = ad.matmul(ad.sub(coords, coords[:, 0:1, :]), R0) * (1.0 / self.coord_scale)
        x = ad.concat([feats.mean(axis=1), local.reshape(n, 3 * NUM_JOINTS)], -1)
        raw = self.mlp(x)
        trans = ad.add(coords[:, 0, :], raw[:, 0:3] * self.coord_scale)
        grot = ad.add(raw[:, 3:6], aa)
        scales = _scales_from_raw(raw[:, 66:86])
        return ad.concat([trans, grot, raw[:, 6:66], scales], -1)

    def __call__(self, feats, coords):
        params = self.regress(feats, coords)
        return params, forward_kinematics(self.template, params, clamp=False)


def regress_params(head, feats, coords):
    return head.regress(feats, coords)


# ------------------------------------------------------------ losses

def loss_proj2d(query3d, skel3d, pseudo2d, confidences, P):
    """Confidence-weighted reprojection loss of query and skeleton joints.

    query3d, skel3d: (B, k, 3) tensors (skel3d may be None); pseudo2d:
    (B, V, k, 2); confidences: (B, V, k) (treated as constants); P: (V, 3, 4)
    or (B, V, 3, 4).  Per view: mean over joints of conf * squared pixel
    error for each joint set; the two terms are summed and averaged over
    views and batch.  Joints behind a camera are excluded.

    Returns (loss tensor, number of excluded joint projections).
    """
    pseudo2d = np.asarray(pseudo2d, dtype=np.float64)
    conf = np.asarray(confidences, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    B, V, k, _ = pseudo2d.shape
    if ad.as_tensor(query3d).shape != (B, k, 3):
        raise ShapeError(f"query joints {ad.as_tensor(query3d).shape} vs labels {pseudo2d.shape}")
    if P.ndim == 3:
        P = np.broadcast_to(P, (B, V, 3, 4))
    total = None
    excluded = 0
    for v in range(V):
        terms = []
        for joints in ((query3d, skel3d) if skel3d is not None else (query3d,)):
            t, nex = _view_term_batched(joints, pseudo2d[:, v], conf[:, v], P[:, v])
            excluded += nex
            terms.append(t)
        vt = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
        total = vt if total is None else ad.add(total, vt)
    if excluded >= B * V * k * (2 if skel3d is not None else 1):
        raise BehindCameraError("all joints are behind the camera in every view")
    return ad.mean(total) * (1.0 / V), excluded


def _view_term_batched(joints3d, pseudo, conf, P):
    """joints3d (B, k, 3), pseudo (B, k, 2), conf (B, k), P (B, 3, 4) -> (B,) tensor."""
    joints3d = ad.as_tensor(joints3d)
    h = ad.add(ad.matmul(joints3d, np.swapaxes(P[:, :, :3], -1, -2)), P[:, None, :, 3])
    w = h[..., 2:3]
    front = w.data[..., 0] > 1e-6
    safe = ad.add(w, np.where(front[..., None], 0.0, 1.0))
    uv = ad.div(h[..., 0:2], safe)
    err = ad.sum_(ad.square(ad.sub(uv, pseudo)), axis=-1)
    return ad.mean(ad.mul(err, conf * front), axis=-1), int((~front).sum())


@dataclass
class LossWeights:
    hmap: float = 0.001
    hm2d: float = 10.0
    nll: float = 0.1
    proj2d: float = 10.0

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")

    def as_dict(self):
        return {"hmap": self.hmap, "hm2d": self.hm2d, "nll": self.nll, "proj2d": self.proj2d}


def total_loss(terms, weights=None):
    """Weighted sum of the four loss terms (dict of scalar Tensors or floats)."""
    weights = weights or LossWeights()
    out = None
    for name in ("hmap", "hm2d", "nll", "proj2d"):
        term = ad.as_tensor(terms[name])
        if not np.all(np.isfinite(term.data)):
            raise NonFiniteError("loss term", name)
        weighted = ad.mul(term, getattr(weights, name))
        out = weighted if out is None else ad.add(out, weighted)
    return out
