"""Pinhole cameras, projection, confidence-weighted DLT and Procrustes.

Units: millimetres in the world, pixels in the image.  Extrinsics map world
to camera: ``X_cam = R @ X + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import (BehindCameraError, DegenerateGeometryError, InsufficientViewsError,
                     ShapeError)

MIN_DEPTH = 1e-6


@dataclass
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("camera rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-9:
            raise ValueError("camera rotation must have det +1")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if self.K[0, 1] != 0 or np.any(self.K[2] != (0.0, 0.0, 1.0)) or self.K[1, 0] != 0:
            raise ValueError("intrinsics must be zero-skew [[fx,0,cx],[0,fy,cy],[0,0,1]]")

    @classmethod
    def from_params(cls, fx, fy, cx, cy, R, t):
        return cls(np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]), R, t)

    @property
    def P(self):
        return self.K @ np.hstack([self.R, self.t[:, None]])

    @property
    def center(self):
        return -self.R.T @ self.t

    def to_dict(self):
        return {"K": self.K.tolist(), "R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["K"]), np.array(d["R"]), np.array(d["t"]))


@dataclass
class Rig:
    cameras: list
    view_ids: list = field(default=None)

    def __post_init__(self):
        if self.view_ids is None:
            self.view_ids = list(range(len(self.cameras)))
        if len(self.view_ids) != len(self.cameras):
            raise ValueError("one view id per camera")

    def __len__(self):
        return len(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]

    def subset(self, views):
        return Rig([self.cameras[v] for v in views], [self.view_ids[v] for v in views])

    @property
    def P(self):
        return np.stack([c.P for c in self.cameras])

    def to_dict(self):
        return {"view_ids": list(map(int, self.view_ids)), "cameras": [c.to_dict() for c in self.cameras]}

    @classmethod
    def from_dict(cls, d):
        return cls([Camera.from_dict(c) for c in d["cameras"]], list(d["view_ids"]))


def depth(camera, points):
    points = np.asarray(points, dtype=np.float64)
    return points @ camera.R[2] + camera.t[2]


def project(camera, point3d, check=True):
    """Project world points (..., 3) in mm to pixels (..., 2)."""
    X = np.asarray(point3d, dtype=np.float64)
    if X.shape[-1] != 3:
        raise ShapeError(f"expected (..., 3) points, got {X.shape}")
    xc = X @ camera.R.T + camera.t
    z = xc[..., 2]
    if check and np.any(z <= MIN_DEPTH):
        raise BehindCameraError(f"point at depth {float(np.min(z)):.3g} mm is behind the camera")
    uvw = xc @ camera.K.T
    return uvw[..., :2] / uvw[..., 2:3]


def project_tensor(P, X):
    """Differentiable projection of (..., 3) tensor points with a 3x4 matrix.

    Returns (uv tensor (..., 2), depth array (...,)) where depth is the third
    homogeneous coordinate (proportional to camera-frame depth, positive in
    front of the camera for K with unit last row).
    """
    P = np.asarray(P, dtype=np.float64)
    X = ad.as_tensor(X)
    h = ad.add(ad.matmul(X, P[:, :3].T), P[:, 3])
    w = h[..., 2:3]
    uv = ad.div(h[..., 0:2], w)
    return uv, w.data[..., 0]


def _as_P(rig_or_P):
    if isinstance(rig_or_P, Rig):
        return rig_or_P.P
    if isinstance(rig_or_P, (list, tuple)) and rig_or_P and isinstance(rig_or_P[0], Camera):
        return np.stack([c.P for c in rig_or_P])
    return np.asarray(rig_or_P, dtype=np.float64)


def conditioning(P):
    """World similarity (centre, scale) that conditions a DLT system.

    The world is re-centred on the centroid of the camera centres and scaled
    by their mean distance to it, so homogeneous coordinates of points in the
    working volume are O(1).  Without it, inconsistent low-weight views can
    make points near infinity algebraically optimal.
    """
    P = np.asarray(P, dtype=np.float64)
    centers = np.stack([-np.linalg.solve(p[:, :3], p[:, 3]) for p in P])
    c0 = centers.mean(axis=0)
    scale = float(np.linalg.norm(centers - c0, axis=1).mean()) or 1.0
    T = np.eye(4)
    T[:3, :3] *= scale
    T[:3, 3] = c0
    return P @ T, c0, scale


def _dlt(P, pts, w):
    """Conditioned batched DLT.  The conditioning uses only the cameras with
    positive weight, grouped by support pattern, so a zero-confidence view
    has no influence at all."""
    support = w > 0
    patterns, inverse = np.unique(support, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    X = np.full((pts.shape[0], 3), np.nan)
    status = np.zeros(pts.shape[0], dtype=np.int64)
    for i, pat in enumerate(patterns):
        rows = np.flatnonzero(inverse == i)
        if pat.sum() < 2:
            status[rows] = kernels.DLT_FEW_VIEWS
            continue
        Pc, c0, scale = conditioning(P[pat])
        Xi, si = kernels.weighted_dlt(Pc, pts[rows][:, pat], w[rows][:, pat])
        X[rows] = Xi * scale + c0
        status[rows] = si
    return X, status


def triangulate_dlt(observations, confidences, rig):
    """Confidence-weighted DLT for one 3D point.

    observations: (V, 2) px; confidences: (V,) in [0, 1]; rig: Rig, list of
    cameras or (V, 3, 4) projection matrices.  Each view contributes the two
    standard DLT rows scaled by its confidence; the solution is the right
    singular vector of the smallest singular value (in conditioned world
    coordinates, see :func:`conditioning`), dehomogenised to mm.
    """
    P = _as_P(rig)
    obs = np.asarray(observations, dtype=np.float64)
    conf = np.asarray(confidences, dtype=np.float64)
    if obs.shape != (P.shape[0], 2) or conf.shape != (P.shape[0],):
        raise ShapeError(f"observations {obs.shape} / confidences {conf.shape} do not match {P.shape[0]} views")
    X, status = _dlt(P, obs[None], conf[None])
    if status[0] == kernels.DLT_FEW_VIEWS:
        raise InsufficientViewsError("need at least 2 views with positive confidence")
    if status[0] == kernels.DLT_DEGENERATE:
        raise DegenerateGeometryError("weighted DLT system is rank deficient")
    return X[0]


def triangulate_batch(points2d, confidences, rig):
    """Vectorised DLT: points2d (..., V, 2), confidences (..., V).

    Returns (X (..., 3), status (...)); failed points are NaN with nonzero status.
    """
    P = _as_P(rig)
    pts = np.asarray(points2d, dtype=np.float64)
    conf = np.asarray(confidences, dtype=np.float64)
    lead = pts.shape[:-2]
    X, status = _dlt(P, pts.reshape(-1, P.shape[0], 2), conf.reshape(-1, P.shape[0]))
    return X.reshape(*lead, 3), status.reshape(lead)


def similarity_transform(pred, gt):
    """Scale, rotation and translation mapping ``pred`` onto ``gt`` (least squares)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ShapeError(f"procrustes expects matching (k, 3) arrays, got {pred.shape}, {gt.shape}")
    if pred.shape[0] < 3:
        raise ShapeError("procrustes needs at least 3 points")
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    p0, g0 = pred - mu_p, gt - mu_g
    var_p = (p0 ** 2).sum()
    if (g0 ** 2).sum() <= 1e-24 or var_p <= 1e-24:
        raise DegenerateGeometryError("procrustes: point set has zero variance")
    U, S, Vt = np.linalg.svd(g0.T @ p0)
    d = np.ones(3)
    if np.linalg.det(U @ Vt) < 0:
        d[-1] = -1.0
    R = U @ np.diag(d) @ Vt
    s = (S * d).sum() / var_p
    t = mu_g - s * R @ mu_p
    return s, R, t


def procrustes_align(pred, gt):
    """Similarity-align ``pred`` to ``gt``; returns (aligned, per-joint distance)."""
    s, R, t = similarity_transform(pred, gt)
    aligned = s * np.asarray(pred, dtype=np.float64) @ R.T + t
    return aligned, np.linalg.norm(aligned - np.asarray(gt, dtype=np.float64), axis=1)


def kabsch(src, dst):
    """Rotation R (no scale) minimising ||R src_c - dst_c|| over centred sets."""
    a = np.asarray(src, dtype=np.float64)
    b = np.asarray(dst, dtype=np.float64)
    a = a - a.mean(0)
    b = b - b.mean(0)
    U, _, Vt = np.linalg.svd(b.T @ a)
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ np.diag([1.0, 1.0, d]) @ Vt
