"""Hot numeric loops.

Each kernel has a numba implementation (``*_nb``) and a vectorised numpy one
(``*_np``).  The public name binds to the numba version unless
``HANDLIFT_NO_NUMBA=1`` is set (see :mod:`handlift._accel`).  Both paths agree
to floating-point round-off; tests compare them directly.
"""
from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

# status codes for batched triangulation
DLT_OK = 0
DLT_FEW_VIEWS = 1
DLT_DEGENERATE = 2

RANK_TOL = 1e-12


# ------------------------------------------------------------ weighted DLT

def weighted_dlt_np(P, pts, w):
    """Batched confidence-weighted DLT.

    P: (V, 3, 4) projection matrices; pts: (N, V, 2) pixels; w: (N, V) weights.
    Returns (X (N, 3), status (N,) int64).  Failed rows hold NaN.
    """
    P = np.asarray(P, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, nv = w.shape
    u = pts[..., 0:1]
    v = pts[..., 1:2]
    r1 = u * P[None, :, 2, :] - P[None, :, 0, :]
    r2 = v * P[None, :, 2, :] - P[None, :, 1, :]
    A = np.stack([r1 * w[..., None], r2 * w[..., None]], axis=2).reshape(n, 2 * nv, 4)
    status = np.zeros(n, dtype=np.int64)
    status[(w > 0).sum(axis=1) < 2] = DLT_FEW_VIEWS
    X = np.full((n, 3), np.nan)
    if n == 0:
        return X, status
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    rank_bad = s[:, 2] <= RANK_TOL * s[:, 0]
    h = vt[:, -1, :]
    bad_h = np.abs(h[:, 3]) <= RANK_TOL * np.abs(h).max(axis=1)
    status[(status == DLT_OK) & (rank_bad | bad_h)] = DLT_DEGENERATE
    ok = status == DLT_OK
    X[ok] = h[ok, :3] / h[ok, 3:4]
    return X, status


@njit
def _jacobi_svd(A, V, s):
    """One-sided Jacobi SVD of A (m, 4) in place: on return the columns of A
    are orthogonal, s holds their norms and A_in = A @ V.T."""
    m, n = A.shape
    for i in range(n):
        for j in range(n):
            V[i, j] = 1.0 if i == j else 0.0
    for _ in range(60):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += A[i, p] * A[i, p]
                    beta += A[i, q] * A[i, q]
                    gamma += A[i, p] * A[i, q]
                if abs(gamma) <= 1e-15 * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                tt = 1.0 / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta < 0:
                    tt = -tt
                c = 1.0 / np.sqrt(1.0 + tt * tt)
                sn = c * tt
                for i in range(m):
                    ap = A[i, p]
                    A[i, p] = c * ap - sn * A[i, q]
                    A[i, q] = sn * ap + c * A[i, q]
                for i in range(n):
                    vp = V[i, p]
                    V[i, p] = c * vp - sn * V[i, q]
                    V[i, q] = sn * vp + c * V[i, q]
        if not rotated:
            break
    for j in range(n):
        acc = 0.0
        for i in range(m):
            acc += A[i, j] * A[i, j]
        s[j] = np.sqrt(acc)


@njit
def _weighted_dlt_nb(P, pts, w):
    n, nv = w.shape
    X = np.full((n, 3), np.nan)
    status = np.zeros(n, dtype=np.int64)
    A = np.empty((2 * nv, 4))
    V = np.empty((4, 4))
    s = np.empty(4)
    for i in range(n):
        npos = 0
        for j in range(nv):
            if w[i, j] > 0:
                npos += 1
            for c in range(4):
                A[2 * j, c] = w[i, j] * (pts[i, j, 0] * P[j, 2, c] - P[j, 0, c])
                A[2 * j + 1, c] = w[i, j] * (pts[i, j, 1] * P[j, 2, c] - P[j, 1, c])
        if npos < 2:
            status[i] = 1
            continue
        _jacobi_svd(A, V, s)
        order = np.argsort(-s)
        h = V[:, order[3]]
        hmax = np.max(np.abs(h))
        if s[order[2]] <= 1e-12 * s[order[0]] or abs(h[3]) <= 1e-12 * hmax:
            status[i] = 2
            continue
        for c in range(3):
            X[i, c] = h[c] / h[3]
    return X, status


def weighted_dlt_nb(P, pts, w):
    P = np.ascontiguousarray(P, dtype=np.float64)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    return _weighted_dlt_nb(P, pts, w)


# ------------------------------------------------------------ k nearest neighbours

def knn_np(queries, points, k, valid=None):
    """Indices of the ``k`` nearest ``points`` for each query, batched.

    queries: (B, Q, 3); points: (B, P, 3); valid: optional (B, P) bool mask.
    Ties go to the lower point index.  Returns (B, Q, k) int64.
    """
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    d = ((q[:, :, None, :] - p[:, None, :, :]) ** 2).sum(-1)
    if valid is not None:
        d = np.where(np.asarray(valid)[:, None, :], d, np.inf)
    return np.argsort(d, axis=-1, kind="stable")[..., :k].astype(np.int64)


@njit
def _knn_nb(q, p, k, valid):
    # insertion into a sorted top-k list; equal distances keep index order
    B, Q, _ = q.shape
    P = p.shape[1]
    out = np.empty((B, Q, k), dtype=np.int64)
    best = np.empty(k)
    for b in range(B):
        for i in range(Q):
            n = 0
            for j in range(P):
                if valid[b, j]:
                    dx = q[b, i, 0] - p[b, j, 0]
                    dy = q[b, i, 1] - p[b, j, 1]
                    dz = q[b, i, 2] - p[b, j, 2]
                    d = dx * dx + dy * dy + dz * dz
                else:
                    d = np.inf
                if n == k and not d < best[k - 1]:
                    continue
                pos = n if n < k else k - 1
                while pos > 0 and d < best[pos - 1]:
                    if pos < k:
                        best[pos] = best[pos - 1]
                        out[b, i, pos] = out[b, i, pos - 1]
                    pos -= 1
                best[pos] = d
                out[b, i, pos] = j
                if n < k:
                    n += 1
    return out


def knn_nb(queries, points, k, valid=None):
    q = np.ascontiguousarray(queries, dtype=np.float64)
    p = np.ascontiguousarray(points, dtype=np.float64)
    if valid is None:
        valid = np.ones(p.shape[:2], dtype=np.bool_)
    return _knn_nb(q, p, int(k), np.ascontiguousarray(valid, dtype=np.bool_))


# ------------------------------------------------------------ Gaussian heatmaps

def render_gaussians_np(centers, sigmas, peaks, H, W):
    """Unnormalised Gaussian bumps on an H x W grid of cell indices.

    centers: (N, 2) in cell units (u along W, v along H); sigmas, peaks: (N,).
    Returns (N, H, W).
    """
    c = np.asarray(centers, dtype=np.float64)
    s = np.asarray(sigmas, dtype=np.float64)[:, None, None]
    pk = np.asarray(peaks, dtype=np.float64)[:, None, None]
    uu = np.arange(W, dtype=np.float64)[None, None, :]
    vv = np.arange(H, dtype=np.float64)[None, :, None]
    du = uu - c[:, 0, None, None]
    dv = vv - c[:, 1, None, None]
    return pk * np.exp(-(du * du + dv * dv) / (2.0 * s * s))


@njit
def _render_gaussians_nb(c, s, pk, H, W):
    n = c.shape[0]
    out = np.empty((n, H, W))
    for i in range(n):
        inv = 1.0 / (2.0 * s[i] * s[i])
        for y in range(H):
            dv = y - c[i, 1]
            for x in range(W):
                du = x - c[i, 0]
                out[i, y, x] = pk[i] * np.exp(-(du * du + dv * dv) * inv)
    return out


def render_gaussians_nb(centers, sigmas, peaks, H, W):
    return _render_gaussians_nb(np.ascontiguousarray(centers, dtype=np.float64),
                                np.ascontiguousarray(sigmas, dtype=np.float64),
                                np.ascontiguousarray(peaks, dtype=np.float64), int(H), int(W))


# ------------------------------------------------------------ PCK counting

def pck_counts_np(errors, thresholds):
    """Number of errors ``<=`` each threshold."""
    e = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    return np.searchsorted(e, np.asarray(thresholds, dtype=np.float64), side="right").astype(np.int64)


@njit
def _pck_counts_nb(e, th):
    out = np.zeros(th.shape[0], dtype=np.int64)
    for i in range(e.shape[0]):
        for j in range(th.shape[0]):
            if e[i] <= th[j]:
                out[j] += 1
    return out


def pck_counts_nb(errors, thresholds):
    return _pck_counts_nb(np.ascontiguousarray(np.ravel(errors), dtype=np.float64),
                          np.ascontiguousarray(thresholds, dtype=np.float64))


# ------------------------------------------------------------ bilinear sampling

def bilinear_sample_np(maps, uv):
    """Sample (..., C, H, W) maps at (..., N, 2) cell coordinates -> (..., N, C).

    Outside the grid the value is zero.
    """
    H, W = maps.shape[-2:]
    u, v = uv[..., 0], uv[..., 1]
    u0 = np.floor(u)
    v0 = np.floor(v)
    du, dv = u - u0, v - v0
    lead = maps.shape[:-3]
    C = maps.shape[-3]
    flat = maps.reshape(*lead, C, H * W)
    out = 0.0
    for ou, ov, wgt in ((0, 0, (1 - du) * (1 - dv)), (1, 0, du * (1 - dv)),
                        (0, 1, (1 - du) * dv), (1, 1, du * dv)):
        uu = (u0 + ou).astype(np.int64)
        vv = (v0 + ov).astype(np.int64)
        inside = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
        idx = np.where(inside, vv * W + uu, 0)
        vals = np.take_along_axis(flat, np.broadcast_to(idx[..., None, :], (*idx.shape[:-1], C, idx.shape[-1])), -1)
        out = out + np.moveaxis(vals, -2, -1) * (wgt * inside)[..., None]
    return out


@njit
def _bilinear_nb(maps, uv):
    L, C, H, W = maps.shape
    N = uv.shape[1]
    out = np.zeros((L, N, C))
    for l in range(L):
        for n in range(N):
            u = uv[l, n, 0]
            v = uv[l, n, 1]
            u0 = np.floor(u)
            v0 = np.floor(v)
            du = u - u0
            dv = v - v0
            iu = int(u0) if abs(u0) < 1e9 else -2
            iv = int(v0) if abs(v0) < 1e9 else -2
            for ov in range(2):
                yy = iv + ov
                if yy < 0 or yy >= H:
                    continue
                wv = dv if ov else 1.0 - dv
                for ou in range(2):
                    xx = iu + ou
                    if xx < 0 or xx >= W:
                        continue
                    wgt = wv * (du if ou else 1.0 - du)
                    for c in range(C):
                        out[l, n, c] += wgt * maps[l, c, yy, xx]
    return out


def bilinear_sample_nb(maps, uv):
    maps = np.asarray(maps, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    lead = maps.shape[:-3]
    C, H, W = maps.shape[-3:]
    N = uv.shape[-2]
    uv = np.broadcast_to(uv, (*lead, N, 2))
    out = _bilinear_nb(np.ascontiguousarray(maps.reshape(-1, C, H, W)),
                       np.ascontiguousarray(uv.reshape(-1, N, 2)))
    return out.reshape(*lead, N, C)


# ------------------------------------------------------------ local heatmap gate
#
# gate = (1 + e^-h) * sigmoid(corr3x3(m; w) + b + h), the refiner's per-cell
# multiplier.  Zero padding outside the grid; w holds the 9 taps row-major.

def _taps_np(maps):
    H, W = maps.shape[1:]
    p = np.pad(maps, ((0, 0), (1, 1), (1, 1)))
    return np.stack([p[:, dv:dv + H, du:du + W] for dv in range(3) for du in range(3)], axis=-1)


def local_gate_np(maps, w, b, headroom):
    """maps (N, H, W); w (9,); b (1,); returns gate (N, H, W)."""
    z = _taps_np(maps) @ w + b[0] + headroom
    return (1.0 + np.exp(-headroom)) / (1.0 + np.exp(-z))


def local_gate_grad_np(maps, w, b, headroom, g_gate):
    """Parameter gradients given dL/dgate.  Returns (gw (9,), gb (1,))."""
    S = _taps_np(maps)
    amp = 1.0 + np.exp(-headroom)
    gate = amp / (1.0 + np.exp(-(S @ w + b[0] + headroom)))
    gz = g_gate * gate * (1.0 - gate / amp)
    return S.reshape(-1, 9).T @ gz.reshape(-1), np.array([gz.sum()])


@njit
def _local_gate_nb(maps, w, b, headroom, g_gate, want_grad):
    n, H, W = maps.shape
    amp = 1.0 + np.exp(-headroom)
    gate = np.empty((n, H, W))
    gw = np.zeros(9)
    gb = np.zeros(1)
    pad = np.zeros((H + 2, W + 2))
    z = np.empty(W)
    for i in range(n):
        pad[1:H + 1, 1:W + 1] = maps[i]
        for y in range(H):
            for x in range(W):
                z[x] = b[0] + headroom
            for dv in range(3):
                for du in range(3):
                    wt = w[3 * dv + du]
                    for x in range(W):
                        z[x] += wt * pad[y + dv, x + du]
            for x in range(W):
                gate[i, y, x] = amp / (1.0 + np.exp(-z[x]))
            if want_grad:
                for x in range(W):
                    g = gate[i, y, x]
                    z[x] = g_gate[i, y, x] * g * (1.0 - g / amp)
                    gb[0] += z[x]
                for dv in range(3):
                    for du in range(3):
                        acc = 0.0
                        for x in range(W):
                            acc += z[x] * pad[y + dv, x + du]
                        gw[3 * dv + du] += acc
    return gate, gw, gb


def _gate_args(maps, w, b):
    return (np.ascontiguousarray(maps, dtype=np.float64), np.ascontiguousarray(np.ravel(w), dtype=np.float64),
            np.ascontiguousarray(np.ravel(b), dtype=np.float64))


def local_gate_nb(maps, w, b, headroom):
    return _local_gate_nb(*_gate_args(maps, w, b), float(headroom), np.zeros((1, 1, 1)), False)[0]


def local_gate_grad_nb(maps, w, b, headroom, g_gate):
    g = np.ascontiguousarray(g_gate, dtype=np.float64)
    return _local_gate_nb(*_gate_args(maps, w, b), float(headroom), g, True)[1:]


if USE_NUMBA:
    weighted_dlt = weighted_dlt_nb
    knn = knn_nb
    render_gaussians = render_gaussians_nb
    pck_counts = pck_counts_nb
    local_gate = local_gate_nb
    local_gate_grad = local_gate_grad_nb
    bilinear_sample = bilinear_sample_nb
else:
    weighted_dlt = weighted_dlt_np
    knn = knn_np
    render_gaussians = render_gaussians_np
    pck_counts = pck_counts_np
    local_gate = local_gate_np
    local_gate_grad = local_gate_grad_np
    bilinear_sample = bilinear_sample_np

BACKEND = "numba" if USE_NUMBA else "numpy"
