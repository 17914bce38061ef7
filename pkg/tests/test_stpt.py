import logging

import numpy as np
import pytest

from handlift import autodiff as ad
from handlift.camera import Camera, project, triangulate_batch
from handlift.heatmap import render_heatmap
from handlift.skeleton import loss_proj2d
from handlift.stpt import (PointFeatureEncoder, Stpt, StptBlock, bilinear_sample,
                           lift_hypotheses, stpt_forward)
from handlift.synthetic import generate_dataset, generate_rig, volume_corners


def randomize(store, rng, scale=0.3, skip_ffn=False):
    for name, p in store.params.items():
        if skip_ffn and ".ffn." in name:
            continue
        p.data[...] = rng.normal(scale=scale, size=p.data.shape)


def _mlp(m, x):
    h = np.tanh(x @ m.l1.W.data + (m.l1.b.data if m.l1.b is not None else 0))
    return h @ m.l2.W.data + (m.l2.b.data if m.l2.b is not None else 0)


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


# ------------------------------------------------------------ lifting

def _views(rig, X):
    return np.stack([project(c, X) for c in rig.cameras])


def test_query_is_dlt_of_key_hypotheses(rig8, rng):
    X = rng.uniform(-100, 100, size=(21, 3))
    key = _views(rig8, X)                                  # (V, k, 2)
    samples = key[:, None] + rng.normal(size=(8, 3, 21, 2))
    conf = rng.uniform(0.2, 1, size=(8, 21))
    cloud = lift_hypotheses(key, samples, conf, rig8.P)
    assert np.abs(cloud.query - X).max() < 1e-6
    assert cloud.anchors.shape == (3 * 21, 3) and cloud.dropped == 0
    # index-matched: anchor r of joint j uses sample r in every view
    ref, _ = triangulate_batch(np.moveaxis(samples[:, 1], 0, 1), conf.T, rig8.P)
    assert np.allclose(cloud.anchors[21:42], ref, atol=1e-9)


def test_single_sample_equal_to_key_gives_coincident_clouds(rig8, rng):
    key = _views(rig8, rng.uniform(-100, 100, size=(21, 3))) + rng.normal(size=(8, 21, 2))
    conf = rng.uniform(0.2, 1, size=(8, 21))
    cloud = lift_hypotheses(key, key[:, None], conf, rig8.P)
    assert np.allclose(cloud.anchors, cloud.query, atol=1e-12)


def test_failed_anchor_dropped_and_counted(rig8, rng):
    key = _views(rig8, rng.uniform(-100, 100, size=(21, 3)))[:2]
    samples = key[:, None] + rng.normal(size=(2, 3, 21, 2))
    conf = np.ones((2, 21))
    conf[1, 5] = 0.0  # joint 5 seen by one view only
    cloud = lift_hypotheses(key, samples, conf, rig8.P[:2])
    assert cloud.dropped == 3 and cloud.query_failed == 1
    idx = np.arange(3) * 21 + 5
    assert not cloud.anchor_valid[idx].any() and cloud.anchor_valid.sum() == 60
    assert np.all(np.isfinite(cloud.query))


# ------------------------------------------------------------ point features

@pytest.fixture
def encoder(rng):
    store = ad.ParamStore()
    return store, PointFeatureEncoder(store, rng, d_point=16)


def test_identical_views_identical_blocks(encoder, rng):
    _, enc = encoder
    cam = generate_rig(2, seed=0).cameras[0]
    P = np.stack([cam.P, cam.P])
    pts = rng.uniform(-100, 100, size=(1, 30, 3))
    dec = np.repeat(rng.uniform(0, 255, size=(1, 1, 21, 2)), 2, axis=1)
    maps = np.repeat(render_heatmap(dec[:, :1])[0], 2, axis=1)
    conf = np.ones((1, 2, 21))
    e, front = enc.view_inputs(pts, maps, dec, conf, P[None])
    assert np.array_equal(e[:, 0], e[:, 1]) and front.all()


def test_features_finite_at_volume_corners(encoder, rig8, rng):
    _, enc = encoder
    corners = volume_corners()[None]
    dec = rng.uniform(0, 255, size=(1, 8, 21, 2))
    maps = render_heatmap(dec)[0]
    out = enc(corners, maps, dec, np.ones((1, 8, 21)), rig8.P[None])
    assert out.shape == (1, 8, 16)
    assert np.all(np.isfinite(out.data))


def test_point_behind_all_cameras(encoder, caplog):
    _, enc = encoder
    cam = Camera.from_params(200, 200, 128, 128, np.eye(3), [0.0, 0.0, 600.0])
    P = cam.P[None]
    dec = np.full((1, 1, 21, 2), 128.0)
    maps = render_heatmap(dec)[0]
    pts = np.array([[[0.0, 0.0, -700.0], [0.0, 0.0, 0.0]]])
    e, front = enc.view_inputs(pts, maps, dec, np.ones((1, 1, 21)), P)
    assert front.tolist() == [[[False, True]]]
    assert not e[0, 0, 0].any()
    with caplog.at_level(logging.INFO):
        out = enc(pts, maps, dec, np.ones((1, 1, 21)), P)
    assert "behind every camera" in caplog.text
    assert np.all(np.isfinite(out.data))


def test_bilinear_sample_matches_manual(rng):
    maps = rng.uniform(size=(2, 5, 6))
    uv = np.array([[1.25, 2.5], [4.0, 0.0], [-3.0, 1.0]])
    out = bilinear_sample(maps, uv)
    m = maps[1]
    ref = (0.75 * 0.5 * m[2, 1] + 0.25 * 0.5 * m[2, 2] + 0.75 * 0.5 * m[3, 1] + 0.25 * 0.5 * m[3, 2])
    assert abs(out[0, 1] - ref) < 1e-14
    assert abs(out[1, 0] - maps[0, 0, 4]) < 1e-14
    assert np.all(out[2] == 0)


# ------------------------------------------------------------ attention

@pytest.fixture
def block(rng):
    store = ad.ParamStore()
    b = StptBlock(store, rng, "b", d=4, d_pos=5, k_nn=8)
    randomize(store, rng)
    return store, b


def test_spatial_self_only(block, rng):
    _, b = block
    b.k_nn = 1
    f = rng.normal(size=(2, 5, 4))
    c = rng.normal(size=(2, 5, 3)) * 30
    out = b.spatial_attention(f, c).data
    delta0 = _mlp(b.sp_pos, np.zeros(3))
    assert np.allclose(out, f + f @ b.sp["v"].W.data + delta0, atol=1e-12)
    assert np.all(b.attn["spatial"] == 1.0)


def test_spatial_coincident_uniform(block, rng):
    store, b = block
    b.sp["k"].W.data[...] = 0.0
    f = rng.normal(size=(1, 10, 4))
    b.spatial_attention(f, np.ones((1, 10, 3)))
    assert np.allclose(b.attn["spatial"], 1.0 / 8.0, atol=1e-15)


def test_spatial_four_point_hand_oracle(block, rng):
    _, b = block
    b.k_nn = 3
    f = rng.normal(size=(1, 4, 4))
    c = np.array([[[0.0, 0, 0], [10.0, 0, 0], [0.0, 25, 0], [40.0, 40, 40]]])
    out = b.spatial_attention(f, c).data[0]
    q, k, v = (f[0] @ b.sp[n].W.data for n in "qkv")
    for i in range(4):
        d = np.linalg.norm(c[0] - c[0, i], axis=1)
        nb = np.argsort(d, kind="stable")[:3]
        delta = np.stack([_mlp(b.sp_pos, (c[0, i] - c[0, j]) / b.local_scale) for j in nb])
        w = _softmax(np.array([q[i] @ (k[j] + dl) for j, dl in zip(nb, delta)]) / 2.0)
        ref = f[0, i] + sum(wj * (v[j] + dl) for wj, j, dl in zip(w, nb, delta))
        assert np.abs(out[i] - ref).max() < 1e-10


def test_temporal_single_frame(block, rng):
    _, b = block
    f = rng.normal(size=(2, 1, 3, 4))
    c = rng.normal(size=(2, 1, 3, 3))
    out = b.temporal_attention(f, c).data
    x = f + b.frame_emb.data[0]
    delta0 = _mlp(b.tp_pos, np.zeros(3))
    assert np.allclose(out, f + x @ b.tp["v"].W.data + delta0, atol=1e-12)
    assert np.all(b.attn["temporal"] == 1.0)


def test_temporal_identical_frames_symmetric(block, rng):
    _, b = block
    b.frame_emb.data[...] = 0.0
    f = np.repeat(rng.normal(size=(1, 1, 3, 4)), 5, axis=1)
    c = np.repeat(rng.normal(size=(1, 1, 3, 3)), 5, axis=1)
    out = b.temporal_attention(f, c).data
    assert np.abs(out - out[:, :1]).max() < 1e-14
    out2 = b.temporal_attention(f).data
    assert np.abs(out2 - out2[:, :1]).max() < 1e-14


def test_temporal_three_frame_hand_oracle(block, rng):
    _, b = block
    f = rng.normal(size=(1, 3, 2, 4))
    c = rng.normal(size=(1, 3, 2, 3)) * 20
    out = b.temporal_attention(f, c).data[0]
    x = f[0] + b.frame_emb.data[:3, None]
    for j in range(2):
        q, k, v = (x[:, j] @ b.tp[n].W.data for n in "qkv")
        for t in range(3):
            delta = np.stack([_mlp(b.tp_pos, (c[0, t, j] - c[0, s, j]) / b.local_scale) for s in range(3)])
            w = _softmax(np.array([q[t] @ (k[s] + delta[s]) for s in range(3)]) / 2.0)
            ref = f[0, t, j] + sum(w[s] * (v[s] + delta[s]) for s in range(3))
            assert np.abs(out[t, j] - ref).max() < 1e-10


def test_cross_zero_ffn_identity_and_rows(rng):
    store = ad.ParamStore()
    b = StptBlock(store, rng, "b", d=4, d_pos=5)
    randomize(store, rng, skip_ffn=True)
    qf = rng.normal(size=(2, 21, 4))
    qc = rng.normal(size=(2, 21, 3)) * 50
    af = rng.normal(size=(2, 40, 4))
    ac = rng.normal(size=(2, 40, 3)) * 50
    coords, _ = b.cross_attention_refine(qf, qc, af, ac)
    assert np.array_equal(coords.data, qc)
    assert np.abs(b.attn["cross"].sum(-1) - 1).max() < 1e-12


def test_cross_empty_anchor_passthrough(block, rng, caplog):
    _, b = block
    qc = rng.normal(size=(1, 21, 3))
    with caplog.at_level(logging.WARNING):
        coords, _ = b.cross_attention_refine(rng.normal(size=(1, 21, 4)), qc, np.zeros((1, 0, 4)),
                                             np.zeros((1, 0, 3)))
    assert np.array_equal(coords.data, qc) and "empty anchor" in caplog.text


def test_cross_refinement_moves_toward_anchor_location():
    rng = np.random.default_rng(1)
    store = ad.ParamStore()
    b = StptBlock(store, rng, "b", d=8, d_pos=8)
    L = np.array([30.0, -20.0, 10.0])
    qc = rng.normal(size=(8, 21, 3)) * 15
    ac = np.broadcast_to(L, (8, 40, 3)).copy()
    qf = np.zeros((8, 21, 8))
    af = np.zeros((8, 40, 8))
    before = np.linalg.norm(qc - L, axis=-1).mean()
    opt = ad.Adam()
    for _ in range(150):
        with ad.Tape() as tape:
            c, _ = b.cross_attention_refine(qf, qc, af, ac)
            loss = ad.mean(ad.square(ad.sub(c, L)))
        tape.backward(loss)
        opt.step(store, 0.01)
    test_q = rng.normal(size=(4, 21, 3)) * 15
    c, _ = b.cross_attention_refine(np.zeros((4, 21, 8)), test_q, np.zeros((4, 40, 8)),
                                    np.broadcast_to(L, (4, 40, 3)))
    assert np.linalg.norm(c.data - L, axis=-1).mean() < np.linalg.norm(test_q - L, axis=-1).mean()
    assert before > 0


# ------------------------------------------------------------ full STPT

def _cloud_inputs(rng, B=2, T=3, A=48, d=8):
    return (rng.normal(size=(B, T, 21, d)), rng.normal(size=(B, T, 21, 3)) * 40,
            rng.normal(size=(B, T, A, d)), rng.normal(size=(B, T, A, 3)) * 40,
            np.ones((B, T, A), dtype=bool))


def test_stpt_zero_init_identity_and_anchor_immutability(rng):
    store = ad.ParamStore()
    s = Stpt(store, rng, n_blocks=4, d=8)
    randomize(store, rng, skip_ffn=True)
    qf, qc, af, ac, valid = _cloud_inputs(rng)
    ac_before = ac.tobytes()
    coords, feats = s(qf, qc, af, ac, valid)
    assert np.abs(coords.data - qc).max() <= 1e-12
    assert ac.tobytes() == ac_before
    assert coords.shape == (2, 3, 21, 3)


def test_stpt_forward_on_cloud(rng, small_dataset):
    from handlift.model import HandLifter
    m = HandLifter()
    ds = small_dataset
    s = ds.sequences[0]
    with ad.no_grad():
        fo = m.frame_stage(s.evidence2d[:5], s.evidence_conf[:5], ds.rig.P, rng)
    cloud = fo.cloud
    anchors = cloud.anchors.copy()
    cloud.query_feat = cloud.query_feat.reshape(1, 5, 21, -1)
    cloud.anchor_feat = cloud.anchor_feat.reshape(1, 5, -1, cloud.anchor_feat.shape[-1])
    q = cloud.query[None]
    cloud.query = q
    cloud.anchors = cloud.anchors[None]
    cloud.anchor_valid = cloud.anchor_valid[None]
    coords, _ = stpt_forward(m.stpt, cloud)
    assert np.abs(coords.data - q).max() <= 1e-12
    assert cloud.anchors[0].tobytes() == anchors.tobytes()


def test_stpt_translation_equivariance(rng):
    store = ad.ParamStore()
    s = Stpt(store, rng, n_blocks=2, d=8)
    randomize(store, rng)
    qf, qc, af, ac, valid = _cloud_inputs(rng)
    shift = np.array([120.0, -40.0, 33.0])
    a = s(qf, qc, af, ac, valid)[0].data
    b = s(qf, qc + shift, af, ac + shift, valid)[0].data
    assert np.abs(b - (a + shift)).max() < 1e-6


def test_stpt_pipeline_translation_equivariance(rng):
    """Translate rig and points together: refined outputs follow."""
    from handlift.model import HandLifter
    ds = generate_dataset(1, 5, seed=2, n_views=4)
    m = HandLifter()
    randomize(m.store, np.random.default_rng(3), scale=0.2)
    s = ds.sequences[0]
    shift = np.array([50.0, -20.0, 10.0])
    P = ds.rig.P
    T = np.eye(4)
    T[:3, 3] = -shift
    P2 = P @ T  # camera sees X + shift where it saw X
    res = []
    for PP, centre in ((P, np.zeros(3)), (P2, shift)):
        with ad.no_grad():
            fo = m.frame_stage(s.evidence2d, s.evidence_conf, PP, np.random.default_rng(0))
            cl = fo.cloud
            anchors = np.where(cl.anchor_valid[..., None], cl.anchors, centre)
            qf = m.encoder(cl.query, fo.maps.data, fo.decoded.data, fo.conf, PP, centre)
            af = m.encoder(anchors, fo.maps.data, fo.decoded.data, fo.conf, PP, centre)
            out = m.stpt(qf.data[None], cl.query[None], af.data[None], anchors[None], cl.anchor_valid[None])
        res.append(out[0].data)
    assert np.abs(res[1] - (res[0] + shift)).max() < 1e-6


def test_doubling_blocks_does_not_increase_projection_loss():
    rng = np.random.default_rng(0)
    rig = generate_rig(3, seed=1)
    P = rig.P
    store = ad.ParamStore()
    s = Stpt(store, rng, n_blocks=4, d=8)
    gt = rng.uniform(-60, 60, size=(2, 3, 21, 3))
    noisy = gt + rng.normal(scale=8, size=gt.shape)
    pseudo = np.stack([project(c, gt[:, 1]) for c in rig.cameras], axis=1)  # (2, V, k, 2)
    conf = np.ones(pseudo.shape[:-1])
    qf = np.zeros((2, 3, 21, 8))
    ac = noisy.copy()
    af = np.zeros((2, 3, 21, 8))
    valid = np.ones((2, 3, 21), dtype=bool)
    opt = ad.Adam()

    def loss(n_blocks):
        c, _ = s(qf, noisy, af, ac, valid, n_blocks=n_blocks)
        return loss_proj2d(c[:, 1], None, pseudo, conf, P)[0]
    for _ in range(60):
        with ad.Tape() as tape:
            ll = loss(2)
        tape.backward(ll)
        for name, p in store.params.items():  # train only the first two blocks
            if not name.startswith(("stpt.b0", "stpt.b1")):
                p.grad[...] = 0.0
        opt.step(store, 0.003)
    with ad.no_grad():
        l2 = float(loss(2).data)
        l4 = float(loss(4).data)
    assert l4 <= l2
