"""Synthetic camera rigs, hand motion, detector-style label corruption and
the dataset container format.

Container layout (all integers/floats little-endian)::

    HANDLIFT-DATASET\\n
    version=<int>\\n
    header_bytes=<int>\\n
    <JSON header>\\n
    <float64 blocks, per sequence, in the order of BLOCKS>
    <32-byte SHA-256 of everything above>
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, Rig, project, triangulate_dlt
from .skeleton import NUM_JOINTS, PARAM_DIM, SkeletonTemplate, forward_kinematics

log = logging.getLogger(__name__)

FRAME_SIZE = 256
WORKING_VOLUME = 400.0   # cube edge, mm, centred on the origin
CAMERA_RADIUS = 600.0
V_MAX = 20.0             # mm per frame

MAGIC = b"HANDLIFT-DATASET"
VERSION = 1


# ------------------------------------------------------------ rigs

def _look_at(center, target=np.zeros(3), up=np.array([0.0, 0.0, 1.0])):
    z = target - center
    z = z / np.linalg.norm(z)
    if abs(z @ up) > 0.95:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ center


def volume_corners(edge=WORKING_VOLUME):
    h = edge / 2.0
    return np.array([[sx, sy, sz] for sx in (-h, h) for sy in (-h, h) for sz in (-h, h)])


def generate_rig(V, radius=CAMERA_RADIUS, seed=0, frame=FRAME_SIZE, volume=WORKING_VOLUME):
    """V cameras on a sphere around the origin, jittered, all looking at it.

    The focal length is the largest (shared) value for which every corner of
    the working volume projects inside every frame, times 0.95.
    """
    if V < 2:
        raise ValueError("a rig needs at least 2 cameras")
    rng = np.random.default_rng(seed)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    centers = []
    for i in range(V):
        # spiral over the band z in [-0.45, 0.85] keeps views well separated
        zc = 0.85 - 1.3 * (i + 0.5) / V
        r = np.sqrt(1.0 - zc * zc)
        phi = golden * i + rng.uniform(0, 2 * np.pi) * (i == 0)
        d = np.array([r * np.cos(phi), r * np.sin(phi), zc]) + rng.normal(scale=0.05, size=3)
        centers.append(radius * d / np.linalg.norm(d))
    poses = []
    for c in centers:
        R, t = _look_at(c)
        roll = rng.normal(scale=0.05)
        Rz = np.array([[np.cos(roll), -np.sin(roll), 0], [np.sin(roll), np.cos(roll), 0], [0, 0, 1.0]])
        R = Rz @ R
        poses.append((R, -R @ c))
    corners = volume_corners(volume)
    half = frame / 2.0
    f = np.inf
    for R, t in poses:
        xc = corners @ R.T + t
        if np.any(xc[:, 2] <= 0):
            raise ValueError("working volume extends behind a camera; increase the radius")
        ratio = np.abs(xc[:, :2]).max(axis=1) / xc[:, 2]
        f = min(f, (half - 1.0) / ratio.max())
    f *= 0.95
    cx = cy = (frame - 1) / 2.0
    rig = Rig([Camera.from_params(f, f, cx, cy, R, t) for R, t in poses])
    for cam in rig.cameras:
        uv = project(cam, corners)
        assert np.all((uv >= 0) & (uv <= frame - 1)), "working volume not visible"
    X = np.array([10.0, -20.0, 30.0])
    obs = np.stack([project(c, X) for c in rig.cameras[:2]])
    assert np.allclose(triangulate_dlt(obs, np.ones(2), rig.cameras[:2]), X, atol=1e-6)
    return rig


# ------------------------------------------------------------ motion

@dataclass
class MotionSequence:
    params: np.ndarray     # (T, 86)
    joints3d: np.ndarray   # (T, 21, 3) mm
    seq_id: int = 0
    seed: int = 0

    @property
    def n_frames(self):
        return self.params.shape[0]


# bone indices (0-based over the 20 bones) of finger segments; bone b ends at joint b+1
_FINGERS = [(0, 1, 2, 3), (4, 5, 6, 7), (8, 9, 10, 11), (12, 13, 14, 15), (16, 17, 18, 19)]
_FLEX_MAX = np.array([0.0, 1.2, 1.4, 1.0])  # rad, palm bone then MCP, PIP, DIP


def _smooth_signal(rng, n, n_frames, rate):
    """Sum of 3 random sinusoids per channel; values roughly in [-1, 1]."""
    t = np.arange(n_frames)[:, None]
    out = np.zeros((n_frames, n))
    for _ in range(3):
        freq = rng.uniform(0.3, 1.0, size=n) * rate
        phase = rng.uniform(0, 2 * np.pi, size=n)
        out += np.sin(freq * t + phase) / 3.0
    return out


def _random_rotation(rng):
    from scipy.spatial.transform import Rotation
    return Rotation.random(random_state=rng).as_rotvec()


def generate_motion(template, n_frames, seed=0, seq_id=0, rate=0.12, v_max=V_MAX,
                    volume=WORKING_VOLUME):
    """Smooth articulated motion; gt joints come from forward_kinematics."""
    from scipy.spatial.transform import Rotation
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    for _attempt in range(50):
        base = Rotation.from_rotvec(_random_rotation(rng))
        sway = _smooth_signal(rng, 3, n_frames, rate) * 0.35
        curl = 0.5 + 0.5 * _smooth_signal(rng, 5, n_frames, rate)       # in ~[0, 1]
        spread = _smooth_signal(rng, 5, n_frames, rate) * 0.15
        center = _smooth_signal(rng, 3, n_frames, rate) * 50.0
        if n_frames == 1:
            sway[:] = sway[0]
        params = np.zeros((n_frames, PARAM_DIM))
        params[:, 66:86] = 1.0
        rest = template.rest_pose()
        mid = rest.mean(axis=0)
        for f in range(n_frames):
            g = Rotation.from_rotvec(sway[f]) * base
            rots = np.zeros((20, 3))
            for fi, bones in enumerate(_FINGERS):
                for seg, b in enumerate(bones):
                    ang = -curl[f, fi] * _FLEX_MAX[seg]
                    if fi == 0:
                        # thumb flexes about a tilted axis
                        axis = np.array([0.6, -0.3, 0.75])
                        rots[b] = axis / np.linalg.norm(axis) * ang * 0.6
                    else:
                        rots[b, 0] = ang
                        if seg == 1:
                            rots[b, 2] = spread[f, fi]
            params[f, 3:6] = g.as_rotvec()
            params[f, 6:66] = rots.ravel()
            params[f, 0:3] = center[f] - g.apply(mid)
        joints = forward_kinematics(template, params)
        # pin the articulated hand's centroid to the smooth centre path
        shift = center - joints.mean(axis=1)
        params[:, 0:3] += shift
        joints = joints + shift[:, None, :]
        disp = np.linalg.norm(np.diff(joints, axis=0), axis=-1) if n_frames > 1 else np.zeros(1)
        inside = np.all(np.abs(joints) <= volume / 2.0)
        if disp.max() <= v_max and inside:
            return MotionSequence(params, joints, seq_id, seed)
        rate *= 0.8
    raise RuntimeError("could not generate a motion within the velocity/volume limits")


# ------------------------------------------------------------ corruption

@dataclass(frozen=True)
class CorruptionProfile:
    name: str = "custom"
    sigma: float = 0.0             # px, Gaussian noise std per coordinate
    outlier_prob: float = 0.0
    outlier_mag: float = 0.0       # px, half-width of the uniform outlier box
    occlusion_prob: float = 0.0    # per view-joint
    occlusion_inflation: float = 0.0   # noise std multiplier increment when occluded
    occlusion_deflation: float = 0.0   # confidence drop when occluded
    conf_tau: float = 10.0         # px, confidence decay length
    conf_noise: float = 0.0
    conf_floor: float = 0.05
    flatten: float = 1.0           # heatmap widening for low confidence

    def __post_init__(self):
        for p in ("outlier_prob", "occlusion_prob"):
            if not 0.0 <= getattr(self, p) <= 1.0:
                raise ValueError(f"{p} must be in [0, 1]")
        for s in ("sigma", "outlier_mag", "occlusion_inflation", "occlusion_deflation",
                  "conf_noise", "flatten"):
            if getattr(self, s) < 0:
                raise ValueError(f"{s} must be >= 0")
        if self.conf_tau <= 0 or not 0 < self.conf_floor <= 1:
            raise ValueError("conf_tau must be > 0 and conf_floor in (0, 1]")

    def to_dict(self):
        return asdict(self)


PROFILES = {
    "gt": CorruptionProfile("gt"),
    # emulates a strong, occlusion-robust detector
    "detector-strong": CorruptionProfile("detector-strong", sigma=1.5, outlier_prob=0.02,
                                         outlier_mag=30.0, occlusion_prob=0.10,
                                         occlusion_inflation=1.0, occlusion_deflation=0.2,
                                         conf_tau=10.0, conf_noise=0.05),
    # emulates a weak detector: noisier, more outliers and occlusions
    "detector-weak": CorruptionProfile("detector-weak", sigma=3.0, outlier_prob=0.08,
                                       outlier_mag=60.0, occlusion_prob=0.20,
                                       occlusion_inflation=2.0, occlusion_deflation=0.3,
                                       conf_tau=10.0, conf_noise=0.08),
}

NOISE_FIELDS = ("sigma", "outlier_prob", "outlier_mag", "occlusion_prob", "occlusion_inflation",
                "occlusion_deflation", "conf_noise")


def get_profile(name_or_profile):
    if isinstance(name_or_profile, CorruptionProfile):
        return name_or_profile
    try:
        return PROFILES[name_or_profile]
    except KeyError:
        raise ValueError(f"unknown corruption profile {name_or_profile!r}; "
                         f"choose from {sorted(PROFILES)}") from None


def draw_occlusion(shape, profile, seed):
    rng = np.random.default_rng(seed)
    return rng.random(shape) < get_profile(profile).occlusion_prob


def corrupt(gt2d, profile, seed, occlusion=None, frame=FRAME_SIZE):
    """Detector-style corruption of (..., 2) pixel labels.

    Returns (labels (..., 2), confidences (...), occlusion (...) bool).  The
    confidence decays with the actual perturbation, drops under occlusion and
    carries Gaussian noise, so it anti-correlates with the label error.
    Pass a shared ``occlusion`` mask to make two draws see the same occluders.
    """
    prof = get_profile(profile)
    gt = np.asarray(gt2d, dtype=np.float64)
    lead = gt.shape[:-1]
    rng = np.random.default_rng(seed)
    occ_draw = rng.random(lead) < prof.occlusion_prob
    occ = occ_draw if occlusion is None else np.asarray(occlusion, dtype=bool)
    std = prof.sigma * (1.0 + prof.occlusion_inflation * occ)
    noise = rng.normal(size=gt.shape) * std[..., None]
    out_mask = rng.random(lead) < prof.outlier_prob
    jump = rng.uniform(-1.0, 1.0, size=gt.shape) * prof.outlier_mag
    conf_eps = rng.normal(size=lead) * prof.conf_noise
    labels = gt + noise
    labels = np.where(out_mask[..., None], gt + jump, labels)
    labels = np.clip(labels, 0.0, frame - 1.0)
    err = np.linalg.norm(labels - gt, axis=-1)
    conf = np.exp(-err / prof.conf_tau) - prof.occlusion_deflation * occ + conf_eps
    conf = np.clip(conf, prof.conf_floor, 1.0)
    return labels, conf, occ


# ------------------------------------------------------------ datasets

BLOCKS = (
    ("params", lambda T, V: (T, PARAM_DIM)),
    ("joints3d", lambda T, V: (T, NUM_JOINTS, 3)),
    ("joints2d", lambda T, V: (T, V, NUM_JOINTS, 2)),
    ("pseudo2d", lambda T, V: (T, V, NUM_JOINTS, 2)),
    ("pseudo_conf", lambda T, V: (T, V, NUM_JOINTS)),
    ("evidence2d", lambda T, V: (T, V, NUM_JOINTS, 2)),
    ("evidence_conf", lambda T, V: (T, V, NUM_JOINTS)),
    ("occlusion", lambda T, V: (T, V, NUM_JOINTS)),
)


@dataclass
class Sequence:
    """One motion with gt labels for every rig view and two corrupted draws.

    ``pseudo*`` is the supervision (the offline detector); ``evidence*`` is an
    independent draw with the same occlusions, standing in for what the
    network sees in the image.
    """
    seq_id: int
    seed: int
    params: np.ndarray
    joints3d: np.ndarray
    joints2d: np.ndarray
    pseudo2d: np.ndarray
    pseudo_conf: np.ndarray
    evidence2d: np.ndarray
    evidence_conf: np.ndarray
    occlusion: np.ndarray

    @property
    def n_frames(self):
        return self.params.shape[0]


@dataclass
class Dataset:
    rig: Rig
    template: SkeletonTemplate
    profile: CorruptionProfile
    sequences: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)


def make_sequence(template, rig, profile, n_frames, seed, seq_id=0):
    ss = np.random.SeedSequence(seed)
    s_motion, s_occ, s_pseudo, s_evid = (int(c.generate_state(1)[0]) for c in ss.spawn(4))
    motion = generate_motion(template, n_frames, seed=s_motion, seq_id=seq_id)
    gt2d = np.stack([project(cam, motion.joints3d) for cam in rig.cameras], axis=1)
    occ = draw_occlusion(gt2d.shape[:-1], profile, s_occ)
    pseudo, pconf, _ = corrupt(gt2d, profile, s_pseudo, occlusion=occ)
    evid, econf, _ = corrupt(gt2d, profile, s_evid, occlusion=occ)
    return Sequence(seq_id, int(seed), motion.params, motion.joints3d, gt2d, pseudo, pconf,
                    evid, econf, occ.astype(np.float64))


def generate_dataset(n_sequences, n_frames, profile="detector-weak", seed=0, n_views=8,
                     rig=None, template=None):
    """Deterministic in (seed, arguments)."""
    profile = get_profile(profile)
    template = template or SkeletonTemplate.canonical()
    rig = rig or generate_rig(n_views, seed=seed)
    seeds = np.random.SeedSequence([seed, 1]).generate_state(max(n_sequences, 1))
    seqs = [make_sequence(template, rig, profile, n_frames, int(seeds[i]), seq_id=i)
            for i in range(n_sequences)]
    return Dataset(rig, template, profile, seqs,
                   {"seed": int(seed), "n_frames": int(n_frames), "n_views": len(rig)})


def with_profile(dataset, profile, seed=None):
    """Re-corrupt ``dataset`` (same motion, rig and occlusion draw stream) under another profile."""
    profile = get_profile(profile)
    seqs = []
    for s in dataset.sequences:
        ss = np.random.SeedSequence(s.seed)
        _, s_occ, s_pseudo, s_evid = (int(c.generate_state(1)[0]) for c in ss.spawn(4))
        occ = draw_occlusion(s.joints2d.shape[:-1], profile, s_occ)
        pseudo, pconf, _ = corrupt(s.joints2d, profile, s_pseudo, occlusion=occ)
        evid, econf, _ = corrupt(s.joints2d, profile, s_evid, occlusion=occ)
        seqs.append(Sequence(s.seq_id, s.seed, s.params, s.joints3d, s.joints2d, pseudo, pconf,
                             evid, econf, occ.astype(np.float64)))
    return Dataset(dataset.rig, dataset.template, profile, seqs, dict(dataset.meta))


def _header(dataset):
    return {
        "format": MAGIC.decode(),
        "version": VERSION,
        "n_sequences": len(dataset.sequences),
        "n_views": len(dataset.rig),
        "n_joints": NUM_JOINTS,
        "template": dataset.template.to_dict(),
        "rig": dataset.rig.to_dict(),
        "profile": dataset.profile.to_dict(),
        "meta": dataset.meta,
        "sequences": [{"seq_id": int(s.seq_id), "seed": int(s.seed), "n_frames": int(s.n_frames)}
                      for s in dataset.sequences],
        "blocks": [name for name, _ in BLOCKS],
    }


def dataset_bytes(dataset):
    header = json.dumps(_header(dataset), sort_keys=True).encode()
    parts = [MAGIC + b"\n", f"version={VERSION}\n".encode(), f"header_bytes={len(header)}\n".encode(),
             header, b"\n"]
    V = len(dataset.rig)
    for s in dataset.sequences:
        for name, shape in BLOCKS:
            arr = np.asarray(getattr(s, name), dtype="<f8")
            if arr.shape != shape(s.n_frames, V):
                raise ValueError(f"sequence {s.seq_id}: block {name} has shape {arr.shape}")
            parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def write_dataset(dataset, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dataset_bytes(dataset)
    path.write_bytes(data)
    return path


def _read_line(buf, pos):
    end = buf.find(b"\n", pos)
    if end < 0:
        from .errors import FormatError
        raise FormatError("truncated header")
    return buf[pos:end], end + 1


def parse_container(buf, magic, version):
    """Validate magic, version and checksum; return (header dict, binary payload)."""
    from .errors import ChecksumError, FormatError
    if len(buf) < len(magic) + 33 or not buf.startswith(magic + b"\n"):
        raise FormatError(f"not a {magic.decode()} file (bad magic or truncated)")
    line, pos = _read_line(buf, len(magic) + 1)
    if not line.startswith(b"version="):
        raise FormatError("missing version line")
    try:
        ver = int(line.split(b"=", 1)[1])
    except ValueError:
        raise FormatError("unreadable version line") from None
    if ver != version:
        raise FormatError(f"version mismatch: file has {ver}, reader supports {version}")
    line, pos = _read_line(buf, pos)
    try:
        hlen = int(line.split(b"=", 1)[1])
    except (ValueError, IndexError):
        raise FormatError("unreadable header length") from None
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch: file is corrupted")
    if pos + hlen + 1 > len(body):
        raise FormatError("truncated header")
    try:
        header = json.loads(body[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("header is not valid JSON") from None
    return header, body[pos + hlen + 1:]


def read_dataset(path):
    from .errors import FormatError
    buf = Path(path).read_bytes()
    header, payload = parse_container(buf, MAGIC, VERSION)
    V = header["n_views"]
    seqs = []
    off = 0
    for meta in header["sequences"]:
        T = meta["n_frames"]
        fields = {}
        for name, shape in BLOCKS:
            shp = shape(T, V)
            n = int(np.prod(shp)) * 8
            if off + n > len(payload):
                raise FormatError("truncated payload")
            fields[name] = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=off).reshape(shp).copy()
            off += n
        seqs.append(Sequence(meta["seq_id"], meta["seed"], **fields))
    if off != len(payload):
        raise FormatError(f"{len(payload) - off} trailing bytes after the last sequence")
    return Dataset(Rig.from_dict(header["rig"]), SkeletonTemplate.from_dict(header["template"]),
                   CorruptionProfile(**header["profile"]), seqs, header.get("meta", {}))
