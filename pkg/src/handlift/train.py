"""Sliding-window training, checkpoints, evaluation and the DLT baseline."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .camera import triangulate_batch
from .config import TrainConfig
from .errors import ConfigError, FormatError, NonFiniteError
from .metrics import joint_errors, report
from .model import HandLifter
from .skeleton import SkeletonTemplate
from .synthetic import parse_container

log = logging.getLogger(__name__)

CKPT_MAGIC = b"HANDLIFT-CHECKPOINT"
CKPT_VERSION = 1
LOSS_COLUMNS = ("step", "epoch", "lr", "total", "hmap", "hm2d", "nll", "proj2d")


# ---------------------------------------------------------------- windows

def window_indices(n_frames, T):
    """(n_frames, T) frame indices; window f is clamp(f - T//2 .. f + T//2)."""
    if n_frames < 1:
        raise ValueError("empty sequence")
    if T < 1 or T % 2 == 0:
        raise ValueError(f"window length must be odd, got {T}")
    h = T // 2
    return np.clip(np.arange(n_frames)[:, None] + np.arange(-h, h + 1)[None, :], 0, n_frames - 1)


def make_windows(sequence, T):
    """One T-frame window per frame of ``sequence`` (replication padding at the ends)."""
    n = sequence.n_frames if hasattr(sequence, "n_frames") else len(sequence)
    return list(window_indices(n, T))


def gather_batch(dataset, items, T, views, rng=None, jitter=0.0):
    """items: list of (sequence index, centre frame)."""
    ev, ec, ps, pc, gt = [], [], [], [], []
    views = np.asarray(views)
    for si, f in items:
        s = dataset.sequences[si]
        w = window_indices(s.n_frames, T)[f]
        ev.append(s.evidence2d[w][:, views])
        ec.append(s.evidence_conf[w][:, views])
        ps.append(s.pseudo2d[f, views])
        pc.append(s.pseudo_conf[f, views])
        gt.append(s.joints3d[f])
    batch = {"evidence2d": np.stack(ev), "evidence_conf": np.stack(ec), "pseudo2d": np.stack(ps),
             "pseudo_conf": np.stack(pc), "joints3d": np.stack(gt)}
    if jitter > 0 and rng is not None:
        batch["pseudo2d"] = batch["pseudo2d"] + rng.normal(scale=jitter, size=batch["pseudo2d"].shape)
    return batch


# ---------------------------------------------------------------- checkpoints

def checkpoint_bytes(model, history=(), extra=None):
    store = model.store
    names = list(store.params)
    header = {
        "format": CKPT_MAGIC.decode(),
        "version": CKPT_VERSION,
        "config": model.cfg.to_dict(),
        "flatten": model.flatten,
        "template": model.head.template.to_dict(),
        "step": int(store.step),
        "params": [{"name": n, "shape": list(store.params[n].data.shape)} for n in names],
        "history": [list(map(float, r)) for r in history],
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC + b"\n", f"version={CKPT_VERSION}\n".encode(), f"header_bytes={len(hb)}\n".encode(),
             hb, b"\n"]
    for group in (store.values(), store.m, store.v):
        for n in names:
            parts.append(np.ascontiguousarray(group[n], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model, path, history=(), extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, history, extra))
    return path


def load_checkpoint(path):
    """Returns (model, header).  Adam moments and the step counter are restored."""
    buf = Path(path).read_bytes()
    header, payload = parse_container(buf, CKPT_MAGIC, CKPT_VERSION)
    cfg = TrainConfig.from_dict(header["config"])
    model = HandLifter(cfg, flatten=header["flatten"], template=SkeletonTemplate.from_dict(header["template"]) if "template" in header else None)
    store = model.store
    specs = header["params"]
    if [s["name"] for s in specs] != list(store.params):
        raise FormatError("checkpoint parameters do not match the model layout")
    off = 0
    groups = []
    for _ in range(3):
        g = {}
        for s in specs:
            n = int(np.prod(s["shape"], dtype=np.int64))
            if off + 8 * n > len(payload):
                raise FormatError("truncated checkpoint payload")
            g[s["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(s["shape"]).copy()
            off += 8 * n
        groups.append(g)
    if off != len(payload):
        raise FormatError("trailing bytes in checkpoint")
    store.load_values(groups[0])
    for n in store.params:
        store.m[n][...] = groups[1][n]
        store.v[n][...] = groups[2][n]
    store.step = header["step"]
    return model, header


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: HandLifter
    history: list = field(default_factory=list)
    checkpoint: Path | None = None
    aborted: bool = False


def schedule(cfg, n_windows):
    steps_per_epoch = max(1, math.ceil(n_windows / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    decay_step = int(round(total * cfg.decay_epoch / cfg.epochs))
    return steps_per_epoch, total, decay_step


def _epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


def train(cfg: TrainConfig, dataset, out_dir=None, resume=None, model=None, n_steps=None):
    """Train on ``dataset``; deterministic in (cfg, dataset) on a single thread.

    ``resume`` may be a checkpoint path; ``n_steps`` stops early after that many
    steps of this call (used for resume tests).
    """
    if cfg.views > len(dataset.rig):
        raise ConfigError(f"config asks for {cfg.views} views but the rig has {len(dataset.rig)}")
    history = []
    if resume is not None:
        model, header = load_checkpoint(resume)
        if model.cfg.to_dict() != cfg.to_dict():
            raise ConfigError("resume: checkpoint config differs from the requested config")
        history = [list(r) for r in header["history"]]
    elif model is None:
        model = HandLifter(cfg, flatten=dataset.profile.flatten, template=dataset.template)
    items = [(si, f) for si, s in enumerate(dataset.sequences) for f in range(s.n_frames)]
    if not items:
        raise ValueError("dataset has no frames")
    steps_per_epoch, total, decay_step = schedule(cfg, len(items))
    opt = ad.Adam()
    store = model.store
    out_dir = Path(out_dir) if out_dir is not None else None
    P_all = dataset.rig.P
    n_rig = len(dataset.rig)
    done = 0
    result = TrainResult(model, history)
    while store.step < total and (n_steps is None or done < n_steps):
        step = store.step
        epoch, pos = divmod(step, steps_per_epoch)
        order = _epoch_order(cfg.seed, epoch, len(items))
        chosen = [items[i] for i in order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]]
        rng = np.random.default_rng([cfg.seed, 3, step])
        if cfg.random_views:
            views = np.sort(rng.choice(n_rig, cfg.views, replace=False))
        else:
            views = np.arange(cfg.views)
        batch = gather_batch(dataset, chosen, cfg.T, views, rng, cfg.label_jitter)
        lr = cfg.lr * (0.1 if step >= decay_step else 1.0)
        store.zero_grad()
        try:
            with ad.Tape() as tape:
                loss, terms, _ = model.forward_train(batch, P_all[views], rng)
            tape.backward(loss)
            opt.step(store, lr)
        except NonFiniteError as exc:
            log.error("non-finite value at step %d (%s); aborting", step, exc)
            store.zero_grad()
            result.aborted = True
            if out_dir is not None:
                result.checkpoint = save_checkpoint(model, out_dir / "last_good.ckpt", history)
            raise
        row = [step, epoch, lr, float(loss.data)] + [float(terms[n].data) for n in LOSS_COLUMNS[4:]]
        history.append(row)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d/%d loss %.4f proj2d %.3f nll %.3f", step, total, row[3], row[7], row[6])
        done += 1
    if out_dir is not None:
        result.checkpoint = save_checkpoint(model, out_dir / "model.ckpt", history)
        write_loss_csv(history, out_dir / "loss.csv")
    return result


def write_loss_csv(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in history:
            w.writerow([int(r[0]), int(r[1])] + [repr(float(x)) for x in r[2:]])
    return path


# ---------------------------------------------------------------- evaluation

def _check_views(dataset, views):
    views = np.asarray(list(views), dtype=np.int64)
    if views.size < 2:
        raise ValueError("evaluation needs at least 2 views")
    if views.min() < 0 or views.max() >= len(dataset.rig) or np.unique(views).size != views.size:
        raise ValueError(f"bad view subset {views.tolist()} for a {len(dataset.rig)}-camera rig")
    return views


def predict(model, dataset, views, seed=0):
    """Per-sequence predictions dict list (no parameter or dataset mutation)."""
    views = _check_views(dataset, views)
    P = dataset.rig.P[views]
    out = []
    for s in dataset.sequences:
        rng = np.random.default_rng([seed, 5, s.seq_id])
        out.append(model.predict_sequence(s.evidence2d[:, views], s.evidence_conf[:, views], P, rng))
    return out


def evaluate(model, dataset, views, seed=0, output="joints3d"):
    """MetricReport of the model on ``dataset`` restricted to ``views``."""
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)[0]
    views = _check_views(dataset, views)
    preds = predict(model, dataset, views, seed)
    pred = np.concatenate([p[output] for p in preds])
    gt = np.concatenate([s.joints3d for s in dataset.sequences])
    conf = np.concatenate([p["conf"] for p in preds])
    err2d = np.concatenate([joint_errors(p["decoded2d"], s.joints2d[:, views])
                            for p, s in zip(preds, dataset.sequences)])
    return report(pred, gt, conf, err2d)


def baseline_dlt(dataset, views, source="pseudo"):
    """Confidence-weighted DLT of the raw corrupted labels, frame by frame."""
    views = _check_views(dataset, views)
    P = dataset.rig.P[views]
    preds, gts, confs, errs = [], [], [], []
    for s in dataset.sequences:
        pts = getattr(s, f"{source}2d")[:, views]
        conf = getattr(s, f"{source}_conf")[:, views]
        X, status = triangulate_batch(np.moveaxis(pts, 1, 2), np.moveaxis(conf, 1, 2), P)
        if np.any(status):
            raise RuntimeError(f"baseline triangulation failed for {int((status != 0).sum())} joints")
        preds.append(X)
        gts.append(s.joints3d)
        confs.append(conf)
        errs.append(joint_errors(pts, s.joints2d[:, views]))
    return report(np.concatenate(preds), np.concatenate(gts), np.concatenate(confs), np.concatenate(errs))
