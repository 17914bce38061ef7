"""Pose metrics: MPJPE, Procrustes-aligned error, PCK/AUC, confidence correlation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .camera import procrustes_align

THRESHOLDS = np.linspace(0.0, 50.0, 100)


def joint_errors(pred, gt):
    """Euclidean distance per joint, (..., k)."""
    return np.linalg.norm(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64), axis=-1)


def pa_errors(pred, gt):
    """Per-joint errors after similarity alignment of each pose, (N, k).

    The least-squares alignment minimises the RMS error, not the mean
    distance, so on rare poses it can raise the mean; those poses keep their
    unaligned errors (the identity is a member of the similarity family).
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, *np.shape(pred)[-2:])
    gt = np.asarray(gt, dtype=np.float64).reshape(pred.shape)
    out = []
    for p, g in zip(pred, gt):
        raw = joint_errors(p, g)
        aligned = procrustes_align(p, g)[1]
        out.append(aligned if aligned.mean() <= raw.mean() else raw)
    return np.stack(out)


def pck_curve(errors, thresholds=THRESHOLDS):
    """Fraction of errors <= each threshold."""
    e = np.ascontiguousarray(np.asarray(errors, dtype=np.float64).reshape(-1))
    if e.size == 0:
        raise ValueError("no errors to score")
    return kernels.pck_counts(e, np.asarray(thresholds, dtype=np.float64)) / e.size


def auc(errors, thresholds=THRESHOLDS):
    return float(pck_curve(errors, thresholds).mean())


def spearman(a, b):
    from scipy.stats import spearmanr
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size < 3 or np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan")
    return float(spearmanr(a, b).statistic)


@dataclass
class MetricReport:
    mpjpe: float
    pa_j: float
    auc: float
    pck: np.ndarray = field(repr=False)
    per_joint: np.ndarray = field(repr=False)
    conf_err_corr: float = float("nan")
    n_poses: int = 0

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"AUC {self.auc} outside [0, 1]")

    def row(self):
        return {"mpjpe": self.mpjpe, "pa_j": self.pa_j, "auc": self.auc,
                "conf_err_corr": self.conf_err_corr, "n_poses": self.n_poses}


def report(pred, gt, conf=None, err2d=None):
    """MetricReport for (N, k, 3) predictions vs gt; optional (.., k) confidences
    with matching 2D errors give the Spearman confidence-error correlation."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    err = joint_errors(pred, gt)
    pa = pa_errors(pred, gt)
    corr = spearman(conf, err2d) if conf is not None else float("nan")
    return MetricReport(float(err.mean()), float(pa.mean()), auc(err), pck_curve(err), err.mean(axis=0), corr, int(err.shape[0]))
