"""Triangulation accuracy/completeness, pose-error AUC and similarity alignment.

Pose error convention: after aligning predicted camera centers to the
reference with a least-squares similarity, the error of a camera is the
larger of its rotation error and the angle, seen from the reference centroid,
between its aligned and reference centers.  Both are in degrees.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, EmptyCloud, AlignmentFailure
from .geometry import CameraPose, rotation_angle
from .tracks import ImageView, SceneModel

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

POSE_ERROR_CONVENTION = "max(rotation_deg, center_angle_about_gt_centroid_deg) after Umeyama center alignment"


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from every ``src`` point to its nearest ``dst`` point."""
    d, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(d, dtype=float)


def accuracy_completeness(pred, gt, thresholds: Sequence[float]) -> Dict[float, Tuple[float, float]]:
    """Per threshold, ``(accuracy %, completeness %)``.

    Accuracy counts predicted points within ``t`` of the reference cloud,
    completeness counts reference points within ``t`` of the prediction.
    """
    pred = np.asarray(pred, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyCloud("accuracy/completeness needs two non-empty clouds")
    d_pred = nearest_distances(pred, gt)
    d_gt = nearest_distances(gt, pred)
    out = {}
    for t in thresholds:
        out[float(t)] = (
            100.0 * np.count_nonzero(d_pred <= t) / len(pred),
            100.0 * np.count_nonzero(d_gt <= t) / len(gt),
        )
    return out


@dataclass(frozen=True)
class Similarity:
    """``x -> s R x + t``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return self.scale * pts @ self.rotation.T + self.translation

    def inverse(self) -> "Similarity":
        Ri = self.rotation.T
        return Similarity(1.0 / self.scale, Ri, -(Ri @ self.translation) / self.scale)

    def apply_pose(self, pose: CameraPose) -> CameraPose:
        R = pose.rotation @ self.rotation.T
        return CameraPose.from_center(R, self.apply(pose.center))

    def apply_model(self, model: SceneModel) -> SceneModel:
        out = model.copy()
        for iid, view in model.cameras.items():
            out.cameras[iid] = ImageView(self.apply_pose(view.pose), view.intrinsics, view.name)
        for pid, X in model.points.items():
            out.points[pid] = self.apply(X)
        return out


def umeyama(src: np.ndarray, dst: np.ndarray) -> Similarity:
    """Least-squares similarity mapping ``src`` onto ``dst`` (both ``(N, 3)``)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 3:
        raise DegenerateConfiguration(f"similarity alignment needs 3 centers, got {len(src)}")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    for name, x in (("predicted", xs), ("reference", xd)):
        sv = np.linalg.svd(x, compute_uv=False)
        if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
            raise DegenerateConfiguration(f"{name} camera centers are coincident or collinear")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = np.mean(np.sum(xs**2, axis=1))
    s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return Similarity(s, R, t)


def _poses(obj) -> Dict[int, CameraPose]:
    if isinstance(obj, SceneModel):
        return {i: v.pose for i, v in obj.cameras.items()}
    return {i: (v.pose if isinstance(v, ImageView) else v) for i, v in obj.items()}


def align_models(pred, gt) -> Similarity:
    """Similarity taking ``pred`` camera centers onto ``gt``'s, matched by image id."""
    p, g = _poses(pred), _poses(gt)
    ids = sorted(set(p) & set(g))
    if len(ids) != len(p) or len(ids) != len(g):
        raise AlignmentFailure("predicted and reference poses cover different images")
    src = np.array([p[i].center for i in ids]).reshape(-1, 3)
    dst = np.array([g[i].center for i in ids]).reshape(-1, 3)
    return umeyama(src, dst)


def pose_errors(pred, gt) -> np.ndarray:
    """Per-camera error in degrees (see :data:`POSE_ERROR_CONVENTION`), sorted by image id."""
    sim = align_models(pred, gt)
    p, g = _poses(pred), _poses(gt)
    ids = sorted(g)
    centroid = np.mean([g[i].center for i in ids], axis=0)
    errs = []
    for i in ids:
        aligned = sim.apply_pose(p[i])
        rot = np.degrees(rotation_angle(g[i].rotation @ aligned.rotation.T))
        a = aligned.center - centroid
        b = g[i].center - centroid
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na < 1e-12 or nb < 1e-12:
            ang = 0.0 if max(na, nb) < 1e-12 else 180.0
        else:
            ang = float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b)))
        errs.append(max(rot, ang))
    return np.array(errs)


def error_auc(errors, thresholds: Sequence[float]) -> Dict[float, float]:
    """Area under the recall-vs-error curve up to each threshold, in percent."""
    errors = np.sort(np.asarray(errors, dtype=float))
    n = len(errors)
    recall = np.arange(1, n + 1) / n
    errors = np.concatenate([[0.0], errors])
    recall = np.concatenate([[0.0], recall])
    out = {}
    for t in thresholds:
        last = int(np.searchsorted(errors, t))
        r = np.concatenate([recall[:last], [recall[last - 1]]])
        e = np.concatenate([errors[:last], [t]])
        out[float(t)] = 100.0 * float(_trapezoid(r, x=e)) / t
    return out


def pose_auc(pred, gt, thresholds: Sequence[float] = (1.0, 3.0, 5.0)) -> Dict[float, float]:
    return error_auc(pose_errors(pred, gt), thresholds)


def write_report(path, metrics: Mapping[str, object]) -> None:
    """Flat ``key=value`` report, keys in insertion order."""
    lines = [f"# pose_error_convention={POSE_ERROR_CONVENTION}"]
    lines += [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line and not line.startswith("#") and "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out
