"""3D Gaussians and ray-composited visibility of SfM points.

Every SfM point becomes a small isotropic Gaussian with opacity 1.  A point is
visible from a camera when some ray of its pixel footprint reaches it with
transmittance above a threshold; Gaussians in front of it attenuate the ray by
``1 - alpha_j`` each, where ``alpha_j`` is the Gaussian's opacity times its
peak density along the ray.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import BehindCamera, CheiralityFailure, OutOfImage
from .geometry import CameraIntrinsics, CameraPose, qvec_to_rotmat, rotmat_to_qvec
from .ply import read_vertices, write_vertices
from .tracks import SceneModel


class GaussianKind(enum.IntEnum):
    SFM_POINT = 0
    OCCLUDER = 1


@dataclass(frozen=True, eq=False)
class Gaussian3D:
    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    kind: GaussianKind = GaussianKind.OCCLUDER

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float).reshape(3))
        object.__setattr__(self, "kind", GaussianKind(self.kind))
        if np.any(self.scale <= 0):
            raise ValueError("Gaussian scales must be positive")
        if not 0.0 < self.opacity <= 1.0:
            raise ValueError(f"opacity {self.opacity} outside (0, 1]")
        if self.kind == GaussianKind.SFM_POINT:
            if self.opacity != 1.0 or not np.array_equal(self.rotation, np.eye(3)):
                raise ValueError("SfM-point Gaussians have unit opacity and identity rotation")


@dataclass
class GaussianSet:
    """Ordered Gaussians; ``point_index`` maps SfM point ids to their Gaussian."""

    gaussians: List[Gaussian3D] = field(default_factory=list)
    point_index: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self._arrays = None

    def __len__(self) -> int:
        return len(self.gaussians)

    def add(self, g: Gaussian3D, point_id: Optional[int] = None) -> int:
        if g.kind == GaussianKind.SFM_POINT:
            if point_id is None or point_id in self.point_index:
                raise ValueError("each SfM point needs exactly one sfm_point Gaussian")
            self.point_index[point_id] = len(self.gaussians)
        self.gaussians.append(g)
        self._arrays = None
        return len(self.gaussians) - 1

    def extend(self, other: "GaussianSet") -> "GaussianSet":
        """New set with ``other``'s Gaussians appended after this set's."""
        out = GaussianSet(list(self.gaussians), dict(self.point_index))
        offset = len(out.gaussians)
        out.gaussians.extend(other.gaussians)
        for pid, idx in other.point_index.items():
            if pid in out.point_index:
                raise ValueError(f"point {pid} present in both sets")
            out.point_index[pid] = idx + offset
        return out

    def arrays(self):
        """Cached ``(means, inv_frames, opacity)``; ``inv_frames`` maps world to whitened local."""
        if self._arrays is None:
            n = len(self.gaussians)
            means = np.zeros((n, 3))
            inv = np.zeros((n, 3, 3))
            opac = np.zeros(n)
            for i, g in enumerate(self.gaussians):
                means[i] = g.mean
                inv[i] = g.rotation.T / g.scale[:, None]
                opac[i] = g.opacity
            self._arrays = (means, inv, opac)
        return self._arrays


def init_gaussians(model: SceneModel) -> GaussianSet:
    """One SfM-point Gaussian per 3D point with isotropic scale ``D_max / f``.

    ``D_max`` is the largest camera-frame depth over the track's views and
    ``f`` the focal length ``fx`` of that view.
    """
    gs = GaussianSet()
    for pid in sorted(model.tracks):
        X = model.points[pid]
        best = None
        for o in model.tracks[pid].observations:
            view = model.cameras[o.image_id]
            z = float(view.pose.transform(X)[2])
            if z > 0 and (best is None or z > best[0]):
                best = (z, view.intrinsics.fx)
        if best is None:
            raise CheiralityFailure(f"point {pid} has no view with positive depth")
        s = best[0] / best[1]
        gs.add(Gaussian3D(X, np.eye(3), np.full(3, s), 1.0, GaussianKind.SFM_POINT), pid)
    return gs


def footprint_pixels(center_uv, radius_px: float, k: CameraIntrinsics) -> np.ndarray:
    """Integer pixels within ``radius_px`` of ``center_uv``; at least the nearest pixel."""
    u, v = float(center_uv[0]), float(center_uv[1])
    r = max(float(radius_px), 0.0)
    xs = np.arange(math.ceil(u - r), math.floor(u + r) + 1)
    ys = np.arange(math.ceil(v - r), math.floor(v + r) + 1)
    gx, gy = np.meshgrid(xs, ys)
    gx, gy = gx.ravel(), gy.ravel()
    keep = ((gx - u) ** 2 + (gy - v) ** 2 <= r * r) & (gx >= 0) & (gx < k.width) & (gy >= 0) & (gy < k.height)
    pix = np.stack([gx[keep], gy[keep]], axis=1).astype(float)
    if len(pix) == 0:
        nearest = np.array([[min(max(round(u), 0), k.width - 1), min(max(round(v), 0), k.height - 1)]], dtype=float)
        return nearest
    return pix


def pixel_rays(pixels: np.ndarray, pose: CameraPose, k: CameraIntrinsics) -> np.ndarray:
    """Unit world-space directions through pixel centers, shape ``(N, 3)``."""
    d_cam = np.stack(
        [(pixels[:, 0] - k.cx) / k.fx, (pixels[:, 1] - k.cy) / k.fy, np.ones(len(pixels))], axis=1
    )
    d = d_cam @ pose.rotation
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def ray_alphas(origin: np.ndarray, directions: np.ndarray, gaussians: GaussianSet, indices=None):
    """Per-ray, per-Gaussian ``(distance along ray, effective alpha)``.

    ``directions`` is ``(R, 3)``; both outputs are ``(R, N)``, restricted to
    ``indices`` when given.  The effective alpha is ``opacity * exp(-m2 / 2)``
    with ``m2`` the minimum squared Mahalanobis distance between the ray line
    and the Gaussian mean.  The arithmetic is element-wise and written out per
    component, so a scalar re-evaluation of one (ray, Gaussian) pair
    reproduces it bit for bit.
    """
    means, inv, opac = gaussians.arrays()
    if indices is not None:
        means, inv, opac = means[indices], inv[indices], opac[indices]
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    ox, oy, oz = float(origin[0]), float(origin[1]), float(origin[2])
    dx, dy, dz = (directions[:, i : i + 1] for i in range(3))
    px = ox - means[:, 0]
    py = oy - means[:, 1]
    pz = oz - means[:, 2]
    ax = inv[:, 0, 0] * px + inv[:, 0, 1] * py + inv[:, 0, 2] * pz
    ay = inv[:, 1, 0] * px + inv[:, 1, 1] * py + inv[:, 1, 2] * pz
    az = inv[:, 2, 0] * px + inv[:, 2, 1] * py + inv[:, 2, 2] * pz
    bx = inv[:, 0, 0] * dx + inv[:, 0, 1] * dy + inv[:, 0, 2] * dz
    by = inv[:, 1, 0] * dx + inv[:, 1, 1] * dy + inv[:, 1, 2] * dz
    bz = inv[:, 2, 0] * dx + inv[:, 2, 1] * dy + inv[:, 2, 2] * dz
    aa = ax * ax + ay * ay + az * az
    ab = ax * bx + ay * by + az * bz
    bb = bx * bx + by * by + bz * bz
    m2 = np.maximum(aa - ab * ab / bb, 0.0)
    alpha = opac * np.exp(-0.5 * m2)
    t = (means[:, 0] - ox) * dx + (means[:, 1] - oy) * dy + (means[:, 2] - oz) * dz
    return t, alpha


def ray_transmittance(t: np.ndarray, alpha: np.ndarray, target: int) -> float:
    """Product of ``1 - alpha`` over Gaussians in front of ``target`` along the ray.

    Only Gaussians with positive distance strictly nearer than the target
    count; equal distances are ordered by index.  Factors that equal 1.0
    exactly are skipped, which leaves the product bit-identical.
    """
    t_target = t[target]
    idx = np.arange(len(t))
    factor = 1.0 - alpha
    front = (t > 0) & ((t < t_target) | ((t == t_target) & (idx < target))) & (factor != 1.0)
    front[target] = False
    sel = idx[front]
    order = sel[np.lexsort((sel, t[sel]))]
    return math.prod(factor[order].tolist())


# 1 - alpha rounds to exactly 1.0 once alpha < 2**-54, i.e. beyond ~8.7 standard
# deviations; culling at 9.5 keeps a margin
_CULL_SIGMAS = 9.5


@dataclass(eq=False)
class ViewProjection:
    """Per-camera projections of every Gaussian, used to skip inert Gaussians.

    A Gaussian whose projected mean is farther than ``radius`` pixels from
    every traced pixel lies more than 9.5 standard deviations from each ray,
    so ``1 - alpha`` is exactly 1.0 and the product is unchanged.
    """

    uv: np.ndarray
    radius: np.ndarray

    @classmethod
    def build(cls, gaussians: GaussianSet, pose: CameraPose, k: CameraIntrinsics) -> "ViewProjection":
        means, _, _ = gaussians.arrays()
        smax = np.array([float(np.max(g.scale)) for g in gaussians.gaussians])
        xc = pose.transform(means.reshape(-1, 3))
        z = xc[:, 2]
        corners = np.array([[-0.5, -0.5], [k.width - 0.5, -0.5], [-0.5, k.height - 0.5], [k.width - 0.5, k.height - 0.5]])
        b_max = float(np.max(np.sqrt(1.0 + ((corners[:, 0] - k.cx) / k.fx) ** 2 + ((corners[:, 1] - k.cy) / k.fy) ** 2)))
        f_max = max(k.fx, k.fy)
        near = z <= _CULL_SIGMAS * smax
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([k.fx * xc[:, 0] / z + k.cx, k.fy * xc[:, 1] / z + k.cy], axis=1)
            radius = _CULL_SIGMAS * smax * f_max * b_max / z + 1.0
        radius = np.where(near, np.inf, radius)
        uv = np.where(near[:, None], 0.0, uv)
        return cls(uv, radius)

    def candidates(self, pixels: np.ndarray) -> np.ndarray:
        lo = pixels.min(axis=0)
        hi = pixels.max(axis=0)
        du = np.maximum(np.maximum(lo[0] - self.uv[:, 0], self.uv[:, 0] - hi[0]), 0.0)
        dv = np.maximum(np.maximum(lo[1] - self.uv[:, 1], self.uv[:, 1] - hi[1]), 0.0)
        keep = (du <= self.radius) & (dv <= self.radius)
        return np.flatnonzero(keep)


def composite_visibility(
    gaussians: GaussianSet,
    point_id: int,
    pose: CameraPose,
    k: CameraIntrinsics,
    eps_v: float = 0.5,
    view: Optional[ViewProjection] = None,
) -> Tuple[bool, float]:
    """Visibility flag and score of an SfM point's Gaussian from one camera.

    The score is the largest transmittance-weighted alpha of the point's own
    Gaussian over the rays of its projected footprint.  ``view`` may carry
    precomputed projections for the same camera.
    """
    target = gaussians.point_index[point_id]
    g = gaussians.gaussians[target]
    xc = pose.transform(g.mean)
    if xc[2] <= 1e-12:
        raise BehindCamera(f"point {point_id} has depth {xc[2]:.3g}")
    uv = np.array([k.fx * xc[0] / xc[2] + k.cx, k.fy * xc[1] / xc[2] + k.cy])
    if not k.contains(uv):
        raise OutOfImage(f"point {point_id} projects to ({uv[0]:.1f}, {uv[1]:.1f})")
    radius = 2.0 * float(np.max(g.scale)) * max(k.fx, k.fy) / xc[2]
    pixels = footprint_pixels(uv, radius, k)
    if view is None:
        view = ViewProjection.build(gaussians, pose, k)
    idx = view.candidates(pixels)
    if not np.any(idx == target):
        idx = np.sort(np.append(idx, target))
    local = int(np.searchsorted(idx, target))
    # rays nearest the projection first; no score can exceed 1.0, so stop there
    order = np.argsort(np.sum((pixels - uv) ** 2, axis=1), kind="stable")
    dirs = pixel_rays(pixels[order], pose, k)
    score = 0.0
    start = 0
    for stop in (1, len(dirs)):
        if start >= stop:
            continue
        t, alpha = ray_alphas(pose.center, dirs[start:stop], gaussians, idx)
        for r in range(stop - start):
            # the SfM Gaussian's own alpha is 1 on every ray of its footprint
            score = max(score, 1.0 * ray_transmittance(t[r], alpha[r], local))
            if score == 1.0:
                return score > eps_v, score
        start = stop
    return score > eps_v, score


# -- PLY import/export ------------------------------------------------------------

_PLY_DTYPE = [
    ("x", "f4"), ("y", "f4"), ("z", "f4"),
    ("scale_0", "f4"), ("scale_1", "f4"), ("scale_2", "f4"),
    ("rot_0", "f4"), ("rot_1", "f4"), ("rot_2", "f4"), ("rot_3", "f4"),
    ("opacity", "f4"), ("kind", "u1"),
]


def write_gaussians(path, gaussians: GaussianSet) -> None:
    """Binary PLY; scales are raw standard deviations, rotations ``(w, x, y, z)`` quaternions."""
    arr = np.zeros(len(gaussians), dtype=_PLY_DTYPE)
    for i, g in enumerate(gaussians.gaussians):
        q = rotmat_to_qvec(g.rotation)
        arr[i] = (*g.mean, *g.scale, *q, g.opacity, int(g.kind))
    write_vertices(path, arr)


def read_gaussians(path, point_ids=None) -> GaussianSet:
    """Read a Gaussian PLY; SfM-point Gaussians are assigned ``point_ids`` in file order."""
    v = read_vertices(path)
    gs = GaussianSet()
    ids = iter(point_ids) if point_ids is not None else iter(range(len(v)))
    for row in v:
        kind = GaussianKind(int(row["kind"]))
        q = np.array([row["rot_0"], row["rot_1"], row["rot_2"], row["rot_3"]], dtype=float)
        if kind == GaussianKind.SFM_POINT:
            R = np.eye(3)
            opacity = 1.0
        else:
            R = qvec_to_rotmat(q)
            opacity = float(min(max(row["opacity"], np.nextafter(0, 1)), 1.0))
        g = Gaussian3D(
            [row["x"], row["y"], row["z"]],
            R,
            [row["scale_0"], row["scale_1"], row["scale_2"]],
            opacity,
            kind,
        )
        gs.add(g, next(ids) if kind == GaussianKind.SFM_POINT else None)
    return gs
