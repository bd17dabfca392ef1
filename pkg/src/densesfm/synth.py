"""Deterministic synthetic scenes, dense matchers and feature images.

A scene is a ring of cameras looking at points drawn uniformly in a box.  Each
point carries a small textured disc (a surfel) facing the cameras; the discs
are what the synthetic matcher and feature provider "see".  The disc texture
is a 3D field, ``[sin(k_c . (X - P) + phi_c), cos(...)]`` per channel pair,
so one surface point yields identical features in every view.

Randomness uses numpy's PCG64 generator with one ``SeedSequence`` stream per
entity (cameras, points, discs, occluders, perturbation, each image pair), so
changing one entity's count never shifts another entity's draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .colmap import read_model, write_model
from .errors import ConfigInvalid
from .geometry import CameraIntrinsics, CameraPose, orthonormalize, rotvec_to_matrix
from .matchio import MatchField, lookup_bilinear_many
from .refine import FeaturePatch
from .splatvis import Gaussian3D, GaussianKind, GaussianSet, read_gaussians, write_gaussians
from .tracks import ImageView, Observation, SceneModel, Track

STREAM_CAMERAS = 0
STREAM_POINTS = 1
STREAM_DISCS = 2
STREAM_OCCLUDERS = 3
STREAM_PERTURB = 4
STREAM_MATCHES = 5


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *key)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


@dataclass
class SynthConfig:
    seed: int = 0
    n_cameras: int = 12
    ring_radius: float = 3.0
    elevation_deg: float = 50.0
    width: int = 320
    height: int = 240
    focal: float = 300.0
    n_points: int = 300
    box_half_extent: Tuple[float, float, float] = (1.0, 1.0, 0.25)
    disc_radius: float = 0.06
    texture_pairs: int = 8
    texture_freq_min: float = 60.0
    texture_freq_max: float = 140.0
    sigma: float = 0.0
    outlier_rate: float = 0.0
    outlier_min_cycle: float = 10.0
    n_occluders: int = 0
    occluder_alpha: Tuple[float, float] = (0.6, 0.95)
    occluder_scale: Tuple[float, float] = (0.05, 0.25)
    pair_neighbors: int = 0  # 0 matches every pair, k > 0 only ring neighbours up to k apart

    def __post_init__(self):
        self.box_half_extent = tuple(float(v) for v in self.box_half_extent)
        self.occluder_alpha = tuple(float(v) for v in self.occluder_alpha)
        self.occluder_scale = tuple(float(v) for v in self.occluder_scale)
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.n_cameras >= 2, "n_cameras must be >= 2"),
            (self.n_points >= 1, "n_points must be >= 1"),
            (self.sigma >= 0, "sigma must be >= 0"),
            (0 <= self.outlier_rate < 1, "outlier_rate must lie in [0, 1)"),
            (self.width > 0 and self.height > 0, "image size must be positive"),
            (self.focal > 0, "focal must be positive"),
            (self.ring_radius > 0, "ring_radius must be positive"),
            (-90 < self.elevation_deg < 90, "elevation_deg must lie in (-90, 90)"),
            (all(v > 0 for v in self.box_half_extent) and len(self.box_half_extent) == 3, "box_half_extent must be 3 positive values"),
            (self.disc_radius > 0, "disc_radius must be positive"),
            (self.texture_pairs >= 1, "texture_pairs must be >= 1"),
            (0 < self.texture_freq_min <= self.texture_freq_max, "texture frequencies must satisfy 0 < min <= max"),
            (self.n_occluders >= 0, "n_occluders must be >= 0"),
            (0 < self.occluder_alpha[0] <= self.occluder_alpha[1] <= 1, "occluder_alpha must satisfy 0 < lo <= hi <= 1"),
            (0 < self.occluder_scale[0] <= self.occluder_scale[1], "occluder_scale must satisfy 0 < lo <= hi"),
            (self.pair_neighbors >= 0, "pair_neighbors must be >= 0"),
            (self.outlier_min_cycle > 0, "outlier_min_cycle must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigInvalid(msg)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> "SynthConfig":
        kwargs = {}
        names = {f.name for f in fields(cls)}
        for key, raw in values.items():
            if key not in names:
                raise ConfigInvalid(f"unknown synth key {key!r}")
            default = getattr(cls, key, None)
            try:
                if isinstance(default, tuple):
                    kwargs[key] = tuple(float(x) for x in str(raw).split(","))
                elif isinstance(default, bool):
                    kwargs[key] = str(raw).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
            except ValueError as exc:
                raise ConfigInvalid(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)


@dataclass(eq=False)
class DiscSet:
    """Textured discs: centers, unit normals, radii, texture wave vectors and phases."""

    centers: np.ndarray
    normals: np.ndarray
    radii: np.ndarray
    wave: np.ndarray  # (T, 3) shared wave vectors
    phase: np.ndarray  # (N, T) per-disc phases

    def __len__(self) -> int:
        return len(self.centers)

    def texture(self, owner: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Feature vectors ``(M, 2T)`` at surface ``points`` of discs ``owner``; zeros where ``owner < 0``."""
        out = np.zeros((len(owner), 2 * self.wave.shape[0]))
        ok = owner >= 0
        if np.any(ok):
            o = owner[ok]
            arg = (points[ok] - self.centers[o]) @ self.wave.T + self.phase[o]
            out[ok, 0::2] = np.sin(arg)
            out[ok, 1::2] = np.cos(arg)
        return out

    def cast(self, origin: np.ndarray, dirs: np.ndarray, candidates: Optional[np.ndarray] = None):
        """First disc hit by each ray; returns ``(owner (M,), depth t (M,), hit points (M, 3))``."""
        idx = np.arange(len(self)) if candidates is None else np.asarray(candidates)
        M = len(dirs)
        owner = np.full(M, -1, dtype=int)
        best = np.full(M, np.inf)
        hits = np.full((M, 3), np.nan)
        if idx.size == 0 or M == 0:
            return owner, best, hits
        c = self.centers[idx]
        n = self.normals[idx]
        denom = dirs @ n.T  # (M, K)
        num = np.einsum("kj,kj->k", c - origin, n)[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        P = origin[None, None, :] + t[..., None] * dirs[:, None, :]
        inside = np.einsum("mkj,mkj->mk", P - c[None], P - c[None]) <= self.radii[idx][None, :] ** 2
        ok = (t > 0) & inside & np.isfinite(t)
        t = np.where(ok, t, np.inf)
        j = np.argmin(t, axis=1)
        tj = t[np.arange(M), j]
        hit = np.isfinite(tj)
        owner[hit] = idx[j[hit]]
        best[hit] = tj[hit]
        hits[hit] = origin + tj[hit, None] * dirs[hit]
        return owner, best, hits


@dataclass(eq=False)
class SynthScene:
    config: SynthConfig
    model: SceneModel  # ground truth: cameras, disc centers as points, full tracks
    occluders: GaussianSet
    discs: DiscSet

    @property
    def cameras(self) -> Dict[int, ImageView]:
        return self.model.cameras

    def pairs(self) -> List[Tuple[int, int]]:
        ids = sorted(self.cameras)
        n = len(ids)
        k = self.config.pair_neighbors
        out = []
        for i in range(n):
            for j in range(i + 1, n):
                gap = min(j - i, n - (j - i))
                if k == 0 or gap <= k:
                    out.append((ids[i], ids[j]))
        return out


# -- scene generation -----------------------------------------------------------------


def ring_cameras(cfg: SynthConfig) -> Dict[int, ImageView]:
    k = CameraIntrinsics(cfg.focal, cfg.focal, (cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0, cfg.width, cfg.height)
    h = cfg.ring_radius * math.tan(math.radians(cfg.elevation_deg))
    cams = {}
    for i in range(cfg.n_cameras):
        a = 2.0 * math.pi * i / cfg.n_cameras
        c = np.array([cfg.ring_radius * math.cos(a), cfg.ring_radius * math.sin(a), h])
        cams[i] = ImageView(CameraPose.look_at(c, np.zeros(3)), k, f"cam{i:03d}")
    return cams


def ground_truth_tracks(cameras: Dict[int, ImageView], points: Dict[int, np.ndarray]) -> Dict[int, Track]:
    """Every camera with positive depth and an in-image projection observes the point."""
    tracks = {}
    for pid in sorted(points):
        X = points[pid]
        obs = []
        for iid in sorted(cameras):
            v = cameras[iid]
            xc = v.pose.transform(X)
            if xc[2] <= 1e-12:
                continue
            uv = np.array([v.intrinsics.fx * xc[0] / xc[2] + v.intrinsics.cx, v.intrinsics.fy * xc[1] / xc[2] + v.intrinsics.cy])
            if v.intrinsics.contains(uv):
                obs.append(Observation(iid, uv))
        tracks[pid] = Track(pid, obs)
    return tracks


def generate_scene(cfg: SynthConfig) -> SynthScene:
    """Ground-truth model, occluder Gaussians and textured discs for ``cfg``."""
    cfg.validate()
    cameras = ring_cameras(cfg)

    rng = rng_for(cfg.seed, STREAM_POINTS)
    half = np.array(cfg.box_half_extent)
    pts = rng.uniform(-half, half, size=(cfg.n_points, 3))
    points = {i: pts[i].copy() for i in range(cfg.n_points)}

    rng = rng_for(cfg.seed, STREAM_DISCS)
    mean_center = np.mean([v.pose.center for v in cameras.values()], axis=0)
    normals = mean_center[None, :] - pts
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    dirs = rng.normal(size=(cfg.texture_pairs, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    freqs = rng.uniform(cfg.texture_freq_min, cfg.texture_freq_max, size=cfg.texture_pairs)
    wave = dirs * freqs[:, None]
    phase = rng.uniform(0.0, 2.0 * math.pi, size=(cfg.n_points, cfg.texture_pairs))
    discs = DiscSet(pts.copy(), normals, np.full(cfg.n_points, cfg.disc_radius), wave, phase)

    occluders = GaussianSet()
    rng = rng_for(cfg.seed, STREAM_OCCLUDERS)
    ids = sorted(cameras)
    for _ in range(cfg.n_occluders):
        cam = cameras[ids[int(rng.integers(len(ids)))]]
        target = pts[int(rng.integers(len(pts)))]
        frac = rng.uniform(0.3, 0.7)
        mean = cam.pose.center + frac * (target - cam.pose.center)
        R = rotvec_to_matrix(rng.normal(size=3))
        scale = rng.uniform(cfg.occluder_scale[0], cfg.occluder_scale[1], size=3)
        alpha = rng.uniform(cfg.occluder_alpha[0], cfg.occluder_alpha[1])
        occluders.add(Gaussian3D(mean, orthonormalize(R), scale, float(alpha), GaussianKind.OCCLUDER))

    model = SceneModel(cameras, points, ground_truth_tracks(cameras, points))
    return SynthScene(cfg, model, occluders, discs)


def perturb_cameras(
    cameras: Dict[int, ImageView], rot_deg: float, trans_frac: float, seed: int, target=np.zeros(3)
) -> Dict[int, ImageView]:
    """Rotate each camera by ``rot_deg`` about a random axis and move its center by ``trans_frac`` of its distance to ``target``."""
    rng = rng_for(seed, STREAM_PERTURB)
    out = {}
    for iid in sorted(cameras):
        v = cameras[iid]
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        shift = rng.normal(size=3)
        shift /= np.linalg.norm(shift)
        R = orthonormalize(rotvec_to_matrix(math.radians(rot_deg) * axis) @ v.pose.rotation)
        C = v.pose.center + trans_frac * np.linalg.norm(v.pose.center - target) * shift
        out[iid] = ImageView(CameraPose.from_center(R, C), v.intrinsics, v.name)
    return out


# -- rendering and matching ------------------------------------------------------------


def _pixel_dirs(view: ImageView, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Unnormalised world directions whose camera-frame z component is 1."""
    k = view.intrinsics
    d_cam = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us)], axis=-1)
    return d_cam @ view.pose.rotation


@dataclass(eq=False)
class DiscRender:
    owner: np.ndarray  # (H, W) disc index or -1
    depth: np.ndarray  # (H, W) camera depth of the hit
    hits: np.ndarray  # (H, W, 3) world hit points


def render_discs(scene: SynthScene, iid: int) -> DiscRender:
    """Exact per-pixel ray casting of the disc set (z-buffered) for one camera."""
    view = scene.cameras[iid]
    k = view.intrinsics
    H, W = k.height, k.width
    owner = np.full((H, W), -1, dtype=int)
    depth = np.full((H, W), np.inf)
    hits = np.full((H, W, 3), np.nan)
    C = view.pose.center
    discs = scene.discs
    angles = np.linspace(0.0, 2.0 * math.pi, 33)[:-1]
    for d in range(len(discs)):
        n = discs.normals[d]
        a = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(n, a)
        # the polygon through the rim points is inscribed; widen it to circumscribe the circle
        rim = discs.centers[d] + (discs.radii[d] / math.cos(math.pi / 32)) * (
            np.cos(angles)[:, None] * a + np.sin(angles)[:, None] * b
        )
        xc = view.pose.transform(rim)
        if np.any(xc[:, 2] <= 1e-9):
            continue
        u = k.fx * xc[:, 0] / xc[:, 2] + k.cx
        v = k.fy * xc[:, 1] / xc[:, 2] + k.cy
        u0, u1 = max(int(math.floor(u.min())), 0), min(int(math.ceil(u.max())), W - 1)
        v0, v1 = max(int(math.floor(v.min())), 0), min(int(math.ceil(v.max())), H - 1)
        if u0 > u1 or v0 > v1:
            continue
        gv, gu = np.mgrid[v0 : v1 + 1, u0 : u1 + 1]
        dirs = _pixel_dirs(view, gu.astype(float), gv.astype(float))
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((discs.centers[d] - C) @ n) / denom
        P = C + t[..., None] * dirs
        r2 = np.sum((P - discs.centers[d]) ** 2, axis=-1)
        ok = (t > 0) & np.isfinite(t) & (r2 <= discs.radii[d] ** 2)
        closer = ok & (t < depth[v0 : v1 + 1, u0 : u1 + 1])
        sub_o = owner[v0 : v1 + 1, u0 : u1 + 1]
        sub_d = depth[v0 : v1 + 1, u0 : u1 + 1]
        sub_h = hits[v0 : v1 + 1, u0 : u1 + 1]
        sub_o[closer] = d
        sub_d[closer] = t[closer]
        sub_h[closer] = P[closer]
    return DiscRender(owner, depth, hits)


def _project(view: ImageView, X: np.ndarray):
    xc = view.pose.transform(X)
    k = view.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([k.fx * xc[..., 0] / xc[..., 2] + k.cx, k.fy * xc[..., 1] / xc[..., 2] + k.cy], axis=-1)
    return uv, xc[..., 2]


def _base_validity(src: DiscRender, dst: DiscRender, view_dst: ImageView):
    """Pixels of ``src`` whose surface point lands where all four ``dst`` neighbours see the same disc."""
    H, W = src.owner.shape
    Hd, Wd = dst.owner.shape
    uv, z = _project(view_dst, src.hits)
    has = (src.owner >= 0) & (z > 0) & np.all(np.isfinite(uv), axis=-1)
    u, v = uv[..., 0], uv[..., 1]
    inb = has & (u >= 0) & (u <= Wd - 1) & (v >= 0) & (v <= Hd - 1)
    u = np.where(inb, u, 0.0)
    v = np.where(inb, v, 0.0)
    x0 = np.minimum(np.floor(u), Wd - 2).astype(int)
    y0 = np.minimum(np.floor(v), Hd - 2).astype(int)
    same = inb.copy()
    for dy in (0, 1):
        for dx in (0, 1):
            same &= dst.owner[y0 + dy, x0 + dx] == src.owner
    return same, uv, x0, y0


class SynthMatch(NamedTuple):
    ab: MatchField
    ba: MatchField
    ab_outliers: np.ndarray  # (H, W) bool, forward pixels whose target was replaced
    ba_outliers: np.ndarray  # backward field is kept outlier-free


def synth_dense_matcher(
    scene: SynthScene,
    pair: Tuple[int, int],
    sigma: Optional[float] = None,
    outlier_rate: Optional[float] = None,
    seed: Optional[int] = None,
    renders: Optional[Dict[int, DiscRender]] = None,
) -> SynthMatch:
    """Forward and backward dense fields for ``pair`` induced by the disc geometry.

    A forward pixel is valid when its surface point lands in B where the four
    bilinear neighbours see the same disc and are themselves valid backward
    pixels, so every valid forward target can be looked up in the backward
    field.  Targets get Gaussian noise ``sigma``.  A fraction
    ``outlier_rate`` of valid forward pixels is replaced by uniform random
    targets, redrawn until the forward-backward cycle misses the start by more
    than ``outlier_min_cycle`` pixels (or the lookup fails); the mask is
    returned.  The backward field carries noise but no outliers.
    """
    cfg = scene.config
    sigma = cfg.sigma if sigma is None else float(sigma)
    outlier_rate = cfg.outlier_rate if outlier_rate is None else float(outlier_rate)
    seed = cfg.seed if seed is None else int(seed)
    if sigma < 0 or not 0 <= outlier_rate < 1:
        raise ConfigInvalid("sigma must be >= 0 and outlier_rate in [0, 1)")
    ia, ib = pair
    va, vb = scene.cameras[ia], scene.cameras[ib]
    renders = renders if renders is not None else {}
    ra = renders.get(ia) or render_discs(scene, ia)
    rb = renders.get(ib) or render_discs(scene, ib)

    valid_ba, uv_ba, _, _ = _base_validity(rb, ra, va)
    valid_ab, uv_ab, x0, y0 = _base_validity(ra, rb, vb)
    for dy in (0, 1):
        for dx in (0, 1):
            valid_ab &= valid_ba[y0 + dy, x0 + dx]

    rng = rng_for(seed, STREAM_MATCHES, ia, ib)
    Ha, Wa = valid_ab.shape
    Hb, Wb = valid_ba.shape
    noise_ab = rng.normal(size=(Ha, Wa, 2))
    noise_ba = rng.normal(size=(Hb, Wb, 2))
    conf_ab = rng.uniform(0.1, 1.0, size=(Ha, Wa))
    conf_ba = rng.uniform(0.1, 1.0, size=(Hb, Wb))

    flow_ab = np.where(valid_ab[..., None], uv_ab + sigma * noise_ab, np.nan)
    flow_ba = np.where(valid_ba[..., None], uv_ba + sigma * noise_ba, np.nan)
    ba = MatchField(ib, ia, flow_ba, np.where(valid_ba, conf_ba, 0.0), (Wa, Ha))

    is_out = valid_ab & (rng.uniform(size=(Ha, Wa)) < outlier_rate)
    rows, cols = np.nonzero(is_out)
    pending = np.arange(len(rows))
    start = np.stack([cols, rows], axis=1).astype(float)
    targets = np.zeros((len(rows), 2))
    for _ in range(1000):
        if pending.size == 0:
            break
        draw = rng.uniform([-0.5, -0.5], [Wb - 0.5, Hb - 0.5], size=(pending.size, 2))
        targets[pending] = draw
        back = lookup_bilinear_many(ba, draw)
        d = np.linalg.norm(back - start[pending], axis=1)
        ok = ~np.isfinite(d) | (d > cfg.outlier_min_cycle)
        pending = pending[~ok]
    if pending.size:
        raise RuntimeError("could not draw cycle-inconsistent outliers")
    flow_ab[rows, cols] = targets
    ab = MatchField(ia, ib, flow_ab, np.where(valid_ab, conf_ab, 0.0), (Wb, Hb))
    return SynthMatch(ab, ba, is_out, np.zeros((Hb, Wb), dtype=bool))


def surface_points(scene: SynthScene, iid: int, pixels: np.ndarray, cameras: Optional[Dict[int, ImageView]] = None):
    """Ground-truth surface point seen through each pixel ``(x, y)``; NaN rows on misses."""
    view = (cameras or scene.cameras)[iid]
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    dirs = _pixel_dirs(view, pixels[:, 0], pixels[:, 1])
    _, _, hits = scene.discs.cast(view.pose.center, dirs)
    return hits


def surface_distance(scene: SynthScene, points: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to the nearest disc (closed 3D disk)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    d = scene.discs
    rel = pts[:, None, :] - d.centers[None]  # (M, N, 3)
    h = np.einsum("mnj,nj->mn", rel, d.normals)
    inplane = rel - h[..., None] * d.normals[None]
    r = np.linalg.norm(inplane, axis=-1)
    excess = np.maximum(r - d.radii[None], 0.0)
    return np.sqrt(np.min(h**2 + excess**2, axis=1))


class SyntheticFeatureProvider:
    """Feature patches rendered by ray casting the textured discs from the true cameras.

    Pixels whose ray misses every disc get zero features.  Only discs whose
    bounding sphere projects near the patch are tested, which does not change
    the first hit.
    """

    def __init__(self, scene: SynthScene):
        self.scene = scene
        self._proj = {}
        for iid, view in scene.cameras.items():
            uv, z = _project(view, scene.discs.centers)
            k = view.intrinsics
            with np.errstate(divide="ignore"):
                rad = np.where(
                    z > 2 * scene.discs.radii,
                    2.0 * scene.discs.radii * max(k.fx, k.fy) / np.maximum(z - scene.discs.radii, 1e-12) * 1.5 + 2.0,
                    np.inf,
                )
            self._proj[iid] = (uv, rad)

    def patch(self, image_id: int, center, p: int, stride: float = 1.0) -> FeaturePatch:
        view = self.scene.cameras[image_id]
        center = np.asarray(center, dtype=float)
        half = p // 2
        offs = (np.arange(p) - half) * stride
        gy, gx = np.meshgrid(center[1] + offs, center[0] + offs, indexing="ij")
        us, vs = gx.ravel(), gy.ravel()
        uv, rad = self._proj[image_id]
        ext = half * abs(stride)
        du = np.maximum(np.abs(uv[:, 0] - center[0]) - ext, 0.0)
        dv = np.maximum(np.abs(uv[:, 1] - center[1]) - ext, 0.0)
        cand = np.flatnonzero(~np.isfinite(rad) | ((du <= rad) & (dv <= rad)))
        dirs = _pixel_dirs(view, us, vs)
        owner, _, hits = self.scene.discs.cast(view.pose.center, dirs, cand)
        feats = self.scene.discs.texture(owner, hits)
        return FeaturePatch(image_id, feats.reshape(p, p, -1), center, stride)


# -- scene bundles ---------------------------------------------------------------------


def write_scene(scene: SynthScene, directory) -> None:
    """COLMAP-text ground truth, occluder PLY, disc table and the generating config."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_model(scene.model, directory / "model")
    write_gaussians(directory / "occluders.ply", scene.occluders)
    (directory / "synth.cfg").write_text(scene.config.to_text())
    d = scene.discs
    lines = ["# wave vectors: kx ky kz"]
    lines += [" ".join(repr(float(x)) for x in w) for w in d.wave]
    lines.append("# discs: id cx cy cz nx ny nz radius phases...")
    for i in range(len(d)):
        vals = [*d.centers[i], *d.normals[i], d.radii[i], *d.phase[i]]
        lines.append(f"{i} " + " ".join(repr(float(x)) for x in vals))
    (directory / "discs.txt").write_text("\n".join(lines) + "\n")


def read_config_file(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line and "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def read_scene(directory) -> SynthScene:
    directory = Path(directory)
    cfg = SynthConfig.from_mapping(read_config_file(directory / "synth.cfg"))
    model = read_model(directory / "model")
    occluders = read_gaussians(directory / "occluders.ply")
    text = (directory / "discs.txt").read_text().splitlines()
    split = next(i for i, l in enumerate(text) if l.startswith("# discs"))
    wave = np.array([[float(x) for x in l.split()] for l in text[1:split]]).reshape(-1, 3)
    rows = np.array([[float(x) for x in l.split()] for l in text[split + 1 :] if l.strip()])
    discs = DiscSet(rows[:, 1:4], rows[:, 4:7], rows[:, 7], wave, rows[:, 8:].reshape(len(rows), -1))
    return SynthScene(cfg, model, occluders, discs)
