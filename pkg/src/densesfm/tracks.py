"""Feature tracks, the scene model, track assembly and the quantized-matching baseline."""

from __future__ import annotations

import copy
import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import CheiralityFailure, DegenerateGeometry
from .geometry import CameraIntrinsics, CameraPose, project_points, triangulate
from .matchio import SparseMatchSet

KEY_SCALE = 1e4  # sub-pixel node keys are rounded to 1e-4 px


class Provenance(str, enum.Enum):
    MATCHED = "matched"
    EXTENDED = "extended"
    REFINED = "refined"


@dataclass
class Observation:
    image_id: int
    xy: np.ndarray
    provenance: Provenance = Provenance.MATCHED

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(2)
        self.provenance = Provenance(self.provenance)


@dataclass
class Track:
    point_id: int
    observations: List[Observation] = field(default_factory=list)
    reference: Optional[int] = None

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def image_ids(self) -> List[int]:
        return [o.image_id for o in self.observations]

    def observation(self, image_id: int) -> Optional[Observation]:
        for o in self.observations:
            if o.image_id == image_id:
                return o
        return None

    def sort(self) -> None:
        self.observations.sort(key=lambda o: o.image_id)


@dataclass(frozen=True)
class ImageView:
    pose: CameraPose
    intrinsics: CameraIntrinsics
    name: str = ""


@dataclass
class SceneModel:
    cameras: Dict[int, ImageView] = field(default_factory=dict)
    points: Dict[int, np.ndarray] = field(default_factory=dict)
    tracks: Dict[int, Track] = field(default_factory=dict)

    def copy(self) -> "SceneModel":
        return SceneModel(
            dict(self.cameras),
            {pid: np.array(p, dtype=float) for pid, p in self.points.items()},
            copy.deepcopy(self.tracks),
        )

    def with_cameras(self, cameras: Dict[int, ImageView]) -> "SceneModel":
        out = self.copy()
        out.cameras = dict(cameras)
        return out

    def image_id_by_name(self) -> Dict[str, int]:
        return {v.name: i for i, v in self.cameras.items()}

    def validate(self) -> None:
        """Raise ``AssertionError`` when a structural invariant is broken."""
        for pid, track in self.tracks.items():
            assert pid == track.point_id, f"track key {pid} != point id {track.point_id}"
            assert pid in self.points, f"track {pid} has no 3D point"
            ids = track.image_ids
            assert len(ids) == len(set(ids)), f"track {pid} observes an image twice"
            for o in track.observations:
                assert o.image_id in self.cameras, f"track {pid} references unknown image {o.image_id}"
            if track.reference is not None:
                assert track.reference in ids, f"track {pid} reference not among its images"
        for p in self.points.values():
            assert np.all(np.isfinite(p))

    def observations_array(self):
        """Flattened ``(point_ids, image_ids, xy)`` over all observations, in track order."""
        pids, iids, xys = [], [], []
        for pid in sorted(self.tracks):
            for o in self.tracks[pid].observations:
                pids.append(pid)
                iids.append(o.image_id)
                xys.append(o.xy)
        return np.array(pids, dtype=int), np.array(iids, dtype=int), np.array(xys, dtype=float).reshape(-1, 2)


def reprojection_errors(model: SceneModel) -> np.ndarray:
    """Per-observation reprojection error, ordered like :meth:`SceneModel.observations_array`.

    Observations behind their camera get ``inf``.
    """
    pids, iids, xys = model.observations_array()
    errors = np.empty(len(pids))
    if len(pids) == 0:
        return errors
    pts = np.array([model.points[p] for p in pids]).reshape(-1, 3)
    for iid in np.unique(iids):
        sel = iids == iid
        view = model.cameras[int(iid)]
        uv, z = project_points(pts[sel], view.pose, view.intrinsics)
        e = np.linalg.norm(uv - xys[sel], axis=1)
        errors[sel] = np.where(z > 0, e, np.inf)
    return errors


def mean_reprojection_error(model: SceneModel) -> float:
    e = reprojection_errors(model)
    e = e[np.isfinite(e)]
    return float(e.mean()) if e.size else 0.0


# -- track assembly ---------------------------------------------------------------


def _node_key(image, xy):
    return (image, int(round(float(xy[0]) * KEY_SCALE)), int(round(float(xy[1]) * KEY_SCALE)))


def build_tracks(matches: Iterable[SparseMatchSet], first_point_id: int = 0) -> List[Track]:
    """Union pairwise matches into tracks.

    Nodes are ``(image, pixel)`` keyed at 1e-4 px.  Edges are joined in input
    order; an edge whose two components already both observe some common image
    is dropped, so no track ever holds two pixels of one image.  Every node ends
    up in exactly one track (unmatched leftovers become length-1 tracks).
    """
    node_index: Dict[tuple, int] = {}
    node_image: List = []
    node_xy: List[np.ndarray] = []
    edges: List[tuple] = []

    def node(image, xy):
        key = _node_key(image, xy)
        idx = node_index.get(key)
        if idx is None:
            idx = len(node_image)
            node_index[key] = idx
            node_image.append(image)
            node_xy.append(np.array(xy, dtype=float))
        return idx

    for m in matches:
        for pa, pb, _ in m.pairs():
            edges.append((node(m.image_a, pa), node(m.image_b, pb)))

    parent = list(range(len(node_image)))
    images = [{node_image[i]} for i in range(len(node_image))]

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for u, v in edges:
        ru, rv = find(u), find(v)
        if ru == rv or images[ru] & images[rv]:
            continue
        # keep the smaller index as root so component order is stable
        if rv < ru:
            ru, rv = rv, ru
        parent[rv] = ru
        images[ru] |= images[rv]
        images[rv] = set()

    groups: Dict[int, List[int]] = {}
    for i in range(len(node_image)):
        groups.setdefault(find(i), []).append(i)

    tracks = []
    for n, root in enumerate(sorted(groups, key=lambda r: min(groups[r]))):
        obs = [Observation(node_image[i], node_xy[i]) for i in groups[root]]
        t = Track(first_point_id + n, obs)
        t.sort()
        tracks.append(t)
    return tracks


def quantize_matches(matches: SparseMatchSet, r: float = 4) -> SparseMatchSet:
    """Snap both keypoints to an ``r``-pixel grid; duplicates keep the highest confidence."""
    if r < 1:
        raise ValueError("grid size must be >= 1")
    qa = r * np.floor(matches.points_a / r + 0.5)
    qb = r * np.floor(matches.points_b / r + 0.5)
    best: Dict[tuple, int] = {}
    for i in range(len(matches)):
        key = (qa[i, 0], qa[i, 1], qb[i, 0], qb[i, 1])
        j = best.get(key)
        # dict insertion order keeps the first occurrence of every grid key
        if j is None or matches.confidence[i] > matches.confidence[j]:
            best[key] = i
    idx = np.array(list(best.values()), dtype=int)
    return SparseMatchSet(matches.image_a, matches.image_b, qa[idx], qb[idx], matches.confidence[idx])


def triangulate_tracks(cameras: Dict[int, ImageView], tracks: Iterable[Track]) -> SceneModel:
    """Triangulate every track with at least two views; failures are dropped."""
    model = SceneModel(dict(cameras))
    for track in tracks:
        if len(track) < 2:
            continue
        obs = [(cameras[o.image_id].pose, cameras[o.image_id].intrinsics, o.xy) for o in track.observations]
        try:
            X = triangulate(obs)
        except (DegenerateGeometry, CheiralityFailure):
            continue
        model.points[track.point_id] = X
        model.tracks[track.point_id] = track
    return model


def select_reference_view(track: Track, model: SceneModel) -> int:
    """Image id whose camera sees the point at the (lower) median depth."""
    X = model.points[track.point_id]
    depths = []
    for o in track.observations:
        z = float(model.cameras[o.image_id].pose.transform(X)[2])
        if z <= 0:
            raise CheiralityFailure(f"point {track.point_id} behind image {o.image_id}")
        depths.append((z, o.image_id))
    depths.sort()
    return depths[(len(depths) - 1) // 2][1]


@dataclass
class TrackStats:
    count: int
    mean_length: float
    histogram: Dict[int, int]

    def as_dict(self) -> dict:
        return {"count": self.count, "mean_length": self.mean_length, "histogram": dict(self.histogram)}


def track_stats(model_or_tracks) -> TrackStats:
    tracks: Sequence[Track]
    if isinstance(model_or_tracks, SceneModel):
        tracks = list(model_or_tracks.tracks.values())
    else:
        tracks = list(model_or_tracks)
    lengths = [len(t) for t in tracks]
    if not lengths:
        return TrackStats(0, 0.0, {})
    hist = dict(sorted(Counter(lengths).items()))
    return TrackStats(len(lengths), sum(lengths) / len(lengths), hist)
