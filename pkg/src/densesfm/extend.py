"""Track extension: add observations in views where a point is splat-visible."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Tuple

import numpy as np

from .errors import BehindCamera, DegenerateGeometry, OutOfImage
from .geometry import fundamental_matrix, sampson_distance
from .splatvis import GaussianSet, ViewProjection, composite_visibility
from .tracks import Observation, Provenance, SceneModel

log = logging.getLogger(__name__)


def _candidates(model: SceneModel, gaussians: GaussianSet, pid: int, eps_v: float, epi_thresh: float, fcache, views):
    track = model.tracks[pid]
    X = model.points[pid]
    existing = set(track.image_ids)
    added: List[Tuple[int, np.ndarray]] = []
    for iid in sorted(model.cameras):
        if iid in existing:
            continue
        view = model.cameras[iid]
        xc = view.pose.transform(X)
        if xc[2] <= 1e-12:
            continue
        k = view.intrinsics
        uv = np.array([k.fx * xc[0] / xc[2] + k.cx, k.fy * xc[1] / xc[2] + k.cy])
        if not k.contains(uv):
            continue
        try:
            visible, _ = composite_visibility(gaussians, pid, view.pose, k, eps_v, views[iid])
        except (BehindCamera, OutOfImage):
            continue
        if not visible:
            continue
        ok = True
        for o in track.observations:
            F = fcache(o.image_id, iid)
            if F is None or sampson_distance(F, o.xy, uv) > epi_thresh:
                ok = False
                break
        if ok:
            added.append((iid, uv))
    return added


def extend_tracks(
    model: SceneModel,
    gaussians: GaussianSet,
    eps_v: float = 0.5,
    epi_thresh: float = 4.0,
    threads: int = 1,
) -> SceneModel:
    """Project every point into views outside its track and keep verified hits.

    A new observation (provenance ``extended``) is added when the projection
    lies in the image, the point's Gaussian passes the composited visibility
    test, and the Sampson distance to every existing observation is at most
    ``epi_thresh``.  Existing observations are never moved or removed.
    """
    out = model.copy()
    fmats = {}

    def fcache(ia: int, ib: int) -> Optional[np.ndarray]:
        key = (ia, ib)
        if key not in fmats:
            va, vb = model.cameras[ia], model.cameras[ib]
            try:
                fmats[key] = fundamental_matrix(va.pose, vb.pose, va.intrinsics, vb.intrinsics)
            except DegenerateGeometry:
                fmats[key] = None
        return fmats[key]

    # warm the cache single-threaded so workers only read it
    ids = sorted(model.cameras)
    for a in ids:
        for b in ids:
            if a != b:
                fcache(a, b)

    views = {iid: ViewProjection.build(gaussians, model.cameras[iid].pose, model.cameras[iid].intrinsics) for iid in ids}

    pids = sorted(model.tracks)
    work = lambda pid: _candidates(model, gaussians, pid, eps_v, epi_thresh, fcache, views)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, pids))
    else:
        results = [work(pid) for pid in pids]

    n_added = 0
    for pid, added in zip(pids, results):
        track = out.tracks[pid]
        for iid, uv in added:
            track.observations.append(Observation(iid, uv, Provenance.EXTENDED))
        if added:
            track.sort()
            n_added += len(added)
    log.info("extension added %d observations to %d tracks", n_added, len(pids))
    return out
