"""COLMAP text model I/O (``cameras.txt``, ``images.txt``, ``points3D.txt``).

Only the PINHOLE camera model is written.  Observation provenance and the
reference view, which COLMAP has no slot for, go to ``tracks_meta.txt``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, qvec_to_rotmat, rotmat_to_qvec
from .tracks import ImageView, Observation, SceneModel, Track, reprojection_errors


def _f(x) -> str:
    return repr(float(x))


def write_model(model: SceneModel, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    image_ids = sorted(model.cameras)

    lines = [
        "# Camera list with one line of data per camera:",
        "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]",
        f"# Number of cameras: {len(image_ids)}",
    ]
    for iid in image_ids:
        k = model.cameras[iid].intrinsics
        lines.append(f"{iid} PINHOLE {k.width} {k.height} {_f(k.fx)} {_f(k.fy)} {_f(k.cx)} {_f(k.cy)}")
    (path / "cameras.txt").write_text("\n".join(lines) + "\n")

    # 2D point index per (image, point) follows the sorted point order
    per_image = {iid: [] for iid in image_ids}
    for pid in sorted(model.tracks):
        for o in model.tracks[pid].observations:
            per_image[o.image_id].append((o.xy, pid))
    point2d_idx = {}
    for iid in image_ids:
        for idx, (_, pid) in enumerate(per_image[iid]):
            point2d_idx[(iid, pid)] = idx

    n_obs = sum(len(v) for v in per_image.values())
    lines = [
        "# Image list with two lines of data per image:",
        "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
        "#   POINTS2D[] as (X, Y, POINT3D_ID)",
        f"# Number of images: {len(image_ids)}, mean observations per image: "
        f"{(n_obs / len(image_ids)) if image_ids else 0}",
    ]
    for iid in image_ids:
        view = model.cameras[iid]
        q = rotmat_to_qvec(view.pose.rotation)
        t = view.pose.translation
        name = view.name or f"image{iid:04d}"
        lines.append(" ".join([str(iid), *map(_f, q), *map(_f, t), str(iid), name]))
        lines.append(" ".join(f"{_f(xy[0])} {_f(xy[1])} {pid}" for xy, pid in per_image[iid]))
    (path / "images.txt").write_text("\n".join(lines) + "\n")

    errors = reprojection_errors(model)
    pids, _, _ = model.observations_array()
    mean_err = {}
    for pid in sorted(model.tracks):
        e = errors[pids == pid]
        mean_err[pid] = float(np.mean(e)) if e.size else 0.0
    lines = [
        "# 3D point list with one line of data per point:",
        "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)",
        f"# Number of points: {len(model.tracks)}",
    ]
    for pid in sorted(model.tracks):
        X = model.points[pid]
        track = " ".join(f"{o.image_id} {point2d_idx[(o.image_id, pid)]}" for o in model.tracks[pid].observations)
        lines.append(f"{pid} {_f(X[0])} {_f(X[1])} {_f(X[2])} 128 128 128 {_f(mean_err[pid])} {track}")
    (path / "points3D.txt").write_text("\n".join(lines) + "\n")

    lines = ["# POINT3D_ID REFERENCE_IMAGE_ID (-1 if unset) then (IMAGE_ID PROVENANCE) per observation"]
    for pid in sorted(model.tracks):
        t = model.tracks[pid]
        ref = -1 if t.reference is None else t.reference
        lines.append(" ".join([str(pid), str(ref)] + [f"{o.image_id} {o.provenance.value}" for o in t.observations]))
    (path / "tracks_meta.txt").write_text("\n".join(lines) + "\n")


def _data_lines(p: Path):
    return [line for line in p.read_text().splitlines() if line.strip() and not line.startswith("#")]


def read_model(path) -> SceneModel:
    path = Path(path)
    intrinsics = {}
    for line in _data_lines(path / "cameras.txt"):
        parts = line.split()
        cam_id, model_name, w, h = int(parts[0]), parts[1], int(parts[2]), int(parts[3])
        params = [float(v) for v in parts[4:]]
        if model_name == "PINHOLE":
            fx, fy, cx, cy = params[:4]
        elif model_name == "SIMPLE_PINHOLE":
            fx, cx, cy = params[:3]
            fy = fx
        else:
            raise ValueError(f"unsupported camera model {model_name}")
        intrinsics[cam_id] = CameraIntrinsics(fx, fy, cx, cy, w, h)

    model = SceneModel()
    obs_xy = {}
    # images.txt alternates pose lines and (possibly empty) 2D point lines
    raw = [line for line in (path / "images.txt").read_text().splitlines() if not line.startswith("#")]
    i = 0
    while i < len(raw):
        if not raw[i].strip():
            i += 1
            continue
        parts = raw[i].split()
        iid = int(parts[0])
        q = [float(v) for v in parts[1:5]]
        t = [float(v) for v in parts[5:8]]
        cam_id = int(parts[8])
        name = " ".join(parts[9:])
        pose = CameraPose(qvec_to_rotmat(q), t)
        model.cameras[iid] = ImageView(pose, intrinsics[cam_id], name)
        pts = raw[i + 1].split() if i + 1 < len(raw) else []
        xy = []
        for j in range(0, len(pts), 3):
            xy.append((float(pts[j]), float(pts[j + 1]), int(pts[j + 2])))
        obs_xy[iid] = xy
        i += 2

    for line in _data_lines(path / "points3D.txt"):
        parts = line.split()
        pid = int(parts[0])
        model.points[pid] = np.array([float(v) for v in parts[1:4]])
        elems = parts[8:]
        observations = []
        for j in range(0, len(elems), 2):
            iid, idx = int(elems[j]), int(elems[j + 1])
            x, y, _ = obs_xy[iid][idx]
            observations.append(Observation(iid, (x, y)))
        model.tracks[pid] = Track(pid, observations)

    meta = path / "tracks_meta.txt"
    if meta.exists():
        for line in _data_lines(meta):
            parts = line.split()
            pid, ref = int(parts[0]), int(parts[1])
            if pid not in model.tracks:
                continue
            track = model.tracks[pid]
            track.reference = None if ref < 0 else ref
            prov = {int(parts[j]): parts[j + 1] for j in range(2, len(parts), 2)}
            for o in track.observations:
                if o.image_id in prov:
                    o.provenance = type(o.provenance)(prov[o.image_id])
    return model
