import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densesfm.extend import extend_tracks
from densesfm.geometry import CameraPose, fundamental_matrix, project, sampson_distance
from densesfm.splatvis import Gaussian3D, init_gaussians
from densesfm.tracks import ImageView, Provenance, SceneModel, Track, track_stats

from conftest import intrinsics, model_from_points, ring_views


def spread_points(n, seed):
    """Points on a coarse jittered lattice so no SfM Gaussian hides another."""
    rng = np.random.default_rng(seed)
    g = np.linspace(-0.6, 0.6, 4)
    lattice = np.stack(np.meshgrid(g, g, [-0.3, 0.3]), axis=-1).reshape(-1, 3)
    pick = rng.choice(len(lattice), size=n, replace=False)
    return lattice[pick] + rng.uniform(-0.05, 0.05, (n, 3))


def pairwise_model(views, points):
    """Keep only the first two observations of every full-covisibility track."""
    full = model_from_points(views, points)
    model = SceneModel(dict(views))
    for pid, t in full.tracks.items():
        model.points[pid] = full.points[pid].copy()
        model.tracks[pid] = Track(pid, t.observations[:2])
    return model, full


def projection_oracle(model):
    """Every camera with positive depth and an in-image projection, per point."""
    out = {}
    for pid, X in model.points.items():
        ids = []
        for iid, v in sorted(model.cameras.items()):
            if v.pose.transform(X)[2] > 0 and v.intrinsics.contains(project(X, v.pose, v.intrinsics)):
                ids.append(iid)
        out[pid] = ids
    return out


def test_covisible_scene_extends_to_all_views():
    views = ring_views(6)
    model, _ = pairwise_model(views, spread_points(12, 0))
    assert all(len(t) == 2 for t in model.tracks.values())
    ext = extend_tracks(model, init_gaussians(model))
    oracle = projection_oracle(model)
    for pid, t in ext.tracks.items():
        assert t.image_ids == oracle[pid] and len(t) == 6
        for o in t.observations:
            if o.provenance == Provenance.EXTENDED:
                v = views[o.image_id]
                assert np.allclose(o.xy, project(model.points[pid], v.pose, v.intrinsics), atol=1e-9)
    assert track_stats(ext).mean_length == pytest.approx(np.mean([len(v) for v in oracle.values()]))


def test_occluder_excludes_single_camera():
    views = ring_views(6)
    X = np.zeros(3)
    model, _ = pairwise_model(views, [X])
    gs = init_gaussians(model)
    # an opaque-ish sheet halfway between camera 3 and the point
    c = views[3].pose.center
    R = views[3].pose.rotation.T
    gs.add(Gaussian3D(0.5 * c, R, [0.2, 0.2, 0.01], 0.9))
    ext = extend_tracks(model, gs)
    assert ext.tracks[0].image_ids == [0, 1, 2, 4, 5]


def test_point_behind_camera_is_skipped():
    k = intrinsics()
    views = {
        0: ImageView(CameraPose.from_center(np.eye(3), [0, 0, -5]), k),
        1: ImageView(CameraPose.from_center(np.eye(3), [1, 0, -5]), k),
        2: ImageView(CameraPose.from_center(np.eye(3), [0, 0, 5]), k),
    }
    model, _ = pairwise_model(views, [np.zeros(3)])
    ext = extend_tracks(model, init_gaussians(model))
    assert ext.tracks[0].image_ids == [0, 1]


def test_epipolar_gate_matches_sampson_oracle():
    views = ring_views(6)
    model, _ = pairwise_model(views, [np.zeros(3)])
    model.tracks[0].observations[1].xy = model.tracks[0].observations[1].xy + [10.0, 10.0]
    ext = extend_tracks(model, init_gaussians(model), epi_thresh=4.0)
    expected = [o.image_id for o in model.tracks[0].observations]
    for iid, v in views.items():
        if iid in expected:
            continue
        uv = project(model.points[0], v.pose, v.intrinsics)
        d = [
            sampson_distance(fundamental_matrix(views[o.image_id].pose, v.pose, views[o.image_id].intrinsics, v.intrinsics), o.xy, uv)
            for o in model.tracks[0].observations
        ]
        if max(d) <= 4.0:
            expected.append(iid)
    assert ext.tracks[0].image_ids == sorted(expected)
    assert len(ext.tracks[0]) < 6


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(4, 8))
def test_superset_monotone_idempotent(seed, n_cams):
    views = ring_views(n_cams)
    rng = np.random.default_rng(seed)
    model, _ = pairwise_model(views, spread_points(10, seed))
    for t in model.tracks.values():
        for o in t.observations:
            o.xy = o.xy + rng.normal(scale=0.5, size=2)
    before = {pid: [(o.image_id, tuple(o.xy)) for o in t.observations] for pid, t in model.tracks.items()}
    gs = init_gaussians(model)
    ext = extend_tracks(model, gs)
    for pid, obs in before.items():
        after = {(o.image_id, tuple(o.xy)) for o in ext.tracks[pid].observations}
        assert set(obs) <= after
        ids = ext.tracks[pid].image_ids
        assert len(ids) == len(set(ids))
    assert track_stats(ext).mean_length >= track_stats(model).mean_length
    again = extend_tracks(ext, gs)
    for pid, t in ext.tracks.items():
        assert [(o.image_id, tuple(o.xy)) for o in again.tracks[pid].observations] == [
            (o.image_id, tuple(o.xy)) for o in t.observations
        ]


def test_threads_do_not_change_result():
    views = ring_views(6)
    model, _ = pairwise_model(views, spread_points(12, 5))
    gs = init_gaussians(model)
    a = extend_tracks(model, gs, threads=1)
    b = extend_tracks(model, gs, threads=4)
    for pid in a.tracks:
        assert [(o.image_id, tuple(o.xy)) for o in a.tracks[pid].observations] == [
            (o.image_id, tuple(o.xy)) for o in b.tracks[pid].observations
        ]
