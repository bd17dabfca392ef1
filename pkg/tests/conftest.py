import numpy as np
import pytest

from densesfm.geometry import CameraIntrinsics, CameraPose, project
from densesfm.tracks import ImageView, Observation, SceneModel, Track


def intrinsics(f=100.0, width=200, height=200):
    return CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)


def ring_views(n=6, radius=4.0, height=1.5, f=150.0, width=240, height_px=180):
    views = {}
    for i in range(n):
        a = 2 * np.pi * i / n
        center = np.array([radius * np.cos(a), radius * np.sin(a), height])
        views[i] = ImageView(
            CameraPose.look_at(center, np.zeros(3)), intrinsics(f, width, height_px), f"img{i:03d}"
        )
    return views


def model_from_points(views, points, noise=0.0, rng=None, min_views=2):
    """Model whose tracks hold every in-image projection of each point."""
    rng = rng or np.random.default_rng(0)
    model = SceneModel(dict(views))
    for pid, X in enumerate(points):
        obs = []
        for iid, v in sorted(views.items()):
            if v.pose.transform(X)[2] <= 0:
                continue
            uv = project(X, v.pose, v.intrinsics)
            if v.intrinsics.contains(uv):
                obs.append(Observation(iid, uv + noise * rng.normal(size=2)))
        if len(obs) >= min_views:
            model.points[pid] = np.array(X, dtype=float)
            model.tracks[pid] = Track(pid, obs)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
