import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densesfm.errors import NonPositiveConfidence, SingularSystem
from densesfm.refine import (
    FeaturePatch,
    MatchOutput,
    RefineConfig,
    ReferenceDecoder,
    TensorFeatureProvider,
    anchor_grid,
    confidence_loss,
    cosine_kernel,
    gp_posterior_mean,
    patch_coordinates,
    patch_encodings,
    positional_encoding,
    read_feature_tensor,
    reference_decoder,
    refine_tracks,
    regress_track,
    write_feature_tensor,
)
from densesfm.synth import SynthConfig, SyntheticFeatureProvider, generate_scene
from densesfm.tracks import Observation, Provenance, SceneModel, Track, select_reference_view


def patch(grid, view=0, center=(0.0, 0.0)):
    return FeaturePatch(view, np.asarray(grid, dtype=float), np.asarray(center, dtype=float))


# -- positional encoding -------------------------------------------------------------


def test_encoding_at_center():
    e = positional_encoding([0.0, 0.0], 8)
    assert e.shape == (32,)
    assert np.all(e[0::2] == 0.0) and np.all(e[1::2] == 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.integers(1, 10))
def test_encoding_per_term(x, y, n):
    e = positional_encoding([x, y], n)
    assert e.shape == (4 * n,)
    for k in range(n):
        a = 2**k * math.pi
        assert np.allclose(e[4 * k : 4 * k + 4], [math.sin(a * x), math.cos(a * x), math.sin(a * y), math.cos(a * y)], atol=1e-12)


def test_patch_encodings_match_pointwise():
    p = 5
    coords = patch_coordinates(p)
    assert coords[0].tolist() == [-1.0, -1.0] and coords[p * p // 2].tolist() == [0.0, 0.0]
    enc = patch_encodings(p, 4)
    for i, c in enumerate(coords):
        assert np.allclose(enc[i], positional_encoding(c, 4), atol=1e-12)


# -- kernel ----------------------------------------------------------------------------


def test_kernel_cases():
    f = np.array([1.0, 2.0, 3.0])
    assert cosine_kernel(f, f, tau=10, eps=1e-12) == pytest.approx(1.0, abs=1e-9)
    assert cosine_kernel([1, 0], [0, 1], tau=10) == pytest.approx(math.exp(-10), rel=1e-12)
    assert cosine_kernel(f, -f, tau=5, eps=1e-12) == pytest.approx(math.exp(-10), rel=1e-9)


vec = st.lists(st.floats(-10, 10), min_size=4, max_size=4).map(np.array).filter(lambda v: np.linalg.norm(v) >= 1)


@settings(max_examples=60, deadline=None)
@given(vec, vec, st.floats(0.1, 20), st.floats(0.01, 100))
def test_kernel_symmetric_bounded_scale_invariant(a, b, tau, s):
    k = cosine_kernel(a, b, tau, 1e-12)
    assert k == pytest.approx(cosine_kernel(b, a, tau, 1e-12), rel=1e-12)
    assert 0 < k <= 1 + 1e-12
    assert cosine_kernel(s * a, b, tau, 1e-12) == pytest.approx(k, rel=1e-6)


# -- GP posterior mean -------------------------------------------------------------------


def dense_oracle(ref, query, sigma_n, tau, eps, n):
    p, _, c = query.grid.shape
    fr, fq = ref.grid.reshape(-1, c), query.grid.reshape(-1, c)
    krq = np.array([[cosine_kernel(a, b, tau, eps) for b in fq] for a in fr])
    kqq = np.array([[cosine_kernel(a, b, tau, eps) for b in fq] for a in fq])
    chi = np.stack([positional_encoding(x, n) for x in patch_coordinates(p)])
    return (krq @ np.linalg.inv(kqq + sigma_n**2 * np.eye(p * p)) @ chi).reshape(p, p, -1)


def test_gp_identity_for_orthogonal_features():
    p = 3
    q = patch(np.eye(p * p).reshape(p, p, p * p))
    mu = gp_posterior_mean(q, q, sigma_n=0.0, tau=10.0, eps=1e-6, num_freqs=4)
    chi = patch_encodings(p, 4).reshape(p, p, -1)
    assert np.max(np.abs(mu - chi)) < 1e-6


def test_gp_single_pixel_closed_form():
    fr, fq = np.array([1.0, 0.5]), np.array([0.3, 1.0])
    s = 0.4
    mu = gp_posterior_mean(patch(fr.reshape(1, 1, 2)), patch(fq.reshape(1, 1, 2)), s, 10.0, 1e-6, 3)
    krq = cosine_kernel(fr, fq, 10.0, 1e-6)
    kqq = cosine_kernel(fq, fq, 10.0, 1e-6)
    expected = krq / (kqq + s * s) * positional_encoding([0.0, 0.0], 3)
    assert np.max(np.abs(mu.ravel() - expected)) < 1e-12


@pytest.mark.parametrize("p", [1, 3, 5, 7])
def test_gp_matches_dense_inverse(p, rng):
    ref = patch(rng.normal(size=(p, p, 6)))
    query = patch(rng.normal(size=(p, p, 6)))
    mu = gp_posterior_mean(ref, query, math.sqrt(0.1), 10.0, 1e-6, 8)
    assert np.max(np.abs(mu - dense_oracle(ref, query, math.sqrt(0.1), 10.0, 1e-6, 8))) < 1e-8


def test_gp_singular_without_noise():
    q = patch(np.ones((3, 3, 4)))
    with pytest.raises(SingularSystem):
        gp_posterior_mean(q, q, sigma_n=0.0)


# -- decoder -------------------------------------------------------------------------------


@pytest.mark.parametrize("dx, dy", [(0, 0), (2, -1), (-3, 3), (1, 2)])
def test_decoder_recovers_integer_shift(dx, dy, rng):
    p, m = 15, 3
    big = rng.normal(size=(p + 2 * m, p + 2 * m, 16))
    ref = patch(big[m : m + p, m : m + p])
    query = patch(big[m - dy : m - dy + p, m - dx : m - dx + p])
    out = ReferenceDecoder(anchor_extent=7.0)(ref, query, None, 7, 7)
    peak = int(np.argmax(out.prob[:, 3, 3]))
    assert np.allclose(anchor_grid(7, 7.0)[peak], [dx, dy])


def test_decoder_constant_features_and_shapes(rng):
    c = patch(np.ones((9, 9, 4)))
    out = reference_decoder(c, c, None, C=5, w=7)
    assert out.prob.shape == (25, 7, 7) and out.conf.shape == (7, 7)
    assert np.allclose(out.prob, out.prob[0, 0, 0]) and np.all(out.conf == 0)
    r = patch(rng.normal(size=(9, 9, 4)))
    out = reference_decoder(r, patch(rng.normal(size=(9, 9, 4))), None, C=7, w=5, anchor_extent=7.0)
    assert out.prob.shape == (49, 5, 5) and np.all(out.conf >= 0)


def test_decoder_embedding_term_uses_embedding(rng):
    ref = patch(rng.normal(size=(7, 7, 4)))
    query = patch(rng.normal(size=(7, 7, 4)))
    emb = gp_posterior_mean(ref, query)
    plain = ReferenceDecoder()(ref, query, None, 5, 5)
    blended = ReferenceDecoder(embedding_weight=0.5)
    assert blended.needs_embedding and not ReferenceDecoder().needs_embedding
    assert not np.allclose(blended(ref, query, emb, 5, 5).prob, plain.prob)


# -- regression ------------------------------------------------------------------------------


def one_hot_output(channel, C=7, w=7, scale=1e3):
    prob = np.zeros((C * C, w, w))
    prob[channel] = scale
    return MatchOutput(prob, np.ones((w, w)))


@pytest.mark.parametrize("mode", ["softmax", "local"])
def test_regress_one_hot(mode):
    anchors = anchor_grid(7, 7.0)
    for ch in (0, 10, 24, 48):
        _, q = regress_track([one_hot_output(ch)], 7.0, mode=mode)
        assert np.array_equal(q[0], anchors[ch])


def test_regress_uniform_logits_center():
    out = MatchOutput(np.zeros((49, 7, 7)), np.zeros((7, 7)))
    ref, q = regress_track([out], 7.0)
    assert np.array_equal(ref, [-3.0, -3.0])  # all-zero confidence: first pixel
    assert np.allclose(q[0], [0.0, 0.0], atol=1e-12)


def test_regress_reference_is_argmax_of_summed_confidence(rng):
    for _ in range(20):
        c1 = np.full((7, 7), 0.5)
        c2 = np.full((7, 7), 0.5)
        c1[tuple(rng.integers(0, 7, 2))] = 0.9
        c2[tuple(rng.integers(0, 7, 2))] = 0.3
        c2 += rng.uniform(0, 0.2, (7, 7))
        outs = [MatchOutput(np.zeros((49, 7, 7)), c1), MatchOutput(np.zeros((49, 7, 7)), c2)]
        ref, _ = regress_track(outs, 7.0)
        total = c1 + c2
        best = max(((total[r, c], -r, -c) for r in range(7) for c in range(7)))
        assert ref.tolist() == [-best[2] - 3.0, -best[1] - 3.0]


def test_regress_requires_outputs():
    with pytest.raises(ValueError):
        regress_track([])


# -- track refinement ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def textured_scene():
    return generate_scene(SynthConfig(seed=7, n_cameras=6, n_points=40, disc_radius=0.12))


def test_refine_moves_queries_toward_truth(textured_scene):
    scene = textured_scene
    gt = scene.model
    rng = np.random.default_rng(11)
    model = SceneModel(gt.cameras, {}, {})
    truth = {}
    for pid, t in gt.tracks.items():
        # keep views that actually see this disc at its center
        seen = [o for o in t.observations if _owner(scene, o.image_id, o.xy) == pid]
        if len(seen) < 2:
            continue
        t = Track(pid, seen)
        ref = select_reference_view(t, gt)
        obs = []
        for o in t.observations:
            truth[(pid, o.image_id)] = o.xy.copy()
            off = np.zeros(2) if o.image_id == ref else rng.uniform(-1, 1, 2) * 2 / np.sqrt(2)
            obs.append(Observation(o.image_id, o.xy + off))
        model.points[pid] = gt.points[pid].copy()
        model.tracks[pid] = Track(pid, obs)
    cfg = RefineConfig(threads=2)
    out = refine_tracks(model, SyntheticFeatureProvider(scene), ReferenceDecoder(anchor_extent=cfg.anchor_extent), cfg)
    closer = total = 0
    for pid, t in out.tracks.items():
        ref = t.reference
        shift = t.observation(ref).xy - model.tracks[pid].observation(ref).xy
        for o in t.observations:
            assert o.provenance == Provenance.REFINED
            if o.image_id == ref:
                continue
            # the reference may snap to a neighbouring pixel; compare in its frame
            before = np.linalg.norm(model.tracks[pid].observation(o.image_id).xy - truth[(pid, o.image_id)])
            target = truth[(pid, o.image_id)]
            after = np.linalg.norm(o.xy - target - _transfer(scene, pid, ref, o.image_id, shift))
            closer += after < before
            total += 1
    assert total > 50
    assert closer / total >= 0.9


def _owner(scene, iid, xy):
    from densesfm.synth import _pixel_dirs

    v = scene.cameras[iid]
    d = _pixel_dirs(v, np.array([xy[0]]), np.array([xy[1]]))
    return int(scene.discs.cast(v.pose.center, d)[0][0])


def _transfer(scene, pid, ref, qid, shift):
    """First-order image motion in ``qid`` caused by moving the reference keypoint by ``shift``."""
    if not np.any(shift):
        return np.zeros(2)
    from densesfm.synth import surface_points

    views = scene.cameras
    base = scene.model.tracks[pid].observation(ref).xy
    X = surface_points(scene, ref, [base + shift])[0]
    if not np.all(np.isfinite(X)):
        return np.zeros(2)
    v = views[qid]
    xc = v.pose.transform(X)
    uv = np.array([v.intrinsics.fx * xc[0] / xc[2] + v.intrinsics.cx, v.intrinsics.fy * xc[1] / xc[2] + v.intrinsics.cy])
    return uv - scene.model.tracks[pid].observation(qid).xy


class DeltaDecoder:
    """Peaked logits at the central anchor and confidence only at the window center."""

    needs_embedding = False

    def __call__(self, ref_t, query_t, emb, C, w):
        prob = np.zeros((C * C, w, w))
        prob[(C * C) // 2] = 50.0
        conf = np.zeros((w, w))
        conf[w // 2, w // 2] = 1.0
        return MatchOutput(prob, conf)


class ConstProvider:
    def patch(self, image_id, center, p, stride=1.0):
        return FeaturePatch(image_id, np.ones((p, p, 2)), center, stride)


def test_refine_fixed_point_and_short_tracks(textured_scene):
    gt = textured_scene.model
    model = gt.copy()
    short = max(model.tracks) + 1
    model.points[short] = np.zeros(3)
    model.tracks[short] = Track(short, [Observation(0, [5.0, 5.0])])
    out = refine_tracks(model, ConstProvider(), DeltaDecoder())
    for pid, t in out.tracks.items():
        for o in t.observations:
            assert np.linalg.norm(o.xy - model.tracks[pid].observation(o.image_id).xy) <= 1.0
    assert out.tracks[short].observations[0].provenance == Provenance.MATCHED


def test_refine_failures_recorded(textured_scene):
    class Failing:
        def patch(self, image_id, center, p, stride=1.0):
            raise KeyError(image_id)

    diag = []
    out = refine_tracks(textured_scene.model, Failing(), DeltaDecoder(), diagnostics=diag)
    assert len(diag) == sum(len(t) >= 2 for t in textured_scene.model.tracks.values())
    assert all(o.provenance == Provenance.MATCHED for t in out.tracks.values() for o in t.observations)


# -- loss --------------------------------------------------------------------------------------


def test_loss_values():
    assert confidence_loss([[2.0, 0.0]], [[0.0, 0.0]], [1.0], 20) == pytest.approx(2.0)
    assert confidence_loss([[1.0, 1.0]], [[1.0, 1.0]], [math.e], 20) == pytest.approx(-20.0)
    with pytest.raises(NonPositiveConfidence):
        confidence_loss([[0, 0]], [[0, 0]], [0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_loss_gradient_finite_differences(seed, n):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n, 2)) * 3
    g = rng.normal(size=(n, 2)) * 3
    s = rng.uniform(0.2, 3.0, n)
    _, gp, gs = confidence_loss(p, g, s, 20.0, return_grad=True)
    h = 1e-6
    for i in range(n):
        for j in range(2):
            dp = np.zeros_like(p)
            dp[i, j] = h
            fd = (confidence_loss(p + dp, g, s) - confidence_loss(p - dp, g, s)) / (2 * h)
            assert fd == pytest.approx(gp[i, j], rel=1e-5, abs=1e-8)
        ds = np.zeros_like(s)
        ds[i] = h
        fd = (confidence_loss(p, g, s + ds) - confidence_loss(p, g, s - ds)) / (2 * h)
        assert fd == pytest.approx(gs[i], rel=1e-5, abs=1e-8)


# -- feature tensors ---------------------------------------------------------------------------


def test_feature_tensor_round_trip_and_provider(tmp_path, rng):
    fmap = rng.normal(size=(20, 30, 3)).astype(np.float32)
    write_feature_tensor(tmp_path / "img.fpt", fmap)
    back = read_feature_tensor(tmp_path / "img.fpt")
    assert np.array_equal(back, fmap.astype(float))
    prov = TensorFeatureProvider.from_directory(tmp_path, {"img": 4})
    pt = prov.patch(4, [10.0, 8.0], 3)
    assert np.array_equal(pt.grid[1, 1], back[8, 10])
    assert np.array_equal(pt.grid[0, 2], back[7, 11])
