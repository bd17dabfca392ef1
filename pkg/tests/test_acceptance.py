"""Acceptance checks; each test prints one ``criterion N: PASS|FAIL`` line."""

import filecmp
import math
import time

import numpy as np
import pytest

from densesfm.cli import main
from densesfm.evaluation import accuracy_completeness, align_models, pose_auc, pose_errors
from densesfm.extend import extend_tracks
from densesfm.geometry import CameraIntrinsics, CameraPose, fundamental_matrix, project, sampson_distance
from densesfm.matchio import mutual_verify, nms_sample
from densesfm.optimize import BAConfig, bundle_adjust, filter_outliers, observation_jacobian, perturb_camera, refine_loop
from densesfm.refine import (
    FeaturePatch,
    RefineConfig,
    ReferenceDecoder,
    confidence_loss,
    cosine_kernel,
    gp_posterior_mean,
    patch_coordinates,
    positional_encoding,
)
from densesfm.splatvis import composite_visibility, footprint_pixels, init_gaussians, pixel_rays
from densesfm.synth import (
    SynthConfig,
    SyntheticFeatureProvider,
    generate_scene,
    perturb_cameras,
    render_discs,
    surface_distance,
    synth_dense_matcher,
)
from densesfm.tracks import (
    ImageView,
    SceneModel,
    Track,
    build_tracks,
    mean_reprojection_error,
    quantize_matches,
    track_stats,
    triangulate_tracks,
)

from test_splatvis import K, POSE, oracle_score, random_configuration, target_set, wall


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return report


# -- 1: GP posterior mean vs dense inverse ------------------------------------------------


def dense_gp(ref, query, sigma_n, tau, eps, n):
    p, _, c = query.shape
    fr, fq = ref.reshape(-1, c), query.reshape(-1, c)
    krq = np.array([[cosine_kernel(a, b, tau, eps) for b in fq] for a in fr])
    kqq = np.array([[cosine_kernel(a, b, tau, eps) for b in fq] for a in fq])
    chi = np.stack([positional_encoding(x, n) for x in patch_coordinates(p)])
    return (krq @ np.linalg.inv(kqq + sigma_n**2 * np.eye(p * p)) @ chi).reshape(p, p, -1)


def test_criterion_1_gp_oracle(verdict):
    rng = np.random.default_rng(1)
    sizes = [(1, 3, 5, 7)[i % 4] for i in range(50)]
    cases = [(rng.normal(size=(p, p, 8)), rng.normal(size=(p, p, 8))) for p in sizes]
    sigma = math.sqrt(0.1)
    t0 = time.perf_counter()
    means = [gp_posterior_mean(FeaturePatch(0, r, np.zeros(2)), FeaturePatch(1, q, np.zeros(2)), sigma, 10.0, 1e-6, 8) for r, q in cases]
    elapsed = time.perf_counter() - t0
    worst = max(float(np.max(np.abs(mu - dense_gp(r, q, sigma, 10.0, 1e-6, 8)))) for mu, (r, q) in zip(means, cases))
    verdict(1, worst <= 1e-8 and elapsed < 5.0, f"max_abs={worst:.2e} runtime={elapsed:.2f}s patches=50")


# -- 2: composited visibility vs brute-force ordering -----------------------------------


def test_criterion_2_visibility_oracle(verdict):
    mismatches = 0
    for seed in range(100):
        gs = random_configuration(seed)
        if composite_visibility(gs, 0, POSE, K)[1] != oracle_score(gs, 0, POSE, K):
            mismatches += 1
    one = target_set()
    single = target_set()
    single.add(wall(2.0, 0.8))
    double = target_set()
    double.add(wall(2.0, 0.3))
    double.add(wall(3.0, 0.4))
    scores = [composite_visibility(g, 0, POSE, K)[1] for g in (one, single, double)]
    analytic = scores == [1.0, 1.0 - 0.8, (1.0 - 0.3) * (1.0 - 0.4)]
    verdict(2, mismatches == 0 and analytic, f"oracle_mismatches={mismatches}/100 analytic={[round(s, 12) for s in scores]}")


# -- 3: finite-difference gradient checks --------------------------------------------------


def rel_err(fd, an):
    return float(np.max(np.abs(fd - an)) / max(np.max(np.abs(an)), 1e-12))


def test_criterion_3_gradients(verdict):
    rng = np.random.default_rng(3)
    h = 1e-6
    worst_loss = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 8))
        p, g = rng.normal(size=(n, 2)) * 3, rng.normal(size=(n, 2)) * 3
        s = rng.uniform(0.2, 3.0, n)
        _, gp, gs = confidence_loss(p, g, s, 20.0, return_grad=True)
        fd_p = np.zeros_like(p)
        fd_s = np.zeros_like(s)
        for i in range(n):
            for j in range(2):
                d = np.zeros_like(p)
                d[i, j] = h
                fd_p[i, j] = (confidence_loss(p + d, g, s) - confidence_loss(p - d, g, s)) / (2 * h)
            d = np.zeros_like(s)
            d[i] = h
            fd_s[i] = (confidence_loss(p, g, s + d) - confidence_loss(p, g, s - d)) / (2 * h)
        worst_loss = max(worst_loss, rel_err(fd_p, gp), rel_err(fd_s, gs))
    worst_jac = 0.0
    for _ in range(100):
        f = rng.uniform(100, 400)
        k = CameraIntrinsics(f, f * rng.uniform(0.9, 1.1), rng.uniform(80, 160), rng.uniform(60, 120), 240, 180)
        center = rng.normal(size=3)
        center *= rng.uniform(3, 6) / np.linalg.norm(center)
        view = ImageView(CameraPose.look_at(center, rng.uniform(-0.3, 0.3, 3)), k)
        X = rng.uniform(-1, 1, 3)
        _, jc, jp = observation_jacobian(X, view)
        fd_c = np.zeros_like(jc)
        for c in range(jc.shape[1]):
            d = np.zeros(jc.shape[1])
            d[c] = h
            fd_c[:, c] = (observation_jacobian(X, perturb_camera(view, d))[0] - observation_jacobian(X, perturb_camera(view, -d))[0]) / (2 * h)
        fd_x = np.stack([(observation_jacobian(X + d, view)[0] - observation_jacobian(X - d, view)[0]) / (2 * h) for d in np.eye(3) * h], axis=1)
        worst_jac = max(worst_jac, rel_err(fd_c, jc), rel_err(fd_x, jp))
    ok = worst_loss <= 1e-5 and worst_jac <= 1e-5
    verdict(3, ok, f"loss_rel={worst_loss:.2e} jacobian_rel={worst_jac:.2e} instances=100+100")


# -- 4: track extension ---------------------------------------------------------------------


def pairwise_from_truth(scene):
    """First two ground-truth observations of every point, at their true positions."""
    gt = scene.model
    model = SceneModel(dict(gt.cameras))
    for pid, t in gt.tracks.items():
        if len(t) >= 2:
            model.points[pid] = gt.points[pid].copy()
            model.tracks[pid] = Track(pid, t.observations[:2])
    return model


def projection_oracle(model):
    out = {}
    for pid, X in model.points.items():
        out[pid] = [
            iid
            for iid, v in sorted(model.cameras.items())
            if v.pose.transform(X)[2] > 0 and v.intrinsics.contains(project(X, v.pose, v.intrinsics))
        ]
    return out


def projection_oracle_one(model, pid, iid):
    X = model.points[pid]
    v = model.cameras[iid]
    return [iid] if v.pose.transform(X)[2] > 0 and v.intrinsics.contains(project(X, v.pose, v.intrinsics)) else []


def splat_oracle_visible(gs, pid, view, eps_v):
    """Score every Gaussian on every footprint ray, order by (distance, index), multiply in order."""
    target = gs.point_index[pid]
    means = np.array([g.mean for g in gs.gaussians])
    inv = np.stack([g.rotation.T / g.scale[:, None] for g in gs.gaussians])
    opac = np.array([g.opacity for g in gs.gaussians])
    k, pose = view.intrinsics, view.pose
    xc = pose.transform(means[target])
    uv = np.array([k.fx * xc[0] / xc[2] + k.cx, k.fy * xc[1] / xc[2] + k.cy])
    radius = 2.0 * float(np.max(gs.gaussians[target].scale)) * max(k.fx, k.fy) / xc[2]
    best = 0.0
    o = pose.center
    a = np.einsum("gij,gj->gi", inv, o - means)
    for d in pixel_rays(footprint_pixels(uv, radius, k), pose, k):
        b = np.einsum("gij,j->gi", inv, d)
        m2 = np.maximum(np.sum(a * a, 1) - np.sum(a * b, 1) ** 2 / np.sum(b * b, 1), 0.0)
        alpha = opac * np.exp(-0.5 * m2)
        t = (means - o) @ d
        front = sorted((t[i], i) for i in range(len(t)) if i != target and t[i] > 0 and (t[i], i) < (t[target], target))
        best = max(best, math.prod(1.0 - alpha[i] for _, i in front))
    return best > eps_v


def test_criterion_4_extension(verdict):
    scene = generate_scene(SynthConfig(seed=1, n_cameras=12, n_points=300))
    model = pairwise_from_truth(scene)
    oracle = projection_oracle(model)
    full = np.mean([len(v) == 12 for v in oracle.values()])
    base = track_stats(model).mean_length
    ext = extend_tracks(model, init_gaussians(model))
    mean = track_stats(ext).mean_length
    oracle_mean = sum(len(v) for v in oracle.values()) / len(oracle)
    same_tracks = all(ext.tracks[p].image_ids == oracle[p] for p in oracle)
    trend = full >= 0.8 and mean >= 1.8 * base and mean == oracle_mean and same_tracks

    occ_scene = generate_scene(SynthConfig(seed=1, n_cameras=12, n_points=300, n_occluders=8))
    occ_model = pairwise_from_truth(occ_scene)
    gs = init_gaussians(occ_model).extend(occ_scene.occluders)
    occ_ext = extend_tracks(occ_model, gs)
    mismatches = excluded = 0
    for pid, t in occ_model.tracks.items():
        for iid, v in sorted(occ_model.cameras.items()):
            if iid in t.image_ids or iid not in projection_oracle_one(occ_model, pid, iid):
                continue
            uv = project(occ_model.points[pid], v.pose, v.intrinsics)
            epi = all(
                sampson_distance(fundamental_matrix(occ_model.cameras[o.image_id].pose, v.pose, occ_model.cameras[o.image_id].intrinsics, v.intrinsics), o.xy, uv) <= 4.0
                for o in t.observations
            )
            expect = epi and splat_oracle_visible(gs, pid, v, 0.5)
            excluded += not expect
            mismatches += expect != (iid in occ_ext.tracks[pid].image_ids)
    ok = trend and mismatches == 0 and excluded > 0
    verdict(
        4,
        ok,
        f"full_covis={full:.2f} pairwise={base:.3f} extended={mean:.4f} oracle={oracle_mean:.4f} "
        f"ratio={mean / base:.2f} occluder_exclusions={excluded} mismatches={mismatches}",
    )


# -- 5 and 6: end-to-end on a noisy synthetic scene ------------------------------------------

E2E = SynthConfig(seed=3, n_cameras=8, n_points=60, disc_radius=0.12, sigma=0.5, outlier_rate=0.05, pair_neighbors=2)


def verified_matches(scene):
    renders = {i: render_discs(scene, i) for i in scene.cameras}
    sets = []
    for pair in scene.pairs():
        m = synth_dense_matcher(scene, pair, renders=renders)
        sets.append(mutual_verify(m.ab, m.ba, nms_sample(m.ab, 4), 3.0))
    return sets


def propagated_bound(model, pid, sigma, n_sigma=3.0):
    """n_sigma times the largest standard deviation of the point under isotropic pixel noise."""
    JtJ = np.zeros((3, 3))
    for o in model.tracks[pid].observations:
        _, _, jp = observation_jacobian(model.points[pid], model.cameras[o.image_id])
        JtJ += jp.T @ jp
    return n_sigma * sigma * math.sqrt(np.max(np.linalg.eigvalsh(np.linalg.inv(JtJ))))


def test_criterion_5_end_to_end(verdict):
    t0 = time.perf_counter()
    scene = generate_scene(E2E)
    cams = perturb_cameras(scene.cameras, 0.5, 0.01, E2E.seed)
    start = triangulate_tracks(cams, build_tracks(verified_matches(scene)))
    history = []
    out = refine_loop(start, SyntheticFeatureProvider(scene), ReferenceDecoder(), 2, RefineConfig(), BAConfig(), history)
    elapsed = time.perf_counter() - t0
    errs = [mean_reprojection_error(start)] + [h["mean_error"] for h in history]
    reduction = 1.0 - errs[-1] / errs[0]
    monotone = all(b <= a for a, b in zip(errs, errs[1:]))
    aligned = align_models(out, scene.model).apply_model(out)
    pids = sorted(aligned.points)
    dist = surface_distance(scene, np.array([aligned.points[p] for p in pids]))
    bound = np.array([propagated_bound(aligned, p, E2E.sigma) for p in pids])
    within = float(np.mean(dist <= bound))
    ok = reduction >= 0.5 and monotone and within >= 0.95 and elapsed < 60.0
    errs_txt = " -> ".join(f"{e:.4f}" for e in errs)
    verdict(5, ok, f"mean_error {errs_txt} reduction={reduction:.1%} within_3sigma={within:.1%} points={len(pids)} runtime={elapsed:.1f}s")


def test_criterion_6_quantized_vs_extension(verdict):
    scene = generate_scene(E2E)
    cams = perturb_cameras(scene.cameras, 0.5, 0.01, E2E.seed)
    sets = verified_matches(scene)

    def adjust(model):
        model, _ = bundle_adjust(model, BAConfig())
        return filter_outliers(model, 3.0)

    def accuracy(model, th=0.01):
        aligned = align_models(model, scene.model).apply_model(model)
        pts = np.array([aligned.points[p] for p in sorted(aligned.points)])
        return float(np.mean(surface_distance(scene, pts) <= th))

    quant = adjust(triangulate_tracks(cams, build_tracks([quantize_matches(s, 4) for s in sets])))
    pair = adjust(triangulate_tracks(cams, build_tracks(sets)))
    ext = adjust(extend_tracks(pair, init_gaussians(pair)))
    nq, ne = len(quant.points), len(ext.points)
    aq, ae = accuracy(quant), accuracy(ext)
    verdict(
        6,
        ne >= nq and ae >= aq,
        f"points quantized={nq} extended={ne} accuracy@1cm quantized={aq:.1%} extended={ae:.1%} "
        f"track_length quantized={track_stats(quant).mean_length:.2f} extended={track_stats(ext).mean_length:.2f}",
    )


# -- 7: mutual verification against the outlier mask ------------------------------------------


def test_criterion_7_mutual_verification(verdict):
    scene = generate_scene(SynthConfig(seed=7, n_cameras=5, n_points=40, width=160, height=120, focal=150.0, disc_radius=0.12))
    renders = {i: render_discs(scene, i) for i in scene.cameras}
    tp = fp = fn = 0
    for pair in scene.pairs():
        m = synth_dense_matcher(scene, pair, sigma=0.0, outlier_rate=0.1, seed=pair[0] * 100 + pair[1], renders=renders)
        s = nms_sample(m.ab, 2)
        kept = {tuple(p) for p in mutual_verify(m.ab, m.ba, s, 3.0).points_a}
        for p in s.points_a:
            inlier = not m.ab_outliers[int(p[1]), int(p[0])]
            hit = tuple(p) in kept
            tp += inlier and hit
            fp += hit and not inlier
            fn += inlier and not hit
    precision = tp / max(tp + fp, 1)
    recall = tp / max(tp + fn, 1)
    verdict(7, precision == 1.0 and recall == 1.0 and tp > 0, f"precision={precision} recall={recall} inliers={tp}")


# -- 8: metric oracles --------------------------------------------------------------------------


def brute_nearest(a, b):
    return np.array([min(math.dist(p, q) for q in b) for p in a])


def trapezoid_auc(errors, t):
    e = sorted(errors)
    n = len(e)
    xs, ys = [0.0], [0.0]
    for i, x in enumerate(e):
        if x >= t:
            break
        xs.append(x)
        ys.append((i + 1) / n)
    xs.append(t)
    ys.append(ys[-1])
    return 100.0 * sum((xs[i + 1] - xs[i]) * (ys[i + 1] + ys[i]) / 2 for i in range(len(xs) - 1)) / t


def test_criterion_8_metric_oracles(verdict):
    rng = np.random.default_rng(8)
    acc_bad = auc_worst = 0
    th = (0.02, 0.05, 0.1)
    for i in range(20):
        a = rng.uniform(0, 1, (int(rng.integers(5, 80)), 3))
        b = rng.uniform(0, 1, (int(rng.integers(5, 80)), 3))
        res = accuracy_completeness(a, b, th)
        da, db = brute_nearest(a, b), brute_nearest(b, a)
        for t in th:
            acc_bad += res[t] != (100.0 * np.sum(da <= t) / len(a), 100.0 * np.sum(db <= t) / len(b))
        gt = {}
        for j in range(int(rng.integers(3, 10))):
            c = rng.normal(size=3)
            gt[j] = ImageView(CameraPose.look_at(4 * c / np.linalg.norm(c), np.zeros(3)), CameraIntrinsics(100, 100, 50, 50, 100, 100))
        pred = perturb_cameras(gt, rng.uniform(0.5, 4.0), rng.uniform(0.005, 0.05), seed=i)
        errs = pose_errors(pred, gt)
        for t, v in pose_auc(pred, gt, (1.0, 3.0, 5.0)).items():
            auc_worst = max(auc_worst, abs(v - trapezoid_auc(errs, t)))
    pts = rng.normal(size=(30, 3))
    ident_acc = all(v == (100.0, 100.0) for v in accuracy_completeness(pts, pts, th).values())
    ident_auc = all(abs(v - 100.0) <= 1e-9 for v in pose_auc(gt, gt).values())
    ok = acc_bad == 0 and auc_worst <= 1e-9 and ident_acc and ident_auc
    verdict(8, ok, f"accuracy_mismatches={acc_bad} auc_max_dev={auc_worst:.1e} identity_100={ident_acc and ident_auc}")


# -- 9: determinism ---------------------------------------------------------------------------

DETERMINISM_CFG = """\
seed = 11
synth.n_cameras = 5
synth.n_points = 20
synth.disc_radius = 0.12
synth.width = 160
synth.height = 120
synth.focal = 150
synth.sigma = 0.5
synth.outlier_rate = 0.05
synth.n_occluders = 3
perturb_rot_deg = 0.5
perturb_trans_frac = 0.01
"""


def test_criterion_9_determinism(verdict, tmp_path):
    cfg = tmp_path / "det.cfg"
    cfg.write_text(DETERMINISM_CFG)
    runs = {"a": "1", "b": "1", "c": "4", "d": "4"}
    for name, threads in runs.items():
        assert main(["pipeline", "--synth", str(cfg), "--out", str(tmp_path / name), "--threads", threads]) == 0
    root = tmp_path / "a"
    files = sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())
    differing = []
    for other in ("b", "c", "d"):
        names = sorted(p.relative_to(tmp_path / other) for p in (tmp_path / other).rglob("*") if p.is_file())
        if names != files:
            differing.append(f"{other}:file-list")
            continue
        differing += [f"{other}:{f}" for f in files if not filecmp.cmp(root / f, tmp_path / other / f, shallow=False)]
    verdict(9, not differing and len(files) > 0, f"files={len(files)} runs=2x threads1 + 2x threads4 differing={differing[:3]}")
