"""Pipeline stages over on-disk artifacts.

Every stage reads its inputs from disk and writes its outputs to disk, and
:func:`run_pipeline` chains the very same functions, so running the
subcommands one after another reproduces the pipeline byte for byte.

Layout of a pipeline output directory::

    synth/          scene bundle, initial model and dense fields (synthetic runs)
    verified/       mutually verified sparse matches, one ``.txt`` per pair
    triangulated/   COLMAP-text model from pairwise tracks
    extended/       model after splat-visibility track extension
    refined/        model after the refine -> BA -> filter loop
    model/          final model (copy of the last stage)
    points.ply      final point cloud
    metrics.txt     evaluation report (synthetic runs)
    track_stats.txt per-stage track statistics
"""

from __future__ import annotations

import logging
import shutil
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .colmap import read_model, write_model
from .config import PipelineConfig
from .errors import DenseSfMError, StageError
from .evaluation import accuracy_completeness, align_models, pose_auc, write_report
from .extend import extend_tracks
from .matchio import (
    SparseMatchSet,
    mutual_verify,
    nms_sample,
    pair_name,
    parse_pair_name,
    read_dense_field,
    read_matches,
    write_dense_field,
    write_matches,
)
from .optimize import bundle_adjust, filter_outliers, refine_loop
from .ply import write_point_cloud
from .refine import TensorFeatureProvider
from .splatvis import GaussianSet, init_gaussians, read_gaussians
from .synth import (
    SynthScene,
    SyntheticFeatureProvider,
    generate_scene,
    perturb_cameras,
    read_scene,
    render_discs,
    surface_distance,
    synth_dense_matcher,
    write_scene,
)
from .tracks import SceneModel, build_tracks, quantize_matches, track_stats, triangulate_tracks

log = logging.getLogger(__name__)


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise StageError("ingest", f"{what} not found: {path}")
    return Path(path)


def _load_model(path) -> SceneModel:
    path = _require(Path(path), "model directory")
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        _require(path / name, name)
    return read_model(path)


def _save_model(model: SceneModel, path) -> None:
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
    write_model(model, path)


# -- stages ---------------------------------------------------------------------------


def stage_synth(cfg: PipelineConfig, out) -> Path:
    """Write a scene bundle, a (perturbed) camera-only model and dense fields."""
    out = Path(out)
    scfg = cfg.synth_config()
    scene = generate_scene(scfg)
    write_scene(scene, out / "scene")
    cams = scene.cameras
    if cfg.perturb_rot_deg or cfg.perturb_trans_frac:
        cams = perturb_cameras(cams, cfg.perturb_rot_deg, cfg.perturb_trans_frac, scfg.seed)
    _save_model(SceneModel(dict(cams)), out / "input_model")
    mdir = out / "matches"
    mdir.mkdir(parents=True, exist_ok=True)
    renders = {iid: render_discs(scene, iid) for iid in sorted(scene.cameras)}
    for ia, ib in scene.pairs():
        m = synth_dense_matcher(scene, (ia, ib), renders=renders)
        na, nb = scene.cameras[ia].name, scene.cameras[ib].name
        m.ab.image_a, m.ab.image_b = na, nb
        m.ba.image_a, m.ba.image_b = nb, na
        write_dense_field(mdir / f"{pair_name(na, nb)}.dmf", m.ab)
        write_dense_field(mdir / f"{pair_name(nb, na)}.dmf", m.ba)
    return out


def stage_verify(cfg: PipelineConfig, matches_dir, out) -> Path:
    """NMS-sample every forward field, keep mutually consistent samples, optionally quantize."""
    matches_dir = _require(Path(matches_dir), "matches directory")
    out = Path(out)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    files = {p.stem: p for p in sorted(matches_dir.glob("*.dmf"))}
    done = set()
    for stem in sorted(files):
        a, b = parse_pair_name(stem)
        if (a, b) in done or (b, a) in done:
            continue
        back = pair_name(b, a)
        if back not in files:
            raise StageError("verify", f"missing reverse field for {stem}")
        # the lexicographically smaller name is the forward image
        if b < a:
            a, b = b, a
            stem, back = back, stem
        ab = read_dense_field(files[stem], a, b)
        ba = read_dense_field(files[back], b, a)
        samples = nms_sample(ab, cfg.nms_radius, cfg.nms_threshold)
        kept = mutual_verify(ab, ba, samples, cfg.eps_p)
        if cfg.quantize_r:
            kept = quantize_matches(kept, cfg.quantize_r)
        write_matches(out / f"{stem}.txt", kept, ab.width, ab.height)
        done.add((a, b))
    return out


def stage_triangulate(cfg: PipelineConfig, model_dir, matches_dir, out) -> Path:
    """Union verified matches into tracks, triangulate them and optionally bundle adjust."""
    cams = _load_model(model_dir)
    matches_dir = _require(Path(matches_dir), "verified matches directory")
    ids = cams.image_id_by_name()
    sets: List[SparseMatchSet] = []
    for path in sorted(matches_dir.glob("*.txt")):
        m, _ = read_matches(path)
        if m.image_a not in ids or m.image_b not in ids:
            raise StageError("triangulate", f"{path.name} refers to images missing from the model")
        sets.append(SparseMatchSet(ids[m.image_a], ids[m.image_b], m.points_a, m.points_b, m.confidence))
    tracks = build_tracks(sets)
    model = triangulate_tracks(cams.cameras, tracks)
    if cfg.initial_ba and model.tracks:
        # pairwise-only tracks still fix the poses when the pair graph has cycles
        model, _ = bundle_adjust(model, cfg.ba_config())
        model = filter_outliers(model, cfg.eps_f)
    # renumber points densely in track order for stable files
    renum = SceneModel(dict(model.cameras))
    for new_id, pid in enumerate(sorted(model.tracks)):
        t = model.tracks[pid]
        t.point_id = new_id
        renum.tracks[new_id] = t
        renum.points[new_id] = model.points[pid]
    _save_model(renum, out)
    return Path(out)


def stage_extend(cfg: PipelineConfig, model_dir, out, occluders: Optional[Path] = None) -> Path:
    model = _load_model(model_dir)
    gaussians = init_gaussians(model)
    if occluders is not None:
        gaussians = gaussians.extend(read_gaussians(_require(Path(occluders), "occluder PLY")))
    extended = extend_tracks(model, gaussians, cfg.eps_v, cfg.epi_thresh, cfg.threads)
    _save_model(extended, out)
    return Path(out)


def _provider(scene_dir=None, features_dir=None, model: Optional[SceneModel] = None):
    if scene_dir is not None:
        return SyntheticFeatureProvider(read_scene(_require(Path(scene_dir), "scene bundle")))
    if features_dir is not None and model is not None:
        return TensorFeatureProvider.from_directory(_require(Path(features_dir), "feature directory"), model.image_id_by_name())
    return None


def stage_refine(cfg: PipelineConfig, model_dir, out, scene_dir=None, features_dir=None, history=None) -> Path:
    """``iterations`` rounds of refine -> BA -> filter; without features only BA and filtering run."""
    model = _load_model(model_dir)
    provider = _provider(scene_dir, features_dir, model)
    if provider is None:
        log.warning("no feature provider; running bundle adjustment and filtering only")
        current = model
        for _ in range(cfg.iterations):
            current, _ = bundle_adjust(current, cfg.ba_config())
            current = filter_outliers(current, cfg.eps_f)
    else:
        current = refine_loop(model, provider, cfg.decoder(), cfg.iterations, cfg.refine_config(), cfg.ba_config(), history)
    _save_model(current, out)
    return Path(out)


def stage_ba(cfg: PipelineConfig, model_dir, out) -> Path:
    model = _load_model(model_dir)
    adjusted, report = bundle_adjust(model, cfg.ba_config())
    filtered = filter_outliers(adjusted, cfg.eps_f)
    _save_model(filtered, out)
    report.write(Path(out) / "ba_report.txt")
    return Path(out)


def evaluate_model(cfg: PipelineConfig, model: SceneModel, scene: SynthScene) -> Dict[str, object]:
    """Metrics of a reconstruction against a synthetic scene, in the scene frame."""
    metrics: Dict[str, object] = {"points": len(model.points), "cameras": len(model.cameras)}
    st = track_stats(model)
    metrics["mean_track_length"] = st.mean_length
    if not model.points:
        return metrics
    sim = align_models(model, scene.model)
    aligned = sim.apply_model(model)
    pts = np.array([aligned.points[p] for p in sorted(aligned.points)])
    dist = surface_distance(scene, pts)
    for t in cfg.thresholds():
        metrics[f"accuracy@{t}"] = 100.0 * float(np.mean(dist <= t))
    gt_pts = np.array([scene.model.points[p] for p in sorted(scene.model.points)])
    for t, (_, comp) in accuracy_completeness(pts, gt_pts, cfg.thresholds()).items():
        metrics[f"disc_center_completeness@{t}"] = comp
    for t, auc in pose_auc(model, scene.model, (1.0, 3.0, 5.0)).items():
        metrics[f"pose_auc@{t}"] = auc
    return metrics


def stage_eval(cfg: PipelineConfig, model_dir, scene_dir, out_file) -> Dict[str, object]:
    model = _load_model(model_dir)
    scene = read_scene(_require(Path(scene_dir), "scene bundle"))
    metrics = evaluate_model(cfg, model, scene)
    write_report(out_file, metrics)
    return metrics


def stats_lines(name: str, model: SceneModel) -> List[str]:
    st = track_stats(model)
    hist = " ".join(f"{k}:{v}" for k, v in st.histogram.items())
    return [f"{name}.tracks={st.count}", f"{name}.mean_length={st.mean_length!r}", f"{name}.histogram={hist}"]


# -- whole pipeline -------------------------------------------------------------------


def _run(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (DenseSfMError, ValueError, KeyError, OSError, np.linalg.LinAlgError) as exc:
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc


def run_pipeline(
    cfg: PipelineConfig,
    out,
    model_dir=None,
    matches_dir=None,
    synth: bool = False,
    occluders=None,
    features_dir=None,
) -> List[str]:
    """Run all stages into ``out``; returns the names of the stages executed."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stages: List[str] = []
    scene_dir = None
    if synth:
        _run("synth", stage_synth, cfg, out / "synth")
        stages.append("synth")
        model_dir = out / "synth" / "input_model"
        matches_dir = out / "synth" / "matches"
        scene_dir = out / "synth" / "scene"
        if occluders is None and (scene_dir / "occluders.ply").exists():
            occluders = scene_dir / "occluders.ply"
    else:
        if model_dir is None or matches_dir is None:
            raise StageError("ingest", "either --synth or both --model and --matches are required")
        _require(Path(model_dir), "model directory")
        _require(Path(matches_dir), "matches directory")

    _run("verify", stage_verify, cfg, matches_dir, out / "verified")
    stages.append("verify")
    _run("triangulate", stage_triangulate, cfg, model_dir, out / "verified", out / "triangulated")
    stages.append("triangulate")
    current = out / "triangulated"
    stats = stats_lines("triangulated", read_model(current))
    if not cfg.skip_extend:
        _run("extend", stage_extend, cfg, current, out / "extended", occluders)
        stages.append("extend")
        current = out / "extended"
        stats += stats_lines("extended", read_model(current))
    if cfg.iterations > 0:
        _run("refine", stage_refine, cfg, current, out / "refined", scene_dir, features_dir)
        stages.append("refine")
        current = out / "refined"
        stats += stats_lines("refined", read_model(current))

    final = read_model(current)
    if (out / "model").exists():
        shutil.rmtree(out / "model")
    shutil.copytree(current, out / "model")
    xyz = np.array([final.points[p] for p in sorted(final.points)]).reshape(-1, 3)
    write_point_cloud(out / "points.ply", xyz)
    (out / "track_stats.txt").write_text("\n".join(["stages=" + ",".join(stages)] + stats) + "\n")
    if scene_dir is not None:
        _run("eval", stage_eval, cfg, out / "model", scene_dir, out / "metrics.txt")
        stages.append("eval")
    return stages
