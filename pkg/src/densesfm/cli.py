"""Command-line entry point: ``densesfm <subcommand> [options]``.

Exit status is 0 on success, 2 when an input is missing (stage ``ingest``)
or the configuration is invalid, and 1 when a processing stage fails.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import pipeline as pl
from .config import load_config
from .errors import ConfigInvalid, StageError

log = logging.getLogger("densesfm")


def _common(p: argparse.ArgumentParser, model=False, matches=False) -> None:
    p.add_argument("--config", type=Path, help="flat key=value configuration file")
    p.add_argument("--out", type=Path, required=True, help="output directory (or file for eval)")
    p.add_argument("--threads", type=int, help="worker thread cap")
    p.add_argument("--seed", type=int, help="random seed for synthetic data")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    if model:
        p.add_argument("--model", type=Path, required=True, help="COLMAP-text model directory")
    if matches:
        p.add_argument("--matches", type=Path, required=True, help="match directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densesfm", description="Dense-matching SfM refinement pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene, initial model and dense fields")
    _common(p)

    p = sub.add_parser("verify", help="sample and mutually verify dense match fields")
    _common(p, matches=True)

    p = sub.add_parser("triangulate", help="build pairwise tracks and triangulate")
    _common(p, model=True, matches=True)

    p = sub.add_parser("extend", help="extend tracks with splat visibility")
    _common(p, model=True)
    p.add_argument("--gaussians", type=Path, help="occluder Gaussian PLY")

    p = sub.add_parser("refine", help="refine tracks, bundle adjust and filter, repeatedly")
    _common(p, model=True)
    p.add_argument("--scene", type=Path, help="synthetic scene bundle providing feature images")
    p.add_argument("--features", type=Path, help="directory of FPT1 feature tensors named <image>.fpt")
    p.add_argument("--iterations", type=int)
    p.add_argument("--fixed-poses", action="store_true")
    p.add_argument("--fixed-intrinsics", action="store_true")

    p = sub.add_parser("ba", help="bundle adjustment and outlier filtering")
    _common(p, model=True)
    p.add_argument("--fixed-poses", action="store_true")
    p.add_argument("--fixed-intrinsics", action="store_true")

    p = sub.add_parser("eval", help="evaluate a model against a synthetic scene bundle")
    _common(p, model=True)
    p.add_argument("--scene", type=Path, required=True)

    p = sub.add_parser("stats", help="print track statistics of a model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, help="also write the statistics to this file")

    p = sub.add_parser("pipeline", help="run every stage")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--model", type=Path)
    p.add_argument("--matches", type=Path)
    p.add_argument("--synth", type=Path, metavar="CFG", help="generate synthetic input from this config")
    p.add_argument("--gaussians", type=Path, help="occluder Gaussian PLY")
    p.add_argument("--features", type=Path)
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--skip-extend", action="store_true")
    p.add_argument("--iterations", type=int)
    p.add_argument("--fixed-poses", action="store_true")
    p.add_argument("--fixed-intrinsics", action="store_true")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return parser


def _overrides(args) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise ConfigInvalid(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in (("threads", "threads"), ("seed", "seed"), ("iterations", "iterations")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = str(v)
    if getattr(args, "skip_extend", False):
        out["skip_extend"] = "true"
    if getattr(args, "fixed_poses", False):
        out["fixed_poses"] = "true"
    if getattr(args, "fixed_intrinsics", False):
        out["fixed_intrinsics"] = "true"
    return out


def _setup_logging() -> None:
    level = os.environ.get("DENSESFM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def dispatch(args) -> int:
    cmd = args.command
    if cmd == "stats":
        lines = pl.stats_lines("model", pl._load_model(args.model))
        print("\n".join(lines))
        if args.out:
            args.out.write_text("\n".join(lines) + "\n")
        return 0

    config_path = getattr(args, "config", None)
    if cmd == "pipeline" and args.synth is not None:
        config_path = args.synth
    if config_path is not None and not Path(config_path).exists():
        raise StageError("ingest", f"config file not found: {config_path}")
    cfg = load_config(config_path, _overrides(args))

    if cmd == "synth":
        pl._run("synth", pl.stage_synth, cfg, args.out)
    elif cmd == "verify":
        pl._run("verify", pl.stage_verify, cfg, args.matches, args.out)
    elif cmd == "triangulate":
        pl._run("triangulate", pl.stage_triangulate, cfg, args.model, args.matches, args.out)
    elif cmd == "extend":
        pl._run("extend", pl.stage_extend, cfg, args.model, args.out, args.gaussians)
    elif cmd == "refine":
        pl._run("refine", pl.stage_refine, cfg, args.model, args.out, args.scene, args.features)
    elif cmd == "ba":
        pl._run("ba", pl.stage_ba, cfg, args.model, args.out)
    elif cmd == "eval":
        metrics = pl._run("eval", pl.stage_eval, cfg, args.model, args.scene, args.out)
        for k, v in metrics.items():
            print(f"{k}={v}")
    elif cmd == "pipeline":
        if args.synth is not None and args.config is not None:
            # --config layers on top of the synth settings
            cfg = load_config(args.synth, {**_read_overrides(args.config), **_overrides(args)})
        stages = pl.run_pipeline(
            cfg,
            args.out,
            model_dir=args.model,
            matches_dir=args.matches,
            synth=args.synth is not None,
            occluders=args.gaussians,
            features_dir=args.features,
        )
        print("stages=" + ",".join(stages))
    return 0


def _read_overrides(path) -> Dict[str, str]:
    from .config import parse_kv

    if not Path(path).exists():
        raise StageError("ingest", f"config file not found: {path}")
    return parse_kv(Path(path).read_text())


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return dispatch(args)
    except StageError as exc:
        print(f"densesfm: stage {exc.stage} failed: {exc}", file=sys.stderr)
        return 2 if exc.stage == "ingest" else 1
    except ConfigInvalid as exc:
        print(f"densesfm: stage config failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
