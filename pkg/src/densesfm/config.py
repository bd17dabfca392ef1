"""Flat ``key=value`` pipeline configuration.

Lines are ``key = value``; ``#`` starts a comment.  Keys prefixed ``synth.``
configure the synthetic scene generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional

from .errors import ConfigInvalid
from .optimize import ROBUST_LOSSES, BAConfig
from .refine import RefineConfig, ReferenceDecoder
from .synth import SynthConfig


@dataclass
class PipelineConfig:
    eps_p: float = 3.0
    eps_v: float = 0.5
    eps_f: float = 3.0
    nms_radius: float = 4.0
    nms_threshold: float = 0.0
    epi_thresh: float = 4.0
    quantize_r: float = 0.0  # > 0 snaps verified matches to an r-pixel grid
    patch_size: int = 15
    window: int = 7
    anchors: int = 7
    anchor_extent: float = 7.0
    stride: float = 1.0
    alpha: float = 20.0
    tau: float = 10.0
    kernel_eps: float = 1e-6
    noise_var: float = 0.1
    num_freqs: int = 8
    regression: str = "local"
    decoder_temperature: float = 10.0
    decoder_embedding_weight: float = 0.0
    iterations: int = 2
    loss: str = "huber"
    loss_scale: float = 1.0
    ba_max_iterations: int = 100
    fixed_poses: bool = False
    fixed_intrinsics: bool = True
    skip_extend: bool = False
    initial_ba: bool = True
    threads: int = 1
    seed: int = 0
    perturb_rot_deg: float = 0.0
    perturb_trans_frac: float = 0.0
    accuracy_thresholds: str = "0.01,0.02,0.05"
    synth: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.eps_p > 0 and self.eps_f > 0, "eps_p and eps_f must be positive"),
            (0 <= self.eps_v <= 1, "eps_v must lie in [0, 1]"),
            (self.nms_radius >= 1, "nms_radius must be >= 1"),
            (self.epi_thresh > 0, "epi_thresh must be positive"),
            (self.quantize_r == 0 or self.quantize_r >= 1, "quantize_r must be 0 or >= 1"),
            (self.patch_size % 2 == 1 and self.patch_size >= 1, "patch_size must be odd"),
            (1 <= self.window <= self.patch_size, "window must lie in [1, patch_size]"),
            (self.anchors >= 1 and self.anchor_extent > 0, "anchors and anchor_extent must be positive"),
            (self.tau > 0 and self.kernel_eps > 0 and self.noise_var >= 0, "kernel parameters out of range"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.loss in ROBUST_LOSSES, f"loss must be one of {ROBUST_LOSSES}"),
            (self.threads >= 1, "threads must be >= 1"),
            (self.alpha > 0, "alpha must be positive"),
            (self.regression in ("softmax", "local"), "regression must be softmax or local"),
            (self.decoder_temperature > 0, "decoder_temperature must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigInvalid(msg)

    def refine_config(self) -> RefineConfig:
        return RefineConfig(
            patch_size=self.patch_size,
            window=self.window,
            anchors=self.anchors,
            anchor_extent=self.anchor_extent,
            stride=self.stride,
            tau=self.tau,
            kernel_eps=self.kernel_eps,
            noise_var=self.noise_var,
            num_freqs=self.num_freqs,
            regression=self.regression,
            threads=self.threads,
        )

    def decoder(self) -> ReferenceDecoder:
        return ReferenceDecoder(
            temperature=self.decoder_temperature,
            embedding_weight=self.decoder_embedding_weight,
            anchor_extent=self.anchor_extent,
            num_freqs=self.num_freqs,
        )

    def ba_config(self) -> BAConfig:
        return BAConfig(
            max_iterations=self.ba_max_iterations,
            loss=self.loss,
            loss_scale=self.loss_scale,
            refine_poses=not self.fixed_poses,
            refine_intrinsics=not self.fixed_intrinsics,
            eps_f=self.eps_f,
        )

    def synth_config(self) -> SynthConfig:
        values = dict(self.synth)
        values.setdefault("seed", str(self.seed))
        return SynthConfig.from_mapping(values)

    def thresholds(self):
        return [float(x) for x in self.accuracy_thresholds.split(",") if x.strip()]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "synth":
                continue
            lines.append(f"{f.name}={getattr(self, f.name)}")
        lines += [f"synth.{k}={v}" for k, v in sorted(self.synth.items())]
        return "\n".join(lines) + "\n"


def parse_kv(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"line {n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(name: str, default, raw: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigInvalid(f"bad value for {name}: {raw!r}") from exc


def config_from_mapping(values: Dict[str, str], base: Optional[PipelineConfig] = None) -> PipelineConfig:
    base = base or PipelineConfig()
    kwargs = {f.name: getattr(base, f.name) for f in fields(PipelineConfig)}
    kwargs["synth"] = dict(base.synth)
    for key, raw in values.items():
        if key.startswith("synth."):
            kwargs["synth"][key[len("synth."):]] = raw
            continue
        if key not in kwargs:
            raise ConfigInvalid(f"unknown config key {key!r}")
        kwargs[key] = _coerce(key, getattr(base, key), str(raw))
    return PipelineConfig(**kwargs)


def load_config(path=None, overrides: Optional[Dict[str, str]] = None) -> PipelineConfig:
    values = parse_kv(Path(path).read_text()) if path is not None else {}
    values.update(overrides or {})
    return config_from_mapping(values)
