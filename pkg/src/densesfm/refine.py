"""Multi-view kernelized matching and track refinement.

For each track a reference view is chosen by median depth; every other view is
a query.  Feature patches around the keypoints are compared through a
Gaussian-process coordinate embedding and a decoder that emits, for each
candidate reference pixel in a ``w x w`` window, logits over a ``C x C`` anchor
grid around the query keypoint plus a confidence map.  The reference keypoint
moves to the window pixel with the highest summed confidence; each query moves
to the softmax-weighted mean of the anchors at that pixel.
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import scipy.linalg

from .errors import CheiralityFailure, NonPositiveConfidence, SingularSystem
from .tracks import Observation, Provenance, SceneModel, select_reference_view

log = logging.getLogger(__name__)

FPT_MAGIC = b"FPT1"


@dataclass(eq=False)
class FeaturePatch:
    """``p x p x c`` features sampled around ``center`` with pixel ``stride``.

    ``grid[r, c]`` sits at ``center + ((c - p//2) * stride, (r - p//2) * stride)``.
    """

    view_id: int
    grid: np.ndarray
    center: np.ndarray
    stride: float = 1.0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        if self.grid.ndim != 3 or self.grid.shape[0] != self.grid.shape[1]:
            raise ValueError(f"patch grid must be (p, p, c), got {self.grid.shape}")
        if self.grid.shape[0] % 2 == 0:
            raise ValueError("patch size must be odd")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("patch contains non-finite features")

    @property
    def size(self) -> int:
        return self.grid.shape[0]


@dataclass(eq=False)
class MatchOutput:
    """Anchor logits ``prob`` of shape ``(C*C, w, w)`` and confidence ``(w, w)``."""

    prob: np.ndarray
    conf: np.ndarray

    def __post_init__(self):
        self.prob = np.asarray(self.prob, dtype=float)
        self.conf = np.asarray(self.conf, dtype=float)
        if np.any(self.conf < 0):
            raise ValueError("confidence must be non-negative")


class FeatureProvider(Protocol):
    def patch(self, image_id: int, center, p: int, stride: float) -> FeaturePatch: ...


class Decoder(Protocol):
    """Maps transformed patches and the coordinate embedding to a :class:`MatchOutput`.

    A decoder may set ``needs_embedding = False`` to receive ``None`` instead
    of the embedding, which skips the kernel solve.
    """

    def __call__(self, ref_t: FeaturePatch, query_t: FeaturePatch, emb: np.ndarray, C: int, w: int) -> MatchOutput: ...


# -- coordinate embedding ---------------------------------------------------------


def positional_encoding(coord, num_freqs: int = 8) -> np.ndarray:
    """Fourier features of a normalised ``(x, y)`` in ``[-1, 1]``.

    Layout per frequency ``k``: ``sin(2^k pi x), cos(2^k pi x), sin(2^k pi y), cos(2^k pi y)``.
    """
    x, y = float(coord[0]), float(coord[1])
    out = np.empty(4 * num_freqs)
    for k in range(num_freqs):
        a = (2.0**k) * math.pi
        out[4 * k : 4 * k + 4] = (math.sin(a * x), math.cos(a * x), math.sin(a * y), math.cos(a * y))
    return out


def patch_coordinates(p: int) -> np.ndarray:
    """Normalised ``(x, y)`` of every patch cell, row-major, shape ``(p*p, 2)``."""
    half = (p - 1) / 2
    lin = (np.arange(p) - half) / half if p > 1 else np.zeros(1)
    gy, gx = np.meshgrid(lin, lin, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def patch_encodings(p: int, num_freqs: int = 8) -> np.ndarray:
    coords = patch_coordinates(p)
    freqs = (2.0 ** np.arange(num_freqs)) * np.pi
    ax = coords[:, 0:1] * freqs
    ay = coords[:, 1:2] * freqs
    enc = np.stack([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=2)
    return enc.reshape(p * p, 4 * num_freqs)


def cosine_kernel(fa, fb, tau: float = 10.0, eps: float = 1e-6) -> float:
    """``exp(-tau) * exp(tau * <fa, fb> / sqrt(<fa, fa><fb, fb> + eps))``."""
    fa = np.asarray(fa, dtype=float)
    fb = np.asarray(fb, dtype=float)
    c = float(fa @ fb) / math.sqrt(float(fa @ fa) * float(fb @ fb) + eps)
    return math.exp(-tau) * math.exp(tau * c)


def kernel_matrix(A: np.ndarray, B: np.ndarray, tau: float = 10.0, eps: float = 1e-6) -> np.ndarray:
    """Cosine kernel between every row of ``A`` ``(n, c)`` and ``B`` ``(m, c)``."""
    na = np.einsum("ij,ij->i", A, A)
    nb = np.einsum("ij,ij->i", B, B)
    cos = (A @ B.T) / np.sqrt(np.outer(na, nb) + eps)
    return np.exp(-tau) * np.exp(tau * cos)


def gp_posterior_mean(
    ref: FeaturePatch,
    query: FeaturePatch,
    sigma_n: float = math.sqrt(0.1),
    tau: float = 10.0,
    eps: float = 1e-6,
    num_freqs: int = 8,
) -> np.ndarray:
    """Posterior mean ``K_RQ (K_QQ + sigma_n^2 I)^-1 chi_Q`` reshaped to ``(p, p, e)``."""
    if sigma_n < 0:
        raise ValueError("sigma_n must be >= 0")
    if ref.grid.shape != query.grid.shape:
        raise ValueError(f"patch shapes differ: {ref.grid.shape} vs {query.grid.shape}")
    p, _, c = query.grid.shape
    fr = ref.grid.reshape(p * p, c)
    fq = query.grid.reshape(p * p, c)
    k_rq = kernel_matrix(fr, fq, tau, eps)
    k_qq = kernel_matrix(fq, fq, tau, eps)
    chi = patch_encodings(p, num_freqs)
    A = k_qq + (sigma_n**2) * np.eye(p * p)
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        z = scipy.linalg.cho_solve(factor, chi, check_finite=False)
    except np.linalg.LinAlgError:
        if sigma_n > 0:
            raise
        raise SingularSystem("kernel matrix is not positive definite and sigma_n = 0")
    if sigma_n == 0 and np.linalg.cond(A) > 1e12:
        raise SingularSystem("kernel matrix is rank deficient and sigma_n = 0")
    return (k_rq @ z).reshape(p, p, -1)


# -- decoding -----------------------------------------------------------------------


def anchor_grid(C: int, extent: float) -> np.ndarray:
    """Anchor offsets ``(C*C, 2)`` as ``(x, y)`` cell centers tiling a square of side ``extent``.

    Channel ``i * C + j`` is row ``i`` (y) and column ``j`` (x).
    """
    lin = ((np.arange(C) + 0.5) / C - 0.5) * extent
    gy, gx = np.meshgrid(lin, lin, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def sample_grid(grid: np.ndarray, rc: np.ndarray) -> np.ndarray:
    """Bilinear samples of a ``(p, p, c)`` grid at fractional ``(row, col)``; zeros outside."""
    p = grid.shape[0]
    r, c = rc[:, 0], rc[:, 1]
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    ar = r - r0
    ac = c - c0
    out = np.zeros((len(rc), grid.shape[2]))
    for dr, dc, w in ((0, 0, (1 - ar) * (1 - ac)), (0, 1, (1 - ar) * ac), (1, 0, ar * (1 - ac)), (1, 1, ar * ac)):
        rr = r0 + dr
        cc = c0 + dc
        ok = (rr >= 0) & (rr < p) & (cc >= 0) & (cc < p) & (w > 0)
        out[ok] += w[ok, None] * grid[rr[ok], cc[ok]]
    return out


def _cosine_rows(A: np.ndarray, B: np.ndarray, eps: float) -> np.ndarray:
    na = np.einsum("ij,ij->i", A, A)
    nb = np.einsum("ij,ij->i", B, B)
    return (A @ B.T) / np.sqrt(np.outer(na, nb) + eps)


@dataclass
class ReferenceDecoder:
    """Deterministic stand-in for a learned decoder.

    Logits are temperature-scaled cosine correlations between the reference
    pixel's feature and query features at the anchor positions, optionally
    blended with the similarity between the GP embedding at the reference pixel
    and the Fourier encoding of each anchor position.  Confidence is the
    logit peak height above the mean.
    """

    temperature: float = 10.0
    embedding_weight: float = 0.0
    anchor_extent: Optional[float] = None
    num_freqs: int = 8
    eps: float = 1e-6

    @property
    def needs_embedding(self) -> bool:
        return self.embedding_weight != 0

    def __call__(self, ref_t: FeaturePatch, query_t: FeaturePatch, emb: np.ndarray, C: int, w: int) -> MatchOutput:
        p = ref_t.size
        if query_t.grid.shape != ref_t.grid.shape:
            raise ValueError("reference and query patches differ in shape")
        if w > p:
            raise ValueError(f"search window {w} exceeds patch size {p}")
        half = p // 2
        extent = float(w) if self.anchor_extent is None else float(self.anchor_extent)
        anchors = anchor_grid(C, extent) / query_t.stride  # in patch cells
        offs = np.arange(w) - w // 2
        ref_rc = np.array([(half + dr, half + dc) for dr in offs for dc in offs], dtype=int)
        f_ref = ref_t.grid[ref_rc[:, 0], ref_rc[:, 1]]  # (w*w, c)
        anchor_rc = np.stack([half + anchors[:, 1], half + anchors[:, 0]], axis=1)
        f_q = sample_grid(query_t.grid, anchor_rc)  # (C*C, c)
        logits = self.temperature * _cosine_rows(f_ref, f_q, self.eps)  # (w*w, C*C)
        if self.embedding_weight:
            mu = np.asarray(emb, dtype=float)[ref_rc[:, 0], ref_rc[:, 1]]
            coords = (anchor_rc[:, ::-1] - half) / half if p > 1 else np.zeros_like(anchor_rc)
            chi = np.stack([positional_encoding(c, self.num_freqs) for c in coords])
            logits = logits + self.embedding_weight * self.temperature * _cosine_rows(mu, chi, self.eps)
        peak = np.argmax(logits, axis=1)
        pi, pj = np.divmod(peak, C)
        conf = logits.max(axis=1) - logits.mean(axis=1)
        # a peak on the anchor border is unbracketed: the match may lie outside the grid
        if C > 2:
            conf = np.where((pi == 0) | (pi == C - 1) | (pj == 0) | (pj == C - 1), 0.0, conf)
        prob = logits.T.reshape(C * C, w, w)
        return MatchOutput(prob, np.maximum(conf, 0.0).reshape(w, w))


def reference_decoder(ref_t, query_t, emb, C: int = 7, w: int = 7, **kwargs) -> MatchOutput:
    return ReferenceDecoder(**kwargs)(ref_t, query_t, emb, C, w)


def softmax(x: np.ndarray, axis: int = 0) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _local_mean(logits: np.ndarray, anchors: np.ndarray, C: int, radius: int = 2) -> np.ndarray:
    """Softmax-weighted anchor mean over the largest square neighborhood centered on the logit peak."""
    L = logits.reshape(C, C)
    i, j = np.unravel_index(int(np.argmax(L)), L.shape)
    h = min(radius, i, C - 1 - i, j, C - 1 - j)
    rows = np.arange(i - h, i + h + 1)
    cols = np.arange(j - h, j + h + 1)
    idx = (rows[:, None] * C + cols[None, :]).ravel()
    return softmax(logits[idx]) @ anchors[idx]


def regress_track(outputs: Sequence[MatchOutput], anchor_extent: float = 7.0, stride: float = 1.0, mode: str = "softmax"):
    """Refined offsets from decoder outputs.

    Returns ``(ref_offset, query_offsets)``: the reference offset is the window
    pixel maximising the summed confidence (first in row-major order on ties),
    in pixels.  Each query offset, relative to the query keypoint, is read from
    the anchor logits at that pixel: their softmax-weighted anchor mean
    (``mode="softmax"``) or the same mean restricted to a square of at most
    5 x 5 anchors centred on the logit peak (``mode="local"``).
    """
    if not outputs:
        raise ValueError("at least one query view is required")
    if mode not in ("softmax", "local"):
        raise ValueError(f"unknown regression mode {mode!r}")
    total = np.sum([o.conf for o in outputs], axis=0)
    w = total.shape[0]
    row, col = np.unravel_index(int(np.argmax(total)), total.shape)
    ref_offset = np.array([(col - w // 2) * stride, (row - w // 2) * stride], dtype=float)
    C = math.isqrt(outputs[0].prob.shape[0])
    anchors = anchor_grid(C, anchor_extent)
    queries = []
    for o in outputs:
        if mode == "local":
            queries.append(_local_mean(o.prob[:, row, col], anchors, C))
        else:
            queries.append(softmax(o.prob[:, row, col]) @ anchors)
    return ref_offset, queries


# -- track refinement -------------------------------------------------------------


@dataclass
class RefineConfig:
    patch_size: int = 15
    window: int = 7
    anchors: int = 7
    anchor_extent: float = 7.0
    stride: float = 1.0
    tau: float = 10.0
    kernel_eps: float = 1e-6
    noise_var: float = 0.1
    num_freqs: int = 8
    regression: str = "local"
    threads: int = 1


def _refine_one(model: SceneModel, pid: int, provider, decoder, cfg: RefineConfig):
    track = model.tracks[pid]
    ref_id = select_reference_view(track, model)
    ref_obs = track.observation(ref_id)
    queries = [o for o in track.observations if o.image_id != ref_id]
    f_ref = provider.patch(ref_id, ref_obs.xy, cfg.patch_size, cfg.stride)
    outputs = []
    solve = getattr(decoder, "needs_embedding", True)
    for q in queries:
        f_q = provider.patch(q.image_id, q.xy, cfg.patch_size, cfg.stride)
        emb = None
        if solve:
            emb = gp_posterior_mean(f_ref, f_q, math.sqrt(cfg.noise_var), cfg.tau, cfg.kernel_eps, cfg.num_freqs)
        outputs.append(decoder(f_ref, f_q, emb, cfg.anchors, cfg.window))
    ref_offset, q_offsets = regress_track(outputs, cfg.anchor_extent, cfg.stride, cfg.regression)
    new_xy = {ref_id: ref_obs.xy + ref_offset}
    for q, off in zip(queries, q_offsets):
        new_xy[q.image_id] = q.xy + off
    return ref_id, new_xy


def refine_tracks(
    model: SceneModel,
    provider: FeatureProvider,
    decoder: Decoder,
    config: Optional[RefineConfig] = None,
    diagnostics: Optional[list] = None,
) -> SceneModel:
    """Refine every track with at least two observations.

    Topology is preserved: the same points observe the same images.  Tracks
    whose provider or decoder call fails are left untouched and reported in
    ``diagnostics`` as ``(point_id, message)``.
    """
    cfg = config or RefineConfig()
    out = model.copy()
    pids = [pid for pid in sorted(model.tracks) if len(model.tracks[pid]) >= 2]

    def work(pid):
        try:
            return _refine_one(model, pid, provider, decoder, cfg)
        except (CheiralityFailure, SingularSystem, ValueError, KeyError, IndexError) as exc:
            return exc

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(work, pids))
    else:
        results = [work(pid) for pid in pids]

    failed = 0
    for pid, res in zip(pids, results):
        if isinstance(res, Exception):
            failed += 1
            if diagnostics is not None:
                diagnostics.append((pid, f"{type(res).__name__}: {res}"))
            continue
        ref_id, new_xy = res
        track = out.tracks[pid]
        track.reference = ref_id
        track.observations = [Observation(o.image_id, new_xy[o.image_id], Provenance.REFINED) for o in track.observations]
    if failed:
        log.warning("refinement skipped %d of %d tracks", failed, len(pids))
    return out


# -- training loss ----------------------------------------------------------------


def confidence_loss(pred, gt, conf, alpha: float = 20.0, return_grad: bool = False):
    """Mean of ``s * ||p - p_gt|| - alpha * log s`` over query observations.

    With ``return_grad`` also returns ``(d/dp (N, 2), d/ds (N,))``.
    """
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    gt = np.asarray(gt, dtype=float).reshape(-1, 2)
    s = np.asarray(conf, dtype=float).reshape(-1)
    if len(pred) != len(gt) or len(pred) != len(s):
        raise ValueError("pred, gt and conf lengths differ")
    if len(s) == 0:
        raise ValueError("no predictions")
    if np.any(s <= 0):
        raise NonPositiveConfidence("confidence scores must be > 0")
    diff = pred - gt
    d = np.linalg.norm(diff, axis=1)
    n = len(s)
    loss = float(np.mean(s * d - alpha * np.log(s)))
    if not return_grad:
        return loss
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(d[:, None] > 0, diff / d[:, None], 0.0)
    grad_p = s[:, None] * unit / n
    grad_s = (d - alpha / s) / n
    return loss, grad_p, grad_s


# -- external feature maps ------------------------------------------------------------


def write_feature_tensor(path, tensor: np.ndarray) -> None:
    """``FPT1`` + ``u32 ndim`` + ``ndim x u32`` dims + little-endian float32 payload."""
    arr = np.asarray(tensor, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FPT_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes(order="C"))


def read_feature_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FPT_MAGIC:
        raise ValueError(f"{path}: not an FPT1 file")
    (ndim,) = struct.unpack("<I", data[4:8])
    dims = struct.unpack(f"<{ndim}I", data[8 : 8 + 4 * ndim])
    arr = np.frombuffer(data, dtype="<f4", offset=8 + 4 * ndim)
    if arr.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload does not match dims {dims}")
    return arr.reshape(dims).astype(float)


class TensorFeatureProvider:
    """Serves patches from dense ``(H, W, C)`` feature maps by bilinear sampling."""

    def __init__(self, maps: Dict[int, np.ndarray]):
        self.maps = {k: np.asarray(v, dtype=float) for k, v in maps.items()}

    @classmethod
    def from_directory(cls, directory, name_to_id: Dict[str, int]) -> "TensorFeatureProvider":
        maps = {}
        for path in sorted(Path(directory).glob("*.fpt")):
            if path.stem in name_to_id:
                maps[name_to_id[path.stem]] = read_feature_tensor(path)
        return cls(maps)

    def patch(self, image_id: int, center, p: int, stride: float = 1.0) -> FeaturePatch:
        fmap = self.maps[image_id]
        half = p // 2
        offs = (np.arange(p) - half) * stride
        gy, gx = np.meshgrid(center[1] + offs, center[0] + offs, indexing="ij")
        rc = np.stack([gy.ravel(), gx.ravel()], axis=1)
        vals = _sample_map(fmap, rc)
        return FeaturePatch(image_id, vals.reshape(p, p, -1), center, stride)


def _sample_map(fmap: np.ndarray, rc: np.ndarray) -> np.ndarray:
    H, W = fmap.shape[:2]
    r, c = rc[:, 0], rc[:, 1]
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    ar = r - r0
    ac = c - c0
    out = np.zeros((len(rc), fmap.shape[2]))
    for dr, dc, w in ((0, 0, (1 - ar) * (1 - ac)), (0, 1, (1 - ar) * ac), (1, 0, ar * (1 - ac)), (1, 1, ar * ac)):
        rr = r0 + dr
        cc = c0 + dc
        ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W) & (w > 0)
        out[ok] += w[ok, None] * fmap[rr[ok], cc[ok]]
    return out
