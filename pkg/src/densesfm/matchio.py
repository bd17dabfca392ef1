"""Dense match fields: sampling, bilinear lookup, mutual verification and file I/O.

A :class:`MatchField` stores, for every integer pixel of image A, the sub-pixel
target in image B and a confidence.  Pixels without a match carry confidence 0
and a NaN target.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Optional, Tuple

import numpy as np

from .errors import OutOfBounds, PairMismatch

DMF_MAGIC = b"DMF1"
MATCH_HEADER = "#match-v1"


@dataclass(eq=False)
class MatchField:
    """Dense correspondence field from ``image_a`` to ``image_b``.

    ``flow`` has shape ``(H, W, 2)`` holding ``(x_b, y_b)`` per pixel of A,
    ``confidence`` has shape ``(H, W)``.
    """

    image_a: Hashable
    image_b: Hashable
    flow: np.ndarray
    confidence: np.ndarray
    size_b: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=float)
        self.confidence = np.asarray(self.confidence, dtype=float)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise ValueError(f"flow must be (H, W, 2), got {self.flow.shape}")
        if self.confidence.shape != self.flow.shape[:2]:
            raise ValueError("confidence and flow grids differ")
        if not np.all(np.isfinite(self.confidence)):
            raise ValueError("confidence must be finite")
        if self.confidence.size and (self.confidence.min() < 0 or self.confidence.max() > 1):
            raise ValueError("confidence must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.flow.shape[0]

    @property
    def width(self) -> int:
        return self.flow.shape[1]


@dataclass(eq=False)
class SparseMatchSet:
    image_a: Hashable
    image_b: Hashable
    points_a: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    points_b: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.points_a = np.asarray(self.points_a, dtype=float).reshape(-1, 2)
        self.points_b = np.asarray(self.points_b, dtype=float).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(-1)
        if not (len(self.points_a) == len(self.points_b) == len(self.confidence)):
            raise ValueError("match arrays have different lengths")

    def __len__(self) -> int:
        return len(self.confidence)

    def pairs(self):
        for pa, pb, c in zip(self.points_a, self.points_b, self.confidence):
            yield pa, pb, float(c)

    def subset(self, mask) -> "SparseMatchSet":
        mask = np.asarray(mask)
        return SparseMatchSet(
            self.image_a, self.image_b, self.points_a[mask], self.points_b[mask], self.confidence[mask]
        )


def _disk_offsets(radius: float):
    r = int(np.floor(radius))
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dx**2 + dy**2 <= radius**2
    return dy[keep], dx[keep]


def nms_sample(field: MatchField, radius: float = 4, threshold: float = 0.0) -> SparseMatchSet:
    """Greedy non-max suppression over the confidence map.

    Pixels are visited by decreasing confidence, ties in ``(row, col)`` order.
    A pixel is kept unless a previously kept pixel lies within ``radius``
    (Euclidean).  Pixels with confidence ``<= threshold`` or no target are
    never sampled.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    conf = field.confidence
    valid = (conf > threshold) & np.all(np.isfinite(field.flow), axis=2)
    rows, cols = np.nonzero(valid)
    if rows.size == 0:
        return SparseMatchSet(field.image_a, field.image_b)
    order = np.lexsort((cols, rows, -conf[rows, cols]))
    rows, cols = rows[order], cols[order]

    H, W = conf.shape
    dy, dx = _disk_offsets(radius)
    suppressed = np.zeros((H, W), dtype=bool)
    kept_r, kept_c = [], []
    for r, c in zip(rows.tolist(), cols.tolist()):
        if suppressed[r, c]:
            continue
        kept_r.append(r)
        kept_c.append(c)
        yy = r + dy
        xx = c + dx
        inside = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        suppressed[yy[inside], xx[inside]] = True
    kr = np.array(kept_r)
    kc = np.array(kept_c)
    pa = np.stack([kc, kr], axis=1).astype(float)
    return SparseMatchSet(field.image_a, field.image_b, pa, field.flow[kr, kc], conf[kr, kc])


def lookup_bilinear_many(field: MatchField, points) -> np.ndarray:
    """Bilinear flow lookup for ``(N, 2)`` points; NaN where out of bounds."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    H, W = field.height, field.width
    x, y = pts[:, 0], pts[:, 1]
    inside = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    out = np.full((len(pts), 2), np.nan)
    if not np.any(inside):
        return out
    x, y = x[inside], y[inside]
    x0 = np.minimum(np.floor(x), max(W - 2, 0)).astype(int)
    y0 = np.minimum(np.floor(y), max(H - 2, 0)).astype(int)
    ax = x - x0
    ay = y - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    acc = np.zeros((len(x), 2))
    # zero-weight corners are skipped so NaN neighbours do not leak into exact hits
    for yy, xx, w in (
        (y0, x0, (1 - ax) * (1 - ay)),
        (y0, x1, ax * (1 - ay)),
        (y1, x0, (1 - ax) * ay),
        (y1, x1, ax * ay),
    ):
        v = field.flow[yy, xx]
        acc += np.where((w > 0)[:, None], w[:, None] * v, 0.0)
    out[inside] = acc
    return out


def lookup_bilinear(field: MatchField, p) -> np.ndarray:
    """Bilinearly interpolated target of sub-pixel point ``p`` (``x, y``)."""
    x, y = float(p[0]), float(p[1])
    if not (0 <= x <= field.width - 1 and 0 <= y <= field.height - 1):
        raise OutOfBounds(f"({x:.3f}, {y:.3f}) outside {field.width}x{field.height} field")
    return lookup_bilinear_many(field, [[x, y]])[0]


def cycle_distances(ab: MatchField, ba: MatchField, samples: SparseMatchSet) -> np.ndarray:
    """``||p_a - M_ba[p_b]||`` per sample; ``inf`` when the lookup fails."""
    back = lookup_bilinear_many(ba, samples.points_b)
    d = np.linalg.norm(samples.points_a - back, axis=1)
    return np.where(np.isfinite(d), d, np.inf)


def mutual_verify(ab: MatchField, ba: MatchField, samples: SparseMatchSet, eps_p: float = 3.0) -> SparseMatchSet:
    """Keep samples whose forward-backward cycle returns within ``eps_p`` pixels."""
    if ab.image_a != ba.image_b or ab.image_b != ba.image_a:
        raise PairMismatch(
            f"fields {ab.image_a}->{ab.image_b} and {ba.image_a}->{ba.image_b} are not reverse"
        )
    if samples.image_a != ab.image_a or samples.image_b != ab.image_b:
        raise PairMismatch("samples do not belong to the forward field")
    if len(samples) == 0:
        return samples.subset(np.zeros(0, dtype=bool))
    return samples.subset(cycle_distances(ab, ba, samples) <= eps_p)


# -- file formats -----------------------------------------------------------------


def write_dense_field(path, field: MatchField) -> None:
    """``DMF1`` binary: header + float32 ``(H, W, 3)`` of ``(x_b, y_b, conf)``."""
    data = np.concatenate([field.flow, field.confidence[..., None]], axis=2).astype("<f4")
    with open(path, "wb") as f:
        f.write(DMF_MAGIC + struct.pack("<III", field.width, field.height, 3))
        f.write(data.tobytes(order="C"))


def read_dense_field(path, image_a=None, image_b=None) -> MatchField:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != DMF_MAGIC:
            raise ValueError(f"{path}: not a DMF1 file")
        width, height, channels = struct.unpack("<III", header[4:])
        if channels != 3:
            raise ValueError(f"{path}: expected 3 channels, found {channels}")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != width * height * 3:
        raise ValueError(f"{path}: truncated payload")
    data = data.reshape(height, width, 3).astype(float)
    if image_a is None or image_b is None:
        image_a, image_b = parse_pair_name(Path(path).stem)
    return MatchField(image_a, image_b, data[..., :2], np.clip(data[..., 2], 0.0, 1.0))


def pair_name(image_a, image_b) -> str:
    return f"{image_a}__{image_b}"


def parse_pair_name(stem: str):
    a, sep, b = stem.partition("__")
    if not sep:
        raise ValueError(f"cannot parse image pair from {stem!r}")
    return a, b


def write_matches(path, matches: SparseMatchSet, width_a: int, height_a: int) -> None:
    lines = [f"{MATCH_HEADER} {matches.image_a} {matches.image_b} {int(width_a)} {int(height_a)}"]
    for pa, pb, c in matches.pairs():
        lines.append(" ".join(repr(float(v)) for v in (pa[0], pa[1], pb[0], pb[1], c)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_matches(path):
    """Returns ``(SparseMatchSet, (width_a, height_a))``."""
    with open(path) as f:
        header = f.readline().split()
        if not header or header[0] != MATCH_HEADER or len(header) != 5:
            raise ValueError(f"{path}: missing {MATCH_HEADER} header")
        rows = [line.split() for line in f if line.strip() and not line.startswith("#")]
    arr = np.array(rows, dtype=float).reshape(-1, 5)
    mset = SparseMatchSet(header[1], header[2], arr[:, 0:2], arr[:, 2:4], arr[:, 4])
    return mset, (int(header[3]), int(header[4]))
