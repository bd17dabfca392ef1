"""Robust bundle adjustment, outlier filtering and the refine/BA driver.

Cameras are parameterised by a left rotation increment ``omega``, a center
increment ``dC`` and the four pinhole intrinsics, so ``x_cam = R (X - C)``.
The gauge is fixed by holding the first camera and keeping the distance from
the second camera's center to the first one constant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DegenerateGauge
from .geometry import CameraPose, orthonormalize, rotvec_to_matrix
from .tracks import ImageView, SceneModel, mean_reprojection_error, reprojection_errors

log = logging.getLogger(__name__)

N_LOCAL = 10  # omega(3), dC(3), fx, fy, cx, cy
ROBUST_LOSSES = ("huber", "cauchy", "trivial")


@dataclass
class BAConfig:
    max_iterations: int = 100
    function_tolerance: float = 1e-12
    loss: str = "huber"
    loss_scale: float = 1.0
    refine_poses: bool = True
    refine_intrinsics: bool = False
    refine_points: bool = True
    eps_f: float = 3.0
    initial_lambda: float = 1e-4

    def __post_init__(self):
        if self.loss not in ROBUST_LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {ROBUST_LOSSES}")
        if self.function_tolerance <= 0 or self.loss_scale <= 0 or self.eps_f <= 0:
            raise ValueError("tolerance, loss scale and eps_f must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


@dataclass
class BAReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    records: List[Tuple[int, float, float, float]] = field(default_factory=list)
    excluded: int = 0

    def lines(self) -> List[str]:
        out = [f"iteration={i} cost={c!r} lambda={lam!r} step_norm={s!r}" for i, c, lam, s in self.records]
        out.append(
            f"initial_cost={self.initial_cost!r} final_cost={self.final_cost!r} "
            f"iterations={self.iterations} converged={int(self.converged)} excluded={self.excluded}"
        )
        return out

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


# -- robust losses ----------------------------------------------------------------


def robust_rho(s: np.ndarray, kind: str = "huber", scale: float = 1.0):
    """Loss ``rho(s)`` of squared residual norms and its derivative ``rho'(s)``."""
    s = np.asarray(s, dtype=float)
    d2 = scale * scale
    if kind == "trivial":
        return s.copy(), np.ones_like(s)
    if kind == "huber":
        root = np.sqrt(s)
        inlier = s <= d2
        rho = np.where(inlier, s, 2.0 * scale * root - d2)
        with np.errstate(divide="ignore"):
            drho = np.where(inlier, 1.0, scale / np.where(inlier, 1.0, root))
        return rho, drho
    if kind == "cauchy":
        return d2 * np.log1p(s / d2), 1.0 / (1.0 + s / d2)
    raise ValueError(f"unknown loss {kind!r}")


# -- residuals and Jacobians -------------------------------------------------------


def perturb_camera(view: ImageView, delta) -> ImageView:
    """Apply a 10-vector local update ``(omega, dC, dfx, dfy, dcx, dcy)``."""
    delta = np.asarray(delta, dtype=float)
    R = orthonormalize(rotvec_to_matrix(delta[:3]) @ view.pose.rotation)
    C = view.pose.center + delta[3:6]
    k = view.intrinsics.with_params(view.intrinsics.params + delta[6:10])
    return ImageView(CameraPose.from_center(R, C), k, view.name)


def observation_jacobian(X, view: ImageView):
    """Residual ``pi(X) - 0`` and its Jacobians for one observation.

    Returns ``(uv (2,), J_cam (2, 10), J_point (2, 3))`` with camera columns
    in :func:`perturb_camera` order.
    """
    uv, jc, jp = _batch_jacobians(
        np.asarray(X, dtype=float)[None],
        view.pose.rotation[None],
        view.pose.center[None],
        view.intrinsics.params[None],
    )
    return uv[0], jc[0], jp[0]


def _batch_jacobians(X, R, C, kp):
    """Vectorised projections and Jacobians; arrays indexed per observation."""
    d = X - C
    xc = np.einsum("kij,kj->ki", R, d)
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    fx, fy, cx, cy = kp[:, 0], kp[:, 1], kp[:, 2], kp[:, 3]
    iz = 1.0 / z
    u = fx * x * iz + cx
    v = fy * y * iz + cy
    n = len(X)
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = fx * iz
    dpi[:, 0, 2] = -fx * x * iz * iz
    dpi[:, 1, 1] = fy * iz
    dpi[:, 1, 2] = -fy * y * iz * iz
    # d xc / d omega = -[xc]_x for the left increment exp([omega]) R
    neg_skew = np.zeros((n, 3, 3))
    neg_skew[:, 0, 1], neg_skew[:, 0, 2] = z, -y
    neg_skew[:, 1, 0], neg_skew[:, 1, 2] = -z, x
    neg_skew[:, 2, 0], neg_skew[:, 2, 1] = y, -x
    jc = np.zeros((n, 2, N_LOCAL))
    jc[:, :, 0:3] = dpi @ neg_skew
    jc[:, :, 3:6] = -dpi @ R
    jc[:, 0, 6] = x * iz
    jc[:, 1, 7] = y * iz
    jc[:, 0, 8] = 1.0
    jc[:, 1, 9] = 1.0
    jp = dpi @ R
    return np.stack([u, v], axis=1), jc, jp


# -- bundle adjustment ------------------------------------------------------------


class _Problem:
    def __init__(self, model: SceneModel, cfg: BAConfig):
        self.cfg = cfg
        self.cam_ids = sorted(model.cameras)
        self.pids = sorted(model.tracks)
        cam_index = {c: i for i, c in enumerate(self.cam_ids)}
        pt_index = {p: i for i, p in enumerate(self.pids)}
        pids, iids, xy = model.observations_array()
        self.ci = np.array([cam_index[i] for i in iids], dtype=int)
        self.pj = np.array([pt_index[p] for p in pids], dtype=int)
        self.xy = xy
        self.names = [model.cameras[c].name for c in self.cam_ids]
        self.sizes = [(model.cameras[c].intrinsics.width, model.cameras[c].intrinsics.height) for c in self.cam_ids]
        self.basis = self._gauge_basis(model)

    def _gauge_basis(self, model: SceneModel) -> np.ndarray:
        nc = len(self.cam_ids)
        basis = np.zeros((nc, N_LOCAL, N_LOCAL))
        if self.cfg.refine_intrinsics:
            basis[:, 6:, 6:] = np.eye(4)
        if not self.cfg.refine_poses:
            return basis
        if nc < 2:
            raise DegenerateGauge("pose refinement needs at least two cameras")
        c0 = model.cameras[self.cam_ids[0]].pose.center
        c1 = model.cameras[self.cam_ids[1]].pose.center
        base = c1 - c0
        if np.linalg.norm(base) <= 1e-12 * (1.0 + np.linalg.norm(c0)):
            raise DegenerateGauge("first two camera centers coincide; scale cannot be fixed")
        self.c0 = c0
        self.baseline = float(np.linalg.norm(base))
        basis[1, 0:3, 0:3] = np.eye(3)
        basis[1, 3:6, 3:5] = _tangent_basis(base)
        basis[2:, 0:6, 0:6] = np.eye(6)
        return basis

    def unpack(self, model: SceneModel):
        R = np.array([model.cameras[c].pose.rotation for c in self.cam_ids])
        C = np.array([model.cameras[c].pose.center for c in self.cam_ids])
        K = np.array([model.cameras[c].intrinsics.params for c in self.cam_ids])
        P = np.array([model.points[p] for p in self.pids]).reshape(-1, 3)
        return R, C, K, P

    def residuals(self, state, weights_mask):
        R, C, K, P = state
        uv, jc, jp = _batch_jacobians(P[self.pj], R[self.ci], C[self.ci], K[self.ci])
        return uv - self.xy, jc, jp

    def cost(self, state, mask) -> float:
        R, C, K, P = state
        Xc = np.einsum("kij,kj->ki", R[self.ci], P[self.pj] - C[self.ci])
        if np.any(Xc[mask, 2] <= 1e-12):
            return math.inf
        r = self._residual_only(state)
        s = np.einsum("ki,ki->k", r, r)[mask]
        rho, _ = robust_rho(s, self.cfg.loss, self.cfg.loss_scale)
        return float(np.sum(rho))

    def _residual_only(self, state):
        R, C, K, P = state
        Xc = np.einsum("kij,kj->ki", R[self.ci], P[self.pj] - C[self.ci])
        k = K[self.ci]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([k[:, 0] * Xc[:, 0] / Xc[:, 2] + k[:, 2], k[:, 1] * Xc[:, 1] / Xc[:, 2] + k[:, 3]], axis=1)
        return uv - self.xy

    def apply(self, state, dcam, dpts):
        R, C, K, P = state
        R2 = R.copy()
        C2 = C.copy()
        K2 = K.copy()
        for i in range(len(self.cam_ids)):
            d = self.basis[i] @ dcam[i]
            if not np.any(d):
                continue
            R2[i] = orthonormalize(rotvec_to_matrix(d[:3]) @ R[i])
            C2[i] = C[i] + d[3:6]
            K2[i] = K[i] + d[6:10]
            if i == 1 and self.cfg.refine_poses:
                v = C2[i] - self.c0
                C2[i] = self.c0 + self.baseline * v / np.linalg.norm(v)
        return R2, C2, K2, P + dpts

    def to_model(self, model: SceneModel, state) -> SceneModel:
        R, C, K, P = state
        out = model.copy()
        for i, c in enumerate(self.cam_ids):
            view = model.cameras[c]
            if not np.any(self.basis[i]):
                continue  # frozen camera: keep it bit-identical
            out.cameras[c] = ImageView(
                CameraPose.from_center(R[i], C[i]), view.intrinsics.with_params(K[i]), view.name
            )
        for j, p in enumerate(self.pids):
            out.points[p] = P[j].copy()
        return out


def _tangent_basis(v: np.ndarray) -> np.ndarray:
    """Orthonormal ``(3, 2)`` basis of the plane orthogonal to ``v``."""
    v = v / np.linalg.norm(v)
    a = np.eye(3)[int(np.argmin(np.abs(v)))]
    b1 = np.cross(v, a)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(v, b1)
    return np.stack([b1, b2], axis=1)


def bundle_adjust(model: SceneModel, cfg: Optional[BAConfig] = None) -> Tuple[SceneModel, BAReport]:
    """Levenberg-Marquardt minimisation of the robust reprojection cost.

    The cost is ``sum rho(||pi(X_j; cam_i) - x_ij||^2)``.  Each iteration solves
    the IRLS-weighted, Marquardt-damped normal equations through the Schur
    complement on the point blocks.  A step is accepted only when it lowers
    the cost, so the returned cost never exceeds the initial one.  Observations
    behind their camera at the start are left out and counted in the report.

    Raises
    ------
    DegenerateGauge
        Poses are variable but the gauge cannot be fixed.
    """
    cfg = cfg or BAConfig()
    prob = _Problem(model, cfg)
    state = prob.unpack(model)
    nc, npt = len(prob.cam_ids), len(prob.pids)

    R, C, K, P = state
    Xc0 = np.einsum("kij,kj->ki", R[prob.ci], P[prob.pj] - C[prob.ci]) if len(prob.ci) else np.zeros((0, 3))
    mask = Xc0[:, 2] > 1e-12
    excluded = int(np.sum(~mask))

    cost = prob.cost(state, mask) if len(prob.ci) else 0.0
    initial = cost
    lam = cfg.initial_lambda
    records = []
    cam_free = np.zeros((nc, N_LOCAL), dtype=bool)
    for i in range(nc):
        cam_free[i] = np.any(prob.basis[i] != 0, axis=0)
    free_flat = np.flatnonzero(cam_free.ravel())
    any_free = free_flat.size > 0 or cfg.refine_points
    converged = not any_free or len(prob.ci) == 0
    it = 0

    while not converged and it < cfg.max_iterations:
        it += 1
        r, jc, jp = prob.residuals(state, mask)
        s = np.einsum("ki,ki->k", r, r)
        _, w = robust_rho(s, cfg.loss, cfg.loss_scale)
        w = np.where(mask, w, 0.0)
        jc = jc @ prob.basis[prob.ci]  # local columns to gauge-masked slots
        wr = w[:, None] * r

        U = np.zeros((nc, N_LOCAL, N_LOCAL))
        np.add.at(U, prob.ci, np.einsum("k,kai,kaj->kij", w, jc, jc))
        gc = np.zeros((nc, N_LOCAL))
        np.add.at(gc, prob.ci, np.einsum("kai,ka->ki", jc, wr))
        V = np.zeros((npt, 3, 3))
        np.add.at(V, prob.pj, np.einsum("k,kai,kaj->kij", w, jp, jp))
        gp = np.zeros((npt, 3))
        np.add.at(gp, prob.pj, np.einsum("kai,ka->ki", jp, wr))
        W = np.zeros((nc, npt, N_LOCAL, 3))
        W[prob.ci, prob.pj] = np.einsum("k,kai,kaj->kij", w, jc, jp)

        grad_norm = max(np.abs(gc.ravel()[free_flat]).max(initial=0.0), np.abs(gp).max(initial=0.0) if cfg.refine_points else 0.0)
        if grad_norm < 1e-14:
            converged = True
            break

        step_taken = False
        while not step_taken:
            if cfg.refine_points:
                Vd = V + lam * V * np.eye(3) + 1e-12 * np.eye(3)
                Vinv = np.linalg.inv(Vd)
            n_free = free_flat.size
            dcam = np.zeros((nc, N_LOCAL))
            if n_free:
                Ud = U + lam * U * np.eye(N_LOCAL)
                S = np.zeros((nc * N_LOCAL, nc * N_LOCAL))
                for i in range(nc):
                    S[i * N_LOCAL : (i + 1) * N_LOCAL, i * N_LOCAL : (i + 1) * N_LOCAL] = Ud[i]
                rhs = -gc.reshape(-1).copy()
                if cfg.refine_points:
                    Wf = W.transpose(0, 2, 1, 3).reshape(nc * N_LOCAL, npt, 3)
                    WV = np.einsum("apj,pjk->apk", Wf, Vinv)
                    S -= WV.reshape(nc * N_LOCAL, -1) @ Wf.reshape(nc * N_LOCAL, -1).T
                    rhs += WV.reshape(nc * N_LOCAL, -1) @ gp.reshape(-1)
                Sf = S[np.ix_(free_flat, free_flat)]
                try:
                    sol = np.linalg.solve(Sf, rhs[free_flat])
                except np.linalg.LinAlgError:
                    sol = np.linalg.lstsq(Sf, rhs[free_flat], rcond=None)[0]
                flat = np.zeros(nc * N_LOCAL)
                flat[free_flat] = sol
                dcam = flat.reshape(nc, N_LOCAL)
            if cfg.refine_points:
                back = gp + np.einsum("cpij,ci->pj", W, dcam)
                dpts = -np.einsum("pij,pj->pi", Vinv, back)
            else:
                dpts = np.zeros((npt, 3))
            step_norm = float(np.sqrt(np.sum(dcam**2) + np.sum(dpts**2)))
            candidate = prob.apply(state, dcam, dpts)
            new_cost = prob.cost(candidate, mask)
            if new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                state, cost = candidate, new_cost
                lam = max(lam / 10.0, 1e-12)
                step_taken = True
                records.append((it, cost, lam, step_norm))
                if rel < cfg.function_tolerance or step_norm < 1e-12:
                    converged = True
            else:
                lam *= 10.0
                if lam > 1e12 or step_norm < 1e-14:
                    # no descent available at any damping: a stationary point
                    records.append((it, cost, lam, step_norm))
                    converged = True
                    break

    out = prob.to_model(model, state)
    report = BAReport(initial, cost, it, converged, records, excluded)
    log.info("bundle adjustment: cost %.6g -> %.6g in %d iterations", initial, cost, it)
    return out, report


# -- outlier filtering and the refinement loop ---------------------------------------


def filter_outliers(model: SceneModel, eps_f: float = 3.0) -> SceneModel:
    """Drop observations with reprojection error above ``eps_f``; tracks under two views go too."""
    errors = reprojection_errors(model)
    out = model.copy()
    k = 0
    for pid in sorted(model.tracks):
        track = out.tracks[pid]
        n = len(track.observations)
        keep = [o for o, e in zip(track.observations, errors[k : k + n]) if e <= eps_f]
        k += n
        if len(keep) < 2:
            del out.tracks[pid]
            del out.points[pid]
            continue
        track.observations = keep
        if track.reference is not None and track.reference not in track.image_ids:
            track.reference = None
    return out


def refine_loop(
    model: SceneModel,
    provider,
    decoder,
    iterations: int = 2,
    refine_cfg=None,
    ba_cfg: Optional[BAConfig] = None,
    history: Optional[list] = None,
) -> SceneModel:
    """Repeat track refinement, bundle adjustment and outlier filtering.

    When ``history`` is a list it receives one dict per iteration with the
    mean reprojection error after the iteration and the BA report.
    """
    from .refine import refine_tracks

    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    ba_cfg = ba_cfg or BAConfig()
    current = model
    for i in range(iterations):
        diagnostics: list = []
        refined = refine_tracks(current, provider, decoder, refine_cfg, diagnostics)
        adjusted, report = bundle_adjust(refined, ba_cfg)
        current = filter_outliers(adjusted, ba_cfg.eps_f)
        err = mean_reprojection_error(current)
        log.info("refine iteration %d: mean reprojection error %.4f px, %d points", i + 1, err, len(current.points))
        if history is not None:
            history.append(
                {"iteration": i + 1, "mean_error": err, "points": len(current.points), "report": report, "skipped": diagnostics}
            )
    return current
