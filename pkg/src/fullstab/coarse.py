"""Image-level stabilization with a 4-parameter similarity camera model.

Pair poses come from a robust least-squares fit to masked flow, refined by
repeatedly fitting the residual flow. Poses are chained into a camera path,
the path is low-pass filtered, and each frame is warped by the difference
between its smoothed and raw pose.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .geom import (AffinePose, CoordGrid, Frame, RankDeficientError, affine_flow, check_flow,
                   fit_similarity, frame_center, similarity_from_columns, make_coord_grid, warp_frame)

MIN_SUPPORT = 16


@dataclass(frozen=True)
class PoseSolveConfig:
    max_iters: int = 10
    tol: float = 1e-6
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0 or self.huber_delta <= 0:
            raise ValueError("tol and huber_delta must be positive")


@dataclass(frozen=True)
class LossWeights:
    lambda_theta: float = 1.0
    lambda_s: float = 1.0
    lambda_t: float = 1.5
    lambda_grid: float = 2.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if min(self.lambda_theta, self.lambda_s, self.lambda_t, self.lambda_grid,
               self.epsilon) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class Trajectory:
    poses: list[AffinePose]
    smoothed: list[AffinePose] = field(default_factory=list)
    align: list[np.ndarray] = field(default_factory=list)
    center: tuple[float, float] = (0.0, 0.0)

    def __len__(self) -> int:
        return len(self.poses)


# --------------------------------------------------------------------------
# pose solve

def _huber(r: np.ndarray, delta: float) -> np.ndarray:
    return np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300))


def _check_support(ux: np.ndarray, uy: np.ndarray) -> None:
    n = len(ux)
    if n < MIN_SUPPORT:
        raise RankDeficientError(f"mask has {n} pixels; at least {MIN_SUPPORT} required")
    mx, my = ux.mean(), uy.mean()
    cxx = ux @ ux / n - mx * mx
    cyy = uy @ uy / n - my * my
    cxy = ux @ uy / n - mx * my
    ev = np.linalg.eigvalsh(np.array([[cxx, cxy], [cxy, cyy]]))
    if ev[-1] <= 0 or ev[0] <= 1e-10 * ev[-1]:
        raise RankDeficientError("mask support is collinear")


@lru_cache(maxsize=8)
def _centered_columns(h: int, w: int, cx: float, cy: float):
    gx = np.tile(np.arange(w, dtype=np.float64) - cx, h)
    gy = np.repeat(np.arange(h, dtype=np.float64) - cy, w)
    gx.flags.writeable = False
    gy.flags.writeable = False
    return gx, gy


def solve_pose(flow: np.ndarray, mask: np.ndarray, cfg: PoseSolveConfig | None = None,
               center=None, history: list | None = None) -> AffinePose:
    """Similarity pose explaining ``x -> x + flow(x)`` over the masked pixels.

    A Huber-weighted least-squares fit gives the first estimate; each round
    then fits a similarity to the residual flow and folds it into the pose,
    stopping once the masked mean residual stops changing by ``tol``.
    """
    cfg = cfg or PoseSolveConfig()
    flow = check_flow(flow)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != flow.shape[:2]:
        raise ValueError("mask and flow differ in size")
    h, w = mask.shape
    c = frame_center(w, h) if center is None else center
    gx, gy = _centered_columns(h, w, float(c[0]), float(c[1]))
    flat = flow.reshape(-1, 2)
    if mask.all():
        ux, uy = gx, gy
        fu, fv = np.ascontiguousarray(flat[:, 0]), np.ascontiguousarray(flat[:, 1])
    else:
        idx = np.flatnonzero(mask)
        ux, uy = gx.take(idx), gy.take(idx)
        fu, fv = flat[:, 0].take(idx), flat[:, 1].take(idx)
    _check_support(ux, uy)

    def _residual(p: AffinePose):
        m = p.linear()
        ru = ux * (1.0 - m[0, 0])
        ru -= m[0, 1] * uy
        ru += fu - p.dx
        rv = uy * (1.0 - m[1, 1])
        rv -= m[1, 0] * ux
        rv += fv - p.dy
        mag = ru * ru
        mag += rv * rv
        np.sqrt(mag, out=mag)
        return ru, rv, mag

    pose = similarity_from_columns(ux, uy, ux + fu, uy + fv)
    ru, rv, mag = _residual(pose)
    prev = float(mag.mean())
    if history is not None:
        history.append(prev)
    if prev < cfg.tol:
        return pose
    for _ in range(cfg.max_iters):
        wts = _huber(mag, cfg.huber_delta)
        inc = similarity_from_columns(ux, uy, ux + ru, uy + rv, wts)
        # residual pose as a flow adds linearly to the current one
        lin = pose.linear() + inc.linear() - np.eye(2)
        ds = math.sqrt(max(np.linalg.det(lin), 1e-300)) / pose.s
        dtheta = math.atan2(lin[1, 0] - lin[0, 1], lin[0, 0] + lin[1, 1]) - pose.theta
        pose = AffinePose(_wrap(pose.theta + dtheta), pose.s * ds,
                          pose.dx + inc.dx, pose.dy + inc.dy)
        ru, rv, mag = _residual(pose)
        cur = float(mag.mean())
        if history is not None:
            history.append(cur)
        if abs(prev - cur) < cfg.tol:
            break
        prev = cur
    return pose


def _wrap(theta: float) -> float:
    return (theta + math.pi) % (2 * math.pi) - math.pi


def solve_pair_poses(flows, masks, cfg: PoseSolveConfig | None = None, workers: int = 1):
    """Pose per pair; pairs whose mask is degenerate fall back to identity."""
    import logging
    log = logging.getLogger(__name__)

    def _one(k):
        try:
            return solve_pose(flows[k], masks[k], cfg), True
        except RankDeficientError as exc:
            log.warning("pair %d: %s; using identity", k, exc)
            return AffinePose.identity(), False

    idx = range(len(flows))
    if workers > 1 and len(flows) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(_one, idx))
    else:
        out = [_one(k) for k in idx]
    return [o[0] for o in out], [o[1] for o in out]


# --------------------------------------------------------------------------
# losses

def loss_gt(pred: AffinePose, gt: AffinePose, w: LossWeights) -> float:
    if gt.s == 0:
        raise ValueError("ground-truth scale must be non-zero")
    return (w.lambda_theta * abs(pred.theta - gt.theta)
            + w.lambda_s * abs(1.0 - pred.s / gt.s)
            + w.lambda_t * (abs(pred.dx - gt.dx) + abs(pred.dy - gt.dy)))


def loss_grid(pred: AffinePose, gt: AffinePose, grid: CoordGrid, epsilon: float) -> float:
    """Mean over grid points of the summed absolute coordinate gap plus epsilon.

    Poses act in pixels about the frame center; a normalized grid is mapped to
    pixels, transformed, and mapped back so both sides are compared in
    normalized units.
    """
    h, w = grid.shape
    c = frame_center(w, h)
    pix = grid.to_pixels().stacked().reshape(-1, 2)
    scale = np.array([2.0 / (w - 1), 2.0 / (h - 1)]) if grid.normalized else np.ones(2)

    def _apply(p):
        m = p.matrix(c)
        return (pix @ m[:2, :2].T + m[:2, 2]) * scale

    gap = _apply(gt) - _apply(pred) + epsilon
    return float(np.abs(gap).sum(axis=1).mean())


def pose_metrics(pred: AffinePose, gt: AffinePose, w: LossWeights | None = None,
                 grid: CoordGrid | None = None) -> tuple[float, float, float]:
    """(L_gt, L_grid, L_stab) between a predicted and a ground-truth pose."""
    w = w or LossWeights()
    if gt.s <= 0:
        raise ValueError("ground-truth scale must be positive")
    grid = grid or make_coord_grid(16, 16, normalized=True)
    lg = loss_gt(pred, gt, w)
    lgrid = loss_grid(pred, gt, grid, w.epsilon)
    return lg, lgrid, lg + w.lambda_grid * lgrid


# --------------------------------------------------------------------------
# trajectory

def accumulate_trajectory(pair_poses, center=(0.0, 0.0)) -> Trajectory:
    """Camera path relative to frame 0; ``pair_poses[k]`` maps frame k to k+1."""
    pair_poses = list(pair_poses)
    if not pair_poses:
        raise ValueError("need at least one pair pose")
    path = [AffinePose.identity()]
    for p in pair_poses:
        path.append(p.compose(path[-1]))
    return Trajectory(path, center=tuple(center))


def gaussian_kernel(window: int = 20, sigma: float | None = None) -> np.ndarray:
    """Normalized truncated Gaussian; an even window gains one tap to stay centered."""
    taps = window + 1 if window % 2 == 0 else window
    sigma = window / 4.0 if sigma is None else sigma
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = taps // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_channel(values: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = len(kernel) // 2
    v = np.asarray(values, dtype=np.float64)
    if r == 0:
        return v.copy()
    # point-reflect about the end samples so linear motion passes unchanged
    pad = np.pad(v, r, mode="reflect", reflect_type="odd") if len(v) > 1 else np.pad(v, r, mode="edge")
    return np.convolve(pad, kernel, mode="valid")


def smooth_trajectory(traj: Trajectory, window: int = 20, sigma: float | None = None,
                      frame_size=None) -> Trajectory:
    """Gaussian-filter the path in (theta, log s, dx, dy) and derive align matrices."""
    if len(traj.poses) < 2:
        raise ValueError("trajectory needs at least two frames")
    kernel = gaussian_kernel(window, sigma)
    theta = np.unwrap([p.theta for p in traj.poses])
    logs = np.log([p.s for p in traj.poses])
    dx = np.array([p.dx for p in traj.poses])
    dy = np.array([p.dy for p in traj.poses])
    st, sl, sx, sy = (smooth_channel(ch, kernel) for ch in (theta, logs, dx, dy))
    smoothed = [AffinePose(_wrap(a), math.exp(b), c, d) for a, b, c, d in zip(st, sl, sx, sy)]
    center = traj.center if frame_size is None else frame_center(*frame_size)
    align = [(s.compose(p.inverse())).matrix(center)[:2].copy()
             for s, p in zip(smoothed, traj.poses)]
    return Trajectory(list(traj.poses), smoothed, align, tuple(center))


def apply_alignment(frames, traj: Trajectory):
    """Warp every frame by its align matrix (input coords -> output coords)."""
    if len(frames) != len(traj.align):
        raise ValueError("frame count and trajectory length differ")
    out = []
    for f, m in zip(frames, traj.align):
        if np.allclose(m, [[1, 0, 0], [0, 1, 0]], rtol=0, atol=0):
            out.append(f.copy())
        else:
            out.append(warp_frame(f, m))
    return out, [np.asarray(m).copy() for m in traj.align]


def align_pose(m: np.ndarray, center) -> AffinePose:
    """Similarity parameters of an align matrix about ``center``."""
    return AffinePose.from_matrix(np.vstack([m, [0, 0, 1]]), center)


def write_trajectory(path, traj: Trajectory) -> None:
    lines = ["# idx theta s dx dy | smoothed theta s dx dy"]
    for i, p in enumerate(traj.poses):
        row = f"{i} " + " ".join(repr(float(v)) for v in p.as_tuple())
        if traj.smoothed:
            row += " " + " ".join(repr(float(v)) for v in traj.smoothed[i].as_tuple())
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> Trajectory:
    raw, smooth = [], []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()[1:]]
        raw.append(AffinePose(*vals[:4]))
        if len(vals) >= 8:
            smooth.append(AffinePose(*vals[4:8]))
    return Trajectory(raw, smooth)


def induced_flow(pose: AffinePose, width: int, height: int) -> np.ndarray:
    return affine_flow(pose, make_coord_grid(width, height))
