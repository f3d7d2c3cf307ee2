"""Pixel-level stabilization by direct minimization of a motion loss.

After coarse alignment, the flow between consecutive output frames is
``F_k``. Warp fields ``W_k`` (one per interior frame of a window, the two end
frames pinned at zero) are chosen to minimize

    sum_k | F_k(x) + W_k(x) - W_{k+1}(x + F_k(x)) |^2   over the shared masks
    + lambda_reg * |Laplacian W_k|^2                   on a control grid

which is the flow left between the re-warped frames k and k+1. ``W_k`` lives
on a coarse bilinear control grid, so the loss is quadratic in the control
values and is minimized by conjugate gradients with exact line search.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .geom import (CoordGrid, Frame, check_align_matrix, check_flow, make_coord_grid,
                   normalize_homography, sample_bilinear, sample_nearest, warp_frame)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WarpSolveConfig:
    grid_stride: int = 16
    iters: int = 200
    step: float = 1.0
    lambda_reg: float = 0.1
    eval_stride: int = 4
    window: int = 7
    tol: float = 1e-10

    def __post_init__(self):
        if self.grid_stride < 4:
            raise ValueError("grid_stride must be >= 4")
        if not 0 < self.step < 2:
            raise ValueError("step must lie in (0, 2)")
        if self.iters < 1 or self.eval_stride < 1 or self.window < 2:
            raise ValueError("iters, eval_stride must be >= 1 and window >= 2")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")


@dataclass
class WarpSolveResult:
    fields: list[np.ndarray]          # W_0 .. W_N, ends exactly zero
    objective: list[float] = field(default_factory=list)
    status: str = "ok"


# --------------------------------------------------------------------------
# input flow

def residual_pair_flow(y_k: np.ndarray, h_k, h_k1, grid: CoordGrid | None = None) -> np.ndarray:
    """Flow between aligned frames k and k+1, indexed by input-frame pixels.

    ``F_k(x) = H_{k+1}(x + Y_k(x)) - H_k(x)``. The matrices act in pixels; an
    affine map commutes with the affine pixel/normalized change of
    coordinates, so evaluating in either representation gives the same
    displacement once expressed in pixels.
    """
    y_k = check_flow(y_k)
    h, w = y_k.shape[:2]
    grid = make_coord_grid(w, h) if grid is None else grid.to_pixels()
    if grid.shape != (h, w):
        raise ValueError("grid and flow differ in size")
    m0 = check_align_matrix(h_k)
    m1 = check_align_matrix(h_k1)
    x, y = grid.x, grid.y
    xa, ya = x + y_k[..., 0], y + y_k[..., 1]
    u = (m1[0, 0] * xa + m1[0, 1] * ya + m1[0, 2]) - (m0[0, 0] * x + m0[0, 1] * y + m0[0, 2])
    v = (m1[1, 0] * xa + m1[1, 1] * ya + m1[1, 2]) - (m0[1, 0] * x + m0[1, 1] * y + m0[1, 2])
    return np.stack([u, v], axis=-1)


def flow_on_output_grid(f_k: np.ndarray, h_k, mask=None):
    """Resample an input-indexed field onto aligned frame k's pixel grid.

    Returns ``(field, mask, inside)`` where ``inside`` marks output pixels
    whose pre-image lies in the input frame.
    """
    m = normalize_homography(check_align_matrix(h_k))
    hh, ww = f_k.shape[:2]
    inv = np.linalg.inv(m)
    g = make_coord_grid(ww, hh)
    x = inv[0, 0] * g.x + inv[0, 1] * g.y + inv[0, 2]
    y = inv[1, 0] * g.x + inv[1, 1] * g.y + inv[1, 2]
    vals, ok = sample_bilinear(f_k, x, y)
    out_mask = None
    if mask is not None:
        mv, mok = sample_nearest(np.asarray(mask, dtype=bool), x, y)
        out_mask = mv & mok & ok
    return vals, out_mask, ok


# --------------------------------------------------------------------------
# control grid algebra

class ControlGrid:
    """Bilinear control lattice with nodes every ``stride`` pixels."""

    def __init__(self, width: int, height: int, stride: int):
        self.width, self.height, self.stride = width, height, stride
        self.nx = int(math.ceil((width - 1) / stride)) + 1
        self.ny = int(math.ceil((height - 1) / stride)) + 1
        self.size = self.nx * self.ny

    def interp(self, x: np.ndarray, y: np.ndarray) -> sparse.csr_matrix:
        """Sparse (n_points x n_nodes) bilinear interpolation matrix."""
        x = np.clip(np.asarray(x, dtype=np.float64).ravel(), 0, self.width - 1) / self.stride
        y = np.clip(np.asarray(y, dtype=np.float64).ravel(), 0, self.height - 1) / self.stride
        i = np.minimum(np.floor(x).astype(np.intp), self.nx - 2)
        j = np.minimum(np.floor(y).astype(np.intp), self.ny - 2)
        fx, fy = x - i, y - j
        n = len(x)
        rows = np.repeat(np.arange(n), 4)
        cols = np.stack([j * self.nx + i, j * self.nx + i + 1,
                         (j + 1) * self.nx + i, (j + 1) * self.nx + i + 1], axis=1).ravel()
        vals = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy],
                        axis=1).ravel()
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n, self.size))

    def laplacian(self) -> sparse.csr_matrix:
        """5-point Laplacian with reflecting (zero-flux) borders."""
        def _d2(n):
            if n == 1:
                return sparse.csr_matrix((1, 1))
            main = -2.0 * np.ones(n)
            main[0] = main[-1] = -1.0
            off = np.ones(n - 1)
            return sparse.diags([off, main, off], [-1, 0, 1], format="csr")
        return (sparse.kron(sparse.identity(self.ny), _d2(self.nx))
                + sparse.kron(_d2(self.ny), sparse.identity(self.nx))).tocsr()

    def upsample(self, nodes: np.ndarray) -> np.ndarray:
        """Full-resolution field from node values of shape (ny, nx, 2)."""
        g = make_coord_grid(self.width, self.height)
        xs = g.x / self.stride
        ys = g.y / self.stride
        out, _ = sample_bilinear(nodes, xs, ys)
        return out


# --------------------------------------------------------------------------
# objective

def smooth_loss(flows, masks, fields, eval_stride: int = 1) -> float:
    """Masked mean squared motion left between re-warped frames, summed over pairs.

    ``flows[k]`` and ``masks[k]`` live on aligned frame k; ``fields`` holds
    ``W_0 .. W_N`` at full resolution.
    """
    if len(fields) != len(flows) + 1:
        raise ValueError("need one more warp field than flows")
    total = 0.0
    for k, (f, m) in enumerate(zip(flows, masks)):
        sl = (slice(None, None, eval_stride), slice(None, None, eval_stride))
        h, w = f.shape[:2]
        g = make_coord_grid(w, h)
        fx, fy = f[..., 0][sl], f[..., 1][sl]
        px, py = g.x[sl] + fx, g.y[sl] + fy
        w1, _ = sample_bilinear(fields[k + 1], px, py)
        mk = np.asarray(m, dtype=bool)[sl]
        if not mk.any():
            continue
        r = f[sl] + fields[k][sl] - w1
        total += float((r[mk] ** 2).sum() / mk.size)
    return total


def _cg(apply_q, rhs, x0, iters, tol, step, energy):
    """Conjugate gradients on ``Q x = rhs`` recording the quadratic energy."""
    x = x0.copy()
    r = rhs - apply_q(x)
    p = r.copy()
    rr = float(r @ r)
    rr0 = max(rr, 1e-300)
    trace = [energy(x)]
    for _ in range(iters):
        if rr <= tol * tol * rr0 or rr == 0.0:
            break
        qp = apply_q(p)
        curv = float(p @ qp)
        if curv <= 0:
            break
        alpha = step * rr / curv
        x = x + alpha * p
        r = r - alpha * qp
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        trace.append(energy(x))
    return x, trace


def solve_warp_fields(flows, masks, cfg: WarpSolveConfig | None = None) -> WarpSolveResult:
    """Warp fields W_0..W_N for one window of N flows; W_0 = W_N = 0.

    ``flows[k]`` is the flow on aligned frame k pointing into frame k+1.
    """
    cfg = cfg or WarpSolveConfig()
    flows = [check_flow(f) for f in flows]
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if len(flows) != len(masks):
        raise ValueError("flows and masks differ in length")
    n = len(flows)
    if n == 0:
        raise ValueError("need at least one flow")
    h, w = flows[0].shape[:2]
    zeros = [np.zeros((h, w, 2)) for _ in range(n + 1)]
    if n == 1:
        return WarpSolveResult(zeros, [0.0], "ok")
    if not any(m.any() for m in masks):
        log.warning("all masks empty; returning zero warp fields")
        return WarpSolveResult(zeros, [0.0], "empty-masks")

    cg = ControlGrid(w, h, cfg.grid_stride)
    n_free = n - 1                                     # W_1 .. W_{N-1}
    lat = make_coord_grid(w, h)
    sl = (slice(None, None, cfg.eval_stride), slice(None, None, cfg.eval_stride))
    lx, ly = lat.x[sl].ravel(), lat.y[sl].ravel()
    base = cg.interp(lx, ly)
    # each lattice sample stands for eval_stride^2 pixels; scale so the data
    # term is counted per control cell like the regularizer
    area = (cfg.eval_stride / cfg.grid_stride) ** 2

    blocks, rhs_u, rhs_v, weights = [], [], [], []
    for k in range(n):
        f = flows[k]
        fu, fv = f[..., 0][sl].ravel(), f[..., 1][sl].ravel()
        # samples of W_{k+1} beyond the frame take the border value
        px, py = lx + fu, ly + fv
        mk = masks[k][sl].ravel()
        row = [None] * n_free
        if 1 <= k <= n_free:
            row[k - 1] = base
        if k + 1 <= n_free:
            row[k] = -cg.interp(px, py)
        blocks.append(row)
        rhs_u.append(-fu)
        rhs_v.append(-fv)
        weights.append(mk.astype(np.float64) * area)
    a = sparse.bmat([[b if b is not None else sparse.csr_matrix((len(lx), cg.size))
                      for b in row] for row in blocks], format="csr")
    dw = np.concatenate(weights)
    lap = cg.laplacian()
    reg = sparse.block_diag([lap.T @ lap] * n_free, format="csr") * cfg.lambda_reg
    q = (a.T @ sparse.diags(dw) @ a + reg).tocsr()

    solutions = []
    traces = []
    for b in (np.concatenate(rhs_u), np.concatenate(rhs_v)):
        rhs = a.T @ (dw * b)

        def energy(x, b=b):
            r = a @ x - b
            return float(dw @ (r * r) + x @ (reg @ x))

        x, trace = _cg(lambda v: q @ v, rhs, np.zeros(q.shape[0]), cfg.iters, cfg.tol,
                       cfg.step, energy)
        solutions.append(x)
        traces.append(trace)
    length = max(len(t) for t in traces)
    objective = [sum(t[min(i, len(t) - 1)] for t in traces) for i in range(length)]

    fields = [np.zeros((h, w, 2))]
    for j in range(n_free):
        nodes = np.stack([s[j * cg.size:(j + 1) * cg.size].reshape(cg.ny, cg.nx)
                          for s in solutions], axis=-1)
        fields.append(cg.upsample(nodes))
    fields.append(np.zeros((h, w, 2)))
    return WarpSolveResult(fields, objective, "ok")


def window_bounds(n_flows: int, window: int) -> list[tuple[int, int]]:
    """Flow-index ranges ``[a, b)`` of consecutive windows covering the video."""
    return [(a, min(a + window, n_flows)) for a in range(0, n_flows, window)]


def solve_video(flows, masks, cfg: WarpSolveConfig | None = None) -> tuple[list[np.ndarray], list]:
    """Warp field per frame (len(flows) + 1 of them), window by window."""
    cfg = cfg or WarpSolveConfig()
    h, w = flows[0].shape[:2]
    out = [np.zeros((h, w, 2)) for _ in range(len(flows) + 1)]
    results = []
    for a, b in window_bounds(len(flows), cfg.window):
        res = solve_warp_fields(flows[a:b], masks[a:b], cfg)
        for j in range(1, b - a):
            out[a + j] = res.fields[j]
        results.append(res)
    return out, results


def apply_warps(frames, fields) -> list[Frame]:
    """Backward-warp each frame by its field; zero fields leave frames untouched."""
    if len(frames) != len(fields):
        raise ValueError("frame count and field count differ")
    out = []
    for f, wf in zip(frames, fields):
        if wf is None or not np.any(wf):
            out.append(f.copy())
        else:
            out.append(warp_frame(f, wf))
    return out
