"""Dense flow plus confidence providers and Middlebury ``.flo`` I/O.

Two providers share one interface. The *oracle* reads the exact ground-truth
geometry attached to synthetic frames; the *classical* provider is a
coarse-to-fine block matcher whose confidence comes from forward/backward
consistency gated by local texture.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geom import (Frame, apply_homography, check_flow, make_coord_grid, sample_bilinear,
                   sample_nearest)

log = logging.getLogger(__name__)

FLO_MAGIC = 202021.25


class FlowFormatError(ValueError):
    pass


@dataclass
class FlowProvider:
    kind: str = "oracle"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("oracle", "classical"):
            raise ValueError(f"unknown flow provider {self.kind!r}")

    def get(self, key, default):
        return self.params.get(key, default)


# --------------------------------------------------------------------------
# confidence

def fb_confidence(forward: np.ndarray, backward: np.ndarray, tol: float = 1.0) -> np.ndarray:
    """exp(-|f(x) + b(x + f(x))| / tol); zero where x + f(x) leaves the frame."""
    forward = check_flow(forward)
    backward = check_flow(backward, forward.shape[:2])
    if tol <= 0:
        raise ValueError("tol must be positive")
    h, w = forward.shape[:2]
    grid = make_coord_grid(w, h)
    b, ok = sample_bilinear(backward, grid.x + forward[..., 0], grid.y + forward[..., 1])
    err = np.hypot(forward[..., 0] + b[..., 0], forward[..., 1] + b[..., 1])
    return np.where(ok, np.clip(np.exp(-err / tol), 0.0, 1.0), 0.0)


def texture_gate(gray: np.ndarray, floor: float = 2e-5, window: int = 7) -> np.ndarray:
    """True where the local mean gradient energy reaches ``floor``."""
    gy, gx = np.gradient(gray)
    energy = ndimage.uniform_filter(gx * gx + gy * gy, window, mode="nearest")
    return energy >= floor


# --------------------------------------------------------------------------
# oracle

def _invert_dense(coords: np.ndarray, approx: np.ndarray, targets: np.ndarray,
                  iters: int = 30, tol: float = 1e-9) -> np.ndarray:
    """Points ``y`` with ``coords(y) == targets``, by Newton steps on the dense map.

    ``approx`` is a homography close to ``coords`` and supplies the start.
    Only points that have not converged are iterated further.
    """
    h, w = coords.shape[:2]
    y = apply_homography(np.linalg.inv(approx), targets).reshape(-1, 2)
    tg = targets.reshape(-1, 2)
    gy_x, gx_x = np.gradient(coords[..., 0])
    gy_y, gx_y = np.gradient(coords[..., 1])
    stack = np.stack([coords[..., 0], coords[..., 1], gx_x, gy_x, gx_y, gy_y], axis=-1)
    active = np.arange(len(y))
    for _ in range(iters):
        ya = y[active]
        s, _ = sample_bilinear(stack, ya[:, 0], ya[:, 1])
        rx = tg[active, 0] - s[:, 0]
        ry = tg[active, 1] - s[:, 1]
        a, b, c, d = s[:, 2], s[:, 3], s[:, 4], s[:, 5]
        det = a * d - b * c
        bad = np.abs(det) < 1e-12
        det = np.where(bad, 1.0, det)
        sx = np.where(bad, 0.0, (d * rx - b * ry) / det)
        sy = np.where(bad, 0.0, (a * ry - c * rx) / det)
        ya = ya + np.stack([sx, sy], axis=1)
        y[active] = ya
        # points that leave the map's domain cannot settle; they are masked by the caller
        inside = (ya[:, 0] >= 0) & (ya[:, 0] <= w - 1) & (ya[:, 1] >= 0) & (ya[:, 1] <= h - 1)
        keep = inside & (np.maximum(np.abs(sx), np.abs(sy)) >= tol)
        active = active[keep]
        if active.size == 0:
            break
    return y.reshape(targets.shape)


def oracle_flow(src: Frame, tgt: Frame) -> tuple[np.ndarray, np.ndarray]:
    if src.truth is None or tgt.truth is None:
        raise ValueError("oracle provider needs frames carrying ground truth")
    h, w = tgt.height, tgt.width
    targets = tgt.truth.base_coords()
    if src.truth.coords is None:
        pts = apply_homography(np.linalg.inv(src.truth.homography), targets)
    else:
        pts = _invert_dense(src.truth.coords, src.truth.homography, targets)
    grid = make_coord_grid(w, h).stacked()
    flow = pts - grid
    inside = ((pts[..., 0] >= 0) & (pts[..., 0] <= w - 1)
              & (pts[..., 1] >= 0) & (pts[..., 1] <= h - 1))
    _, src_ok = sample_bilinear(src.data, pts[..., 0], pts[..., 1], src.valid)
    src_mov, _ = sample_nearest(src.truth.movers, pts[..., 0], pts[..., 1])
    conf = inside & src_ok & tgt.valid & ~tgt.truth.movers & ~src_mov
    return flow, conf.astype(np.float64)


# --------------------------------------------------------------------------
# classical block matching

def _pyramid(gray: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [gray]
    for _ in range(levels - 1):
        g = ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")
        pyr.append(g[::2, ::2])
    return pyr


def _upsample_flow(flow: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    ch, cw = flow.shape[:2]
    ys = (np.arange(h) + 0.5) / 2.0 - 0.5
    xs = (np.arange(w) + 0.5) / 2.0 - 0.5
    yy, xx = np.meshgrid(np.clip(ys, 0, ch - 1), np.clip(xs, 0, cw - 1), indexing="ij")
    up, _ = sample_bilinear(flow, xx, yy)
    return 2.0 * up


def _match_level(src: np.ndarray, tgt: np.ndarray, init: np.ndarray, radius: int,
                 block: int) -> np.ndarray:
    h, w = tgt.shape
    grid = make_coord_grid(w, h)
    bx = grid.x + init[..., 0]
    by = grid.y + init[..., 1]
    n = 2 * radius + 1
    cost = np.empty((n, n, h, w))
    for iy, dy in enumerate(range(-radius, radius + 1)):
        for ix, dx in enumerate(range(-radius, radius + 1)):
            vals, ok = sample_bilinear(src, bx + dx, by + dy)
            okf = ok.astype(np.float64)
            diff = np.where(ok, vals - tgt, 0.0)
            # average only over in-bounds samples so blocks straddling the edge still match
            num = ndimage.uniform_filter(diff * diff, block, mode="nearest")
            den = ndimage.uniform_filter(okf, block, mode="nearest")
            cost[iy, ix] = np.where(den > 0.3, num / np.maximum(den, 1e-12), 1e3)
    flat = cost.reshape(n * n, h, w)
    best = np.argmin(flat, axis=0)
    by_i, bx_i = np.divmod(best, n)
    c0 = np.take_along_axis(flat, best[None], 0)[0]

    def _sub(idx, axis):
        lo = np.clip(idx - 1, 0, n - 1)
        hi = np.clip(idx + 1, 0, n - 1)
        if axis == 0:
            cm = flat[lo * n + bx_i, np.arange(h)[:, None], np.arange(w)[None]]
            cp = flat[hi * n + bx_i, np.arange(h)[:, None], np.arange(w)[None]]
        else:
            cm = flat[by_i * n + lo, np.arange(h)[:, None], np.arange(w)[None]]
            cp = flat[by_i * n + hi, np.arange(h)[:, None], np.arange(w)[None]]
        den = cm - 2.0 * c0 + cp
        off = np.where(den > 1e-15, (cm - cp) / (2.0 * np.where(den > 1e-15, den, 1.0)), 0.0)
        off = np.where((idx > 0) & (idx < n - 1) & (c0 > 1e-14), off, 0.0)
        return np.clip(off, -0.5, 0.5)

    dy = by_i - radius + _sub(by_i, 0)
    dx = bx_i - radius + _sub(bx_i, 1)
    flow = init + np.stack([dx, dy], axis=-1)
    return np.stack([ndimage.median_filter(flow[..., i], size=5, mode="nearest")
                     for i in range(2)], axis=-1)


def block_match_flow(src_gray: np.ndarray, tgt_gray: np.ndarray, levels: int = 3,
                     radius: int = 8, refine_radius: int = 2, block: int = 7) -> np.ndarray:
    """Backward flow on the target grid: ``tgt(x) ~ src(x + flow(x))``."""
    ps = _pyramid(src_gray, levels)
    pt = _pyramid(tgt_gray, levels)
    flow = np.zeros(pt[-1].shape + (2,))
    for lvl in range(levels - 1, -1, -1):
        if flow.shape[:2] != pt[lvl].shape:
            flow = _upsample_flow(flow, pt[lvl].shape)
        r = radius if lvl == levels - 1 else refine_radius
        flow = _match_level(ps[lvl], pt[lvl], flow, r, block)
    return flow


def classical_flow(src: Frame, tgt: Frame, provider: FlowProvider):
    levels = provider.get("levels", 3)
    radius = provider.get("radius", 8)
    block = provider.get("block", 7)
    tol = provider.get("fb_tol", 1.0)
    sg, tg = src.gray(), tgt.gray()
    fwd = block_match_flow(sg, tg, levels, radius, block=block)
    bwd = block_match_flow(tg, sg, levels, radius, block=block)
    conf = fb_confidence(fwd, bwd, tol)
    conf *= texture_gate(tg, provider.get("texture_floor", 2e-5))
    grid = make_coord_grid(tgt.width, tgt.height)
    _, ok = sample_bilinear(src.data, grid.x + fwd[..., 0], grid.y + fwd[..., 1], src.valid)
    conf = np.where(ok & tgt.valid, conf, 0.0)
    return fwd, conf


def estimate_flow(src: Frame, tgt: Frame, provider: FlowProvider | None = None):
    """Backward flow from ``tgt`` into ``src`` and its confidence in [0, 1]."""
    if src.data.shape[:2] != tgt.data.shape[:2]:
        raise ValueError(f"frame sizes differ: {src.data.shape[:2]} vs {tgt.data.shape[:2]}")
    provider = provider or FlowProvider()
    if provider.kind == "oracle":
        return oracle_flow(src, tgt)
    return classical_flow(src, tgt, provider)


def pair_flows(frames, provider: FlowProvider | None = None, workers: int = 1):
    """Flows ``Y_k`` on frame k's grid pointing into frame k+1, with confidences."""
    pairs = [(frames[k + 1], frames[k]) for k in range(len(frames) - 1)]
    if workers > 1 and len(pairs) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(lambda p: estimate_flow(p[0], p[1], provider), pairs))
    else:
        out = [estimate_flow(s, t, provider) for s, t in pairs]
    return [o[0] for o in out], [o[1] for o in out]


# --------------------------------------------------------------------------
# .flo files

def write_flo(flow: np.ndarray, path) -> None:
    flow = check_flow(flow)
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(flow.astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    magic, w, h = struct.unpack("<fii", raw[:12])
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    if w < 1 or h < 1:
        raise FlowFormatError(f"{path}: bad dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) != need:
        raise FlowFormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return data.astype(np.float32)
