"""Geometric primitives shared by every stage.

Conventions used throughout the package:

* Images are ``(H, W, C)`` float arrays with intensities in ``[0, 1]``.
* A flow field is an ``(H, W, 2)`` float array ``(u, v)`` in pixels and is
  always used as a *backward* map: ``out(x) = src(x + flow(x))``.
* Masks are ``(H, W)`` bool arrays, confidence maps ``(H, W)`` floats.
* A homography (3x3) or align matrix (2x3) is a *forward* map from source
  pixel coordinates to output pixel coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

# Sample points this close outside the frame are snapped back onto it.
_EDGE_TOL = 1e-6


@dataclass(frozen=True)
class CoordGrid:
    x: np.ndarray
    y: np.ndarray
    normalized: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.shape

    def stacked(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=-1)

    def to_pixels(self) -> CoordGrid:
        if not self.normalized:
            return self
        h, w = self.shape
        return CoordGrid((self.x + 1.0) * (w - 1) / 2.0, (self.y + 1.0) * (h - 1) / 2.0, False)


def make_coord_grid(width: int, height: int, normalized: bool = False) -> CoordGrid:
    if width < 2 or height < 2:
        raise ValueError(f"grid needs width, height >= 2, got {width}x{height}")
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    if normalized:
        xs = 2.0 * xs / (width - 1) - 1.0
        ys = 2.0 * ys / (height - 1) - 1.0
    x, y = np.meshgrid(xs, ys)
    return CoordGrid(x, y, normalized)


def frame_center(width: int, height: int) -> tuple[float, float]:
    return ((width - 1) / 2.0, (height - 1) / 2.0)


def _wrap_angle(theta: float) -> float:
    return math.atan2(math.sin(theta), math.cos(theta))


@dataclass(frozen=True)
class AffinePose:
    """Similarity transform ``x -> s R(theta) (x - c) + c + (dx, dy)``.

    The rotation/scaling center ``c`` is not part of the pose; callers pass it
    (the frame center by default).
    """

    theta: float = 0.0
    s: float = 1.0
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        if not (self.s > 0 and math.isfinite(self.s)):
            raise ValueError(f"pose scale must be positive, got {self.s}")
        if not abs(self.theta) < math.pi:
            raise ValueError(f"pose angle must lie in (-pi, pi), got {self.theta}")

    @classmethod
    def identity(cls) -> AffinePose:
        return cls()

    def linear(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.s * np.array([[c, -s], [s, c]])

    def matrix(self, center=(0.0, 0.0)) -> np.ndarray:
        """3x3 matrix of the pose about ``center``."""
        m = np.eye(3)
        lin = self.linear()
        c = np.asarray(center, dtype=np.float64)
        m[:2, :2] = lin
        m[:2, 2] = c - lin @ c + (self.dx, self.dy)
        return m

    def compose(self, other: AffinePose) -> AffinePose:
        """``self o other``: apply ``other`` first (same center for both)."""
        t = self.linear() @ np.array([other.dx, other.dy]) + (self.dx, self.dy)
        return AffinePose(_wrap_angle(self.theta + other.theta), self.s * other.s,
                          float(t[0]), float(t[1]))

    def inverse(self) -> AffinePose:
        inv = np.linalg.inv(self.linear())
        t = -inv @ np.array([self.dx, self.dy])
        return AffinePose(_wrap_angle(-self.theta), 1.0 / self.s, float(t[0]), float(t[1]))

    @classmethod
    def from_matrix(cls, m: np.ndarray, center=(0.0, 0.0)) -> AffinePose:
        """Project a 2x3/3x3 affine matrix onto the nearest similarity."""
        m = np.asarray(m, dtype=np.float64)
        a = 0.5 * (m[0, 0] + m[1, 1])
        b = 0.5 * (m[1, 0] - m[0, 1])
        c = np.asarray(center, dtype=np.float64)
        t = m[:2, :2] @ c + m[:2, 2] - c
        return cls(math.atan2(b, a), math.hypot(a, b), float(t[0]), float(t[1]))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.theta, self.s, self.dx, self.dy)


# --------------------------------------------------------------------------
# homographies and align matrices

def normalize_homography(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape == (2, 3):
        h = np.vstack([h, [0.0, 0.0, 1.0]])
    if h.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {h.shape}")
    if abs(h[2, 2]) < 1e-15:
        raise ValueError("homography has h22 == 0")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= 1e-12:
        raise ValueError("homography is singular")
    return h


def check_align_matrix(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape == (3, 3):
        m = normalize_homography(m)[:2]
    if m.shape != (2, 3):
        raise ValueError(f"align matrix must be 2x3, got {m.shape}")
    if abs(np.linalg.det(m[:, :2])) <= 1e-12:
        raise ValueError("align matrix is singular")
    return m


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map ``(..., 2)`` points through a 3x3 (or 2x3) matrix."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape == (2, 3):
        h = np.vstack([h, [0.0, 0.0, 1.0]])
    x, y = pts[..., 0], pts[..., 1]
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    return np.stack([(h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w,
                     (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w], axis=-1)


def homography_flow(h: np.ndarray, width: int, height: int) -> np.ndarray:
    """Backward flow that renders ``src`` transformed forward by ``h``.

    ``out(x) = src(h^-1 x)``, so the flow is ``h^-1(x) - x``.
    """
    hinv = np.linalg.inv(normalize_homography(h))
    grid = make_coord_grid(width, height).stacked()
    return apply_homography(hinv, grid) - grid


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares DLT fit with Hartley normalization, ``dst ~ H src``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) < 4:
        raise ValueError("need at least 4 correspondences")

    def _norm(p):
        mean = p.mean(axis=0)
        scale = math.sqrt(2) / max(np.sqrt(((p - mean) ** 2).sum(axis=1)).mean(), 1e-12)
        t = np.array([[scale, 0, -scale * mean[0]], [0, scale, -scale * mean[1]], [0, 0, 1]])
        return apply_homography(t, p), t

    ps, ts = _norm(src)
    pd, td = _norm(dst)
    n = len(ps)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = ps
    a[0::2, 2] = 1
    a[0::2, 6:8] = -pd[:, :1] * ps
    a[0::2, 8] = -pd[:, 0]
    a[1::2, 3:5] = ps
    a[1::2, 5] = 1
    a[1::2, 6:8] = -pd[:, 1:] * ps
    a[1::2, 8] = -pd[:, 1]
    _, sv, vt = np.linalg.svd(a, full_matrices=False)
    if sv[-2] < 1e-10 * sv[0]:
        raise np.linalg.LinAlgError("degenerate correspondences for homography fit")
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ h @ ts
    return normalize_homography(h)


# --------------------------------------------------------------------------
# frames

@dataclass
class FrameTruth:
    """Ground-truth geometry attached to synthetic frames.

    ``homography`` maps frame pixels to base-image coordinates. When the frame
    has been warped by a non-projective field, ``coords`` holds the dense map
    and ``homography`` is only a least-squares approximation of it.
    ``movers`` marks pixels covered by independently moving objects.
    """

    homography: np.ndarray
    movers: np.ndarray
    coords: np.ndarray | None = None

    def base_coords(self) -> np.ndarray:
        if self.coords is not None:
            return self.coords
        h, w = self.movers.shape
        return apply_homography(self.homography, make_coord_grid(w, h).stacked())


@dataclass
class Frame:
    data: np.ndarray
    valid: np.ndarray = None
    truth: FrameTruth | None = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"frame data must be HxWx1 or HxWx3, got {data.shape}")
        self.data = data
        if self.valid is None:
            self.valid = np.ones(data.shape[:2], dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != data.shape[:2]:
            raise ValueError("valid mask does not match frame size")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def gray(self) -> np.ndarray:
        if self.channels == 1:
            return self.data[..., 0].astype(np.float64)
        return self.data.astype(np.float64) @ np.array([0.299, 0.587, 0.114])

    def copy(self) -> Frame:
        return replace(self, data=self.data.copy(), valid=self.valid.copy())


def check_flow(flow: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be HxWx2, got {flow.shape}")
    if shape is not None and flow.shape[:2] != tuple(shape):
        raise ValueError(f"flow shape {flow.shape[:2]} does not match {tuple(shape)}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    return flow


# --------------------------------------------------------------------------
# affine-induced flow

def affine_flow(pose: AffinePose, grid: CoordGrid, center=None) -> np.ndarray:
    """Displacement each pixel undergoes under ``pose`` about ``center``."""
    if grid.normalized:
        raise ValueError("affine_flow expects a pixel-coordinate grid")
    h, w = grid.shape
    if center is None:
        center = frame_center(w, h)
    m = pose.matrix(center)
    u = m[0, 0] * grid.x + m[0, 1] * grid.y + m[0, 2] - grid.x
    v = m[1, 0] * grid.x + m[1, 1] * grid.y + m[1, 2] - grid.y
    return np.stack([u, v], axis=-1)


def residual_flow(flow: np.ndarray, pose: AffinePose, grid: CoordGrid, center=None) -> np.ndarray:
    """Flow left over after removing the displacement induced by ``pose``."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape != grid.shape + (2,):
        raise ValueError(f"flow shape {flow.shape} does not match grid {grid.shape}")
    return flow - affine_flow(pose, grid, center)


# --------------------------------------------------------------------------
# sampling and warping

def _prepare_coords(x, y, width, height):
    inside = ((x >= -_EDGE_TOL) & (x <= width - 1 + _EDGE_TOL)
              & (y >= -_EDGE_TOL) & (y <= height - 1 + _EDGE_TOL))
    x = np.clip(x, 0.0, width - 1.0)
    y = np.clip(y, 0.0, height - 1.0)
    return x, y, inside


def sample_bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray, valid: np.ndarray | None = None):
    """Bilinearly sample ``img`` (HxW or HxWxC) at float coordinates.

    Coordinates outside the image are clamped to the border. Returns
    ``(values, ok)`` where ``ok`` is false for samples outside the image or
    touching an invalid pixel with non-zero weight.
    """
    height, width = img.shape[:2]
    x, y, ok = _prepare_coords(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64),
                               width, height)
    x0 = np.minimum(np.floor(x).astype(np.intp), width - 2) if width > 1 else np.zeros_like(x, np.intp)
    y0 = np.minimum(np.floor(y).astype(np.intp), height - 2) if height > 1 else np.zeros_like(y, np.intp)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    flat = img.reshape(height * width, -1)
    i00 = y0 * width + x0
    i01 = y0 * width + x1
    i10 = y1 * width + x0
    i11 = y1 * width + x1
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    out = (flat[i00] * w00[..., None] + flat[i01] * w01[..., None]
           + flat[i10] * w10[..., None] + flat[i11] * w11[..., None])
    if img.ndim == 2:
        out = out[..., 0]
    if valid is not None:
        vflat = valid.reshape(-1)
        ok &= ((w00 == 0) | vflat[i00]) & ((w01 == 0) | vflat[i01])
        ok &= ((w10 == 0) | vflat[i10]) & ((w11 == 0) | vflat[i11])
    return out, ok


def sample_nearest(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    height, width = img.shape[:2]
    xi = np.floor(np.asarray(x) + 0.5).astype(np.intp)
    yi = np.floor(np.asarray(y) + 0.5).astype(np.intp)
    ok = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
    return img[np.clip(yi, 0, height - 1), np.clip(xi, 0, width - 1)], ok


def _warp_truth(truth: FrameTruth, field_or_h, width: int, height: int) -> FrameTruth:
    if np.ndim(field_or_h) == 2:
        hinv = np.linalg.inv(normalize_homography(field_or_h))
        if truth.coords is None:
            movers, _ = sample_nearest(truth.movers, *_grid_map(hinv, width, height))
            return FrameTruth(truth.homography @ hinv, movers)
        flow = homography_flow(field_or_h, width, height)
    else:
        flow = field_or_h
    grid = make_coord_grid(width, height).stacked()
    pts = grid + flow
    if truth.coords is None:
        coords = apply_homography(truth.homography, pts)
    else:
        coords, _ = sample_bilinear(truth.coords, pts[..., 0], pts[..., 1])
    movers, _ = sample_nearest(truth.movers, pts[..., 0], pts[..., 1])
    step = max(1, min(width, height) // 24)
    sub = (slice(None, None, step), slice(None, None, step))
    approx = fit_homography(grid[sub], coords[sub])
    return FrameTruth(approx, movers, coords)


def _grid_map(h: np.ndarray, width: int, height: int):
    pts = apply_homography(h, make_coord_grid(width, height).stacked())
    return pts[..., 0], pts[..., 1]


def warp_frame(src: Frame, field_or_h: np.ndarray) -> Frame:
    """Backward-warp ``src`` by a flow field, or forward-apply a homography.

    The output is invalid wherever the sample point leaves the source's valid
    region. Invalid output pixels hold zeros.
    """
    if np.ndim(field_or_h) == 2:
        hinv = np.linalg.inv(normalize_homography(field_or_h))
        x, y = _grid_map(hinv, src.width, src.height)
    else:
        flow = check_flow(field_or_h, (src.height, src.width))
        grid = make_coord_grid(src.width, src.height)
        x, y = grid.x + flow[..., 0], grid.y + flow[..., 1]
    values, ok = sample_bilinear(src.data, x, y, src.valid)
    values = np.where(ok[..., None], values, 0).astype(src.data.dtype)
    truth = None
    if src.truth is not None:
        truth = _warp_truth(src.truth, field_or_h, src.width, src.height)
    return Frame(values, ok, truth)


def warp_mask(mask: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Nearest-neighbour backward warp of a boolean mask; outside -> False."""
    mask = np.asarray(mask, dtype=bool)
    flow = check_flow(flow)
    if flow.shape[:2] != mask.shape:
        raise ValueError(f"mask {mask.shape} and flow {flow.shape[:2]} differ in size")
    h, w = mask.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    vals, ok = sample_nearest(mask, xs + flow[..., 0], ys + flow[..., 1])
    return vals & ok


def compose_flows(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Flow of backward-warping by ``second`` and then by ``first``.

    ``warp(warp(img, second), first) == warp(img, compose_flows(first, second))``
    up to interpolation.
    """
    h, w = first.shape[:2]
    grid = make_coord_grid(w, h)
    xs = grid.x + first[..., 0]
    ys = grid.y + first[..., 1]
    s, _ = sample_bilinear(second, xs, ys)
    return first + s


class RankDeficientError(np.linalg.LinAlgError):
    """Raised when a fit has too little or degenerate support."""


def fit_similarity(src: np.ndarray, dst: np.ndarray, weights: np.ndarray | None = None,
                   center=(0.0, 0.0)) -> AffinePose:
    """Weighted least-squares similarity with ``pose(src) ~ dst`` about ``center``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    c = np.asarray(center, dtype=np.float64)
    u = src - c
    r = dst - c
    w = np.ones(len(u)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if np.count_nonzero(w) < 2:
        raise RankDeficientError("similarity fit needs at least two weighted points")
    ux, uy = np.ascontiguousarray(u.T)
    rx, ry = np.ascontiguousarray(r.T)
    return similarity_from_columns(ux, uy, rx, ry, w)


def similarity_from_columns(ux, uy, rx, ry, w=None) -> AffinePose:
    """Closed-form weighted similarity ``r ~ s R u + t`` from coordinate columns.

    Coordinates are expected to be already centered on the rotation center.
    """
    if w is None:
        wsum = float(len(ux))
        wux, wuy = ux, uy
        mu = np.array([ux.sum(), uy.sum()]) / wsum
        mr = np.array([rx.sum(), ry.sum()]) / wsum
    else:
        wsum = float(w.sum())
        if wsum <= 0:
            raise RankDeficientError("similarity fit has no weight")
        wux, wuy = w * ux, w * uy
        mu = np.array([wux.sum(), wuy.sum()]) / wsum
        mr = np.array([w @ rx, w @ ry]) / wsum
    raw_uu = float(wux @ ux + wuy @ uy)
    suu = raw_uu - wsum * float(mu @ mu)
    sa = float(wux @ rx + wuy @ ry) - wsum * float(mu @ mr)
    sb = float(wux @ ry - wuy @ rx) - wsum * float(mu[0] * mr[1] - mu[1] * mr[0])
    if not np.isfinite(suu) or suu <= 1e-12 * (raw_uu + wsum):
        raise RankDeficientError("similarity fit is rank deficient")
    a, b = sa / suu, sb / suu
    if a == 0.0 and b == 0.0:
        raise RankDeficientError("similarity fit collapsed to zero scale")
    t = mr - np.array([a * mu[0] - b * mu[1], b * mu[0] + a * mu[1]])
    return AffinePose(math.atan2(b, a), math.hypot(a, b), float(t[0]), float(t[1]))
