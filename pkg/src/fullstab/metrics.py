"""Video-level quality metrics: retained area, warp anisotropy, path stability,
and PSNR/SSIM for comparing rendered content with ground truth."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geom import Frame, apply_homography, fit_homography, make_coord_grid, normalize_homography

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
MIN_STABILITY_FRAMES = 32
LOW_BINS = (2, 6)


@dataclass
class MetricsReport:
    cropping_ratio: float
    distortion_value: float
    stability_score: float
    cropping_series: list[float] = field(default_factory=list)
    distortion_series: list[float] = field(default_factory=list)
    stability_series: list[float] = field(default_factory=list)

    def __post_init__(self):
        for name in ("cropping_ratio", "distortion_value", "stability_score"):
            v = getattr(self, name)
            if not math.isnan(v):
                setattr(self, name, float(min(1.0, max(0.0, v))))

    def as_text(self) -> str:
        return (f"cropping_ratio {self.cropping_ratio:.6f}\n"
                f"distortion_value {self.distortion_value:.6f}\n"
                f"stability_score {self.stability_score:.6f}\n")

    def write_csv(self, path) -> None:
        n = max(len(self.cropping_series), len(self.distortion_series))
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["frame", "cropping", "distortion"])
            for i in range(n):
                c = self.cropping_series[i] if i < len(self.cropping_series) else ""
                d = self.distortion_series[i] if i < len(self.distortion_series) else ""
                wr.writerow([i, c, d])
            wr.writerow(["summary", self.cropping_ratio, self.distortion_value])
            wr.writerow(["stability", self.stability_score, ""])


# --------------------------------------------------------------------------
# cropping

def cropping_series(input_frames, output_frames) -> list[float]:
    input_frames = list(input_frames)
    output_frames = list(output_frames)
    if not input_frames or len(input_frames) != len(output_frames):
        raise ValueError("need two non-empty sequences of equal length")
    out = []
    for a, b in zip(input_frames, output_frames):
        out.append(float(np.count_nonzero(b.valid)) / float(a.height * a.width))
    return out


def cropping_ratio(input_frames, output_frames) -> float:
    """Mean fraction of the input frame area that the output renders validly."""
    return float(min(1.0, np.mean(cropping_series(input_frames, output_frames))))


# --------------------------------------------------------------------------
# distortion

def anisotropy(h: np.ndarray) -> float:
    """min/max singular value of the affine part of a homography."""
    h = normalize_homography(np.asarray(h, dtype=np.float64))
    sv = np.linalg.svd(h[:2, :2], compute_uv=False)
    if sv[0] <= 0:
        return 0.0
    return float(sv[-1] / sv[0])


def _transform_from_truth(a: Frame, b: Frame, step: int = 16):
    """Input->output correspondences through the ground-truth base coordinates."""
    if a.truth is None or b.truth is None:
        return None
    g = make_coord_grid(b.width, b.height).stacked()[::step, ::step]
    ok = b.valid[::step, ::step]
    base = b.truth.base_coords()[::step, ::step]
    src = apply_homography(np.linalg.inv(a.truth.homography), base)
    return src[ok], g[ok]


def _fit(t) -> np.ndarray | None:
    if t is None:
        return None
    if np.ndim(t) == 2 and np.shape(t) in ((3, 3), (2, 3)):
        m = np.asarray(t, dtype=np.float64)
        return m if m.shape == (3, 3) else np.vstack([m, [0, 0, 1]])
    src, dst = t
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) < 4:
        return None
    try:
        return fit_homography(src, dst)
    except np.linalg.LinAlgError:
        return None


def distortion_series(input_frames=None, output_frames=None, transforms=None) -> list[float]:
    """Per-frame anisotropy; unfittable frames are reported as NaN.

    ``transforms[k]`` is either a 3x3 (or 2x3) input->output matrix or a
    ``(src_points, dst_points)`` pair. Without transforms the correspondences
    come from ground-truth geometry carried by the frames.
    """
    if transforms is None:
        if input_frames is None or output_frames is None:
            raise ValueError("need frames or transforms")
        transforms = [_transform_from_truth(a, b) for a, b in zip(input_frames, output_frames)]
    out = []
    for k, t in enumerate(transforms):
        h = _fit(t)
        if h is None:
            log.warning("frame %d: no homography fit; skipped", k)
            out.append(float("nan"))
        else:
            out.append(anisotropy(h))
    return out


def distortion_value(input_frames=None, output_frames=None, transforms=None) -> float:
    """Worst-case (minimum) per-frame anisotropy, clamped to [0, 1]."""
    series = np.array(distortion_series(input_frames, output_frames, transforms))
    ok = ~np.isnan(series)
    if not ok.any():
        raise ValueError("no frame admitted a homography fit")
    return float(min(1.0, max(0.0, series[ok].min())))


# --------------------------------------------------------------------------
# stability

def path_stability(path) -> float:
    """Share of the path's AC energy in the lowest frequency bins.

    ``path`` is (N,) or (N, C); each channel's FFT power in bins 2..6 is
    divided by the power in bins 1..N/2 and the channel ratios are averaged.
    A channel without AC energy scores 1.
    """
    p = np.asarray(path, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    n = p.shape[0]
    if n < MIN_STABILITY_FRAMES:
        raise ValueError(f"stability needs at least {MIN_STABILITY_FRAMES} frames, got {n}")
    power = np.abs(np.fft.rfft(p, axis=0)) ** 2
    lo, hi = LOW_BINS
    scores = []
    for c in range(p.shape[1]):
        total = power[1:n // 2 + 1, c].sum()
        scale = max(1.0, float(np.abs(p[:, c]).max()) ** 2 * n * n)
        if total <= 1e-20 * scale:
            scores.append(1.0)
        else:
            scores.append(float(power[lo:hi + 1, c].sum() / total))
    return float(np.mean(scores))


def camera_path(pair_poses) -> np.ndarray:
    """(N, 3) cumulative (theta, dx, dy) of a chain of pair poses."""
    from .coarse import accumulate_trajectory
    traj = accumulate_trajectory(pair_poses)
    th = np.unwrap([p.theta for p in traj.poses])
    return np.stack([th, [p.dx for p in traj.poses], [p.dy for p in traj.poses]], axis=1)


def stability_score(frames, provider=None, workers: int = 1) -> float:
    """Stability of a frame sequence from pose fits between consecutive frames."""
    from .coarse import solve_pair_poses
    from .flow import pair_flows
    from .maskprop import binarize
    frames = list(frames)
    if len(frames) < MIN_STABILITY_FRAMES:
        raise ValueError(f"stability needs at least {MIN_STABILITY_FRAMES} frames, got {len(frames)}")
    flows, confs = pair_flows(frames, provider, workers)
    poses, _ = solve_pair_poses(flows, [binarize(c) for c in confs], workers=workers)
    return path_stability(camera_path(poses))


# --------------------------------------------------------------------------
# image fidelity

def _as_float(a) -> np.ndarray:
    a = a.data if isinstance(a, Frame) else a
    a = np.asarray(a, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def psnr(a, b, mask=None) -> float:
    """PSNR in dB for [0, 1] intensities, capped at 99 dB."""
    x, y = _as_float(a), _as_float(b)
    if x.shape != y.shape:
        raise ValueError(f"image sizes differ: {x.shape} vs {y.shape}")
    d = (x - y) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("mask selects no pixels")
        d = d[mask]
    mse = float(d.mean())
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_map(a, b, sigma: float = 1.5, win: int = 11, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM with a Gaussian window, averaged over channels."""
    x, y = _as_float(a), _as_float(b)
    if x.shape != y.shape:
        raise ValueError(f"image sizes differ: {x.shape} vs {y.shape}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    trunc = ((win - 1) / 2) / sigma

    def filt(v):
        return ndimage.gaussian_filter(v, sigma, truncate=trunc, mode="reflect")

    maps = []
    for c in range(x.shape[2]):
        xc, yc = x[..., c], y[..., c]
        mx, my = filt(xc), filt(yc)
        vx = filt(xc * xc) - mx * mx
        vy = filt(yc * yc) - my * my
        cov = filt(xc * yc) - mx * my
        maps.append(((2 * mx * my + c1) * (2 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return np.mean(maps, axis=0)


def ssim(a, b, mask=None) -> float:
    """Mean SSIM; without a mask the border of half a window is excluded."""
    m = ssim_map(a, b)
    if mask is None:
        r = 5
        if min(m.shape) <= 2 * r:
            return float(m.mean())
        return float(m[r:-r, r:-r].mean())
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask selects no pixels")
    return float(m[mask].mean())


def write_report(path, report: MetricsReport) -> None:
    Path(path).write_text(report.as_text())
