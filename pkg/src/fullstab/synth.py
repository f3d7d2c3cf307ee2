"""Model-based synthetic stable/unstable video pairs with exact ground truth.

A clip is rendered straight from a procedural base image: every frame is the
base sampled through a known homography, so the true correspondence between
any two frames is available in closed form. Independently moving sprites are
composited on top and recorded in per-frame object masks.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geom import (AffinePose, Frame, FrameTruth, apply_homography, fit_similarity,
                   frame_center, make_coord_grid, normalize_homography, sample_bilinear)
from .imageio import FRAME_PATTERN, read_image, read_mask, write_frames, write_mask

# Per-sprite footprint cap as a fraction of the frame; five sprites stay <= 40%.
MAX_SPRITE_AREA = 0.08
MAX_OBJECTS = 5


@dataclass
class SynthConfig:
    n_frames: int = 30
    theta_max: float = 10.0                      # degrees
    s_range: tuple[float, float] = (0.7, 1.3)
    t_max: tuple[float, float] = (100.0, 70.0)   # pixels (dx, dy)
    p_max: tuple[float, float] = (0.1, 0.15)     # per half-frame (normalized coords)
    unstable_p_range: tuple[float, float] = (1e-5, 5e-5)  # per pixel, magnitude
    jitter_theta: float = 1.0                    # degrees
    jitter_s: float = 0.02
    jitter_t: tuple[float, float] = (12.0, 12.0)
    jitter_mode: str = "independent"             # or "random_walk"
    crop: tuple[int, int] = (720, 480)           # width, height
    n_objects_max: int = 3
    small_fov: tuple[int, int] = (640, 360)
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if not (0 < self.s_range[0] <= self.s_range[1]):
            raise ValueError("s_range must be positive and ordered")
        if not (0 <= self.n_objects_max <= MAX_OBJECTS):
            raise ValueError(f"n_objects_max must be within [0, {MAX_OBJECTS}]")
        if self.jitter_mode not in ("independent", "random_walk"):
            raise ValueError(f"unknown jitter_mode {self.jitter_mode!r}")
        lo, hi = self.unstable_p_range
        if not 0 <= lo <= hi:
            raise ValueError("unstable_p_range must be ordered and non-negative")

    @classmethod
    def static(cls, **kw) -> SynthConfig:
        """All motion ranges zeroed."""
        base = dict(theta_max=0.0, s_range=(1.0, 1.0), t_max=(0.0, 0.0), p_max=(0.0, 0.0),
                    unstable_p_range=(0.0, 0.0), jitter_theta=0.0, jitter_s=0.0,
                    jitter_t=(0.0, 0.0), n_objects_max=0)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if isinstance(v, str):
                v = _parse_value(v)
            if isinstance(v, list):
                v = tuple(v)
            kw[f.name] = v
        return cls(**kw)


def _parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(_parse_value(t) for t in text.strip("()").split(",") if t.strip())
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


@dataclass(frozen=True)
class CameraParams:
    """Homography parameters; rotation in radians, perspective per pixel."""

    theta: float = 0.0
    s: float = 1.0
    dx: float = 0.0
    dy: float = 0.0
    px: float = 0.0
    py: float = 0.0

    def lerp(self, f: float) -> CameraParams:
        return CameraParams(f * self.theta, 1.0 + f * (self.s - 1.0), f * self.dx, f * self.dy,
                            f * self.px, f * self.py)

    def matrix(self, center) -> np.ndarray:
        """Similarity about ``center`` followed by a perspective term about it."""
        c = np.asarray(center, dtype=np.float64)
        to_c = np.array([[1, 0, -c[0]], [0, 1, -c[1]], [0, 0, 1.0]])
        from_c = np.array([[1, 0, c[0]], [0, 1, c[1]], [0, 0, 1.0]])
        cs, sn = math.cos(self.theta), math.sin(self.theta)
        sim = np.array([[self.s * cs, -self.s * sn, self.dx],
                        [self.s * sn, self.s * cs, self.dy], [0, 0, 1.0]])
        persp = np.array([[1, 0, 0], [0, 1, 0], [self.px, self.py, 1.0]])
        return from_c @ persp @ sim @ to_c


@dataclass
class Sprite:
    polygon: np.ndarray        # (K, 2) convex polygon, sprite-local coordinates
    texture: np.ndarray        # (T, T, C) texture sampled over the polygon's box
    start: np.ndarray          # (2,) center in stable frame coordinates
    velocity: np.ndarray       # px / frame
    spin: float                # rad / frame
    scale_amp: float
    scale_freq: float

    def pose(self, k: int) -> np.ndarray:
        """3x3 map from sprite-local to stable-frame coordinates at frame k."""
        s = 1.0 + self.scale_amp * math.sin(self.scale_freq * k)
        a = self.spin * k
        c = self.start + self.velocity * k
        return np.array([[s * math.cos(a), -s * math.sin(a), c[0]],
                         [s * math.sin(a), s * math.cos(a), c[1]], [0, 0, 1.0]])


@dataclass
class SynthClip:
    config: SynthConfig
    base: np.ndarray
    stable_sampling: list[np.ndarray]             # stable frame -> base coordinates
    stable_frames: list[Frame]
    unstable_frames: list[Frame] | None = None
    gt_homographies: list[np.ndarray] | None = None   # unstable -> stable coordinates
    gt_poses: list[AffinePose] | None = None          # unstable k -> unstable k+1
    object_masks: list[np.ndarray] | None = None      # unstable frames
    stable_object_masks: list[np.ndarray] | None = None
    sprites: list[Sprite] = field(default_factory=list)
    endpoint: CameraParams | None = None

    def __len__(self) -> int:
        return len(self.stable_frames)

    def unstable_sampling(self, k: int) -> np.ndarray:
        return self.stable_sampling[k] @ self.gt_homographies[k]


def _rng(cfg: SynthConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream])


# --------------------------------------------------------------------------
# parameter draws

def draw_camera_endpoint(cfg: SynthConfig, rng: np.random.Generator) -> CameraParams:
    w, h = cfg.crop
    hx, hy = w / 2.0, h / 2.0
    return CameraParams(
        theta=math.radians(rng.uniform(-cfg.theta_max, cfg.theta_max)),
        s=rng.uniform(*cfg.s_range),
        dx=rng.uniform(-cfg.t_max[0], cfg.t_max[0]),
        dy=rng.uniform(-cfg.t_max[1], cfg.t_max[1]),
        px=rng.uniform(-cfg.p_max[0], cfg.p_max[0]) / hx,
        py=rng.uniform(-cfg.p_max[1], cfg.p_max[1]) / hy,
    )


def draw_jitter(cfg: SynthConfig, rng: np.random.Generator) -> CameraParams:
    lo, hi = cfg.unstable_p_range
    px, py = rng.uniform(lo, hi, size=2) * rng.choice([-1.0, 1.0], size=2)
    return CameraParams(
        theta=math.radians(rng.uniform(-cfg.jitter_theta, cfg.jitter_theta)),
        s=1.0 + rng.uniform(-cfg.jitter_s, cfg.jitter_s),
        dx=rng.uniform(-cfg.jitter_t[0], cfg.jitter_t[0]),
        dy=rng.uniform(-cfg.jitter_t[1], cfg.jitter_t[1]),
        px=float(px), py=float(py),
    )


# --------------------------------------------------------------------------
# base image

def make_base_image(width: int, height: int, seed: int = 0, channels: int = 3) -> np.ndarray:
    """Procedural, richly textured RGB image in [0, 1]."""
    rng = np.random.default_rng([seed, 99])
    img = np.zeros((height, width, channels), dtype=np.float64)
    for sigma, weight in ((1.0, 0.6), (3.0, 0.9), (9.0, 0.8), (30.0, 0.6)):
        small = max(1, int(sigma // 3))
        sh, sw = -(-height // small), -(-width // small)
        noise = rng.standard_normal((sh, sw, channels))
        noise = ndimage.gaussian_filter(noise, (sigma / small, sigma / small, 0))
        if small > 1:
            noise = np.repeat(np.repeat(noise, small, axis=0), small, axis=1)[:height, :width]
            noise = ndimage.uniform_filter(noise, (small, small, 1))
        noise /= noise.std() + 1e-12
        img += weight * noise
    mix = rng.uniform(0.3, 1.0, size=(channels, channels))
    img = img @ (mix / mix.sum(axis=1, keepdims=True)).T
    n_rect = max(8, width * height // 20000)
    for _ in range(n_rect):
        rw, rh = rng.integers(8, max(9, width // 10)), rng.integers(8, max(9, height // 10))
        x0, y0 = rng.integers(0, max(1, width - rw)), rng.integers(0, max(1, height - rh))
        img[y0:y0 + rh, x0:x0 + rw] += rng.uniform(-1.5, 1.5, size=channels)
    img = (img - img.min()) / (img.max() - img.min() + 1e-12)
    return (0.1 + 0.8 * img).astype(np.float32)


def required_base_size(cfg: SynthConfig, sampling: list[np.ndarray]) -> tuple[int, int]:
    """Smallest centered base (width, height) that covers every sampled frame."""
    w, h = cfg.crop
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    c = np.asarray(frame_center(w, h))
    ext = np.zeros(2)
    for g in sampling:
        pts = apply_homography(g, corners)
        ext = np.maximum(ext, np.abs(pts - c).max(axis=0))
    return int(2 * math.ceil(ext[0]) + 4), int(2 * math.ceil(ext[1]) + 4)


def _centered_offset(base_shape, crop) -> np.ndarray:
    bh, bw = base_shape[:2]
    w, h = crop
    off = np.asarray(frame_center(bw, bh)) - np.asarray(frame_center(w, h))
    return np.array([[1, 0, off[0]], [0, 1, off[1]], [0, 0, 1.0]])


# --------------------------------------------------------------------------
# rendering

def _inside_convex(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    inside = np.ones(pts.shape[:-1], dtype=bool)
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        cross = (b[0] - a[0]) * (pts[..., 1] - a[1]) - (b[1] - a[1]) * (pts[..., 0] - a[0])
        inside &= cross >= 0
    return inside


def render_frame(base: np.ndarray, sampling: np.ndarray, crop, sprites=(), k: int = 0,
                 to_stable: np.ndarray | None = None) -> Frame:
    """Render frame ``k``: background through ``sampling`` plus sprites.

    ``to_stable`` maps frame coordinates to stable-frame coordinates (where the
    sprites live); identity for stable frames.
    """
    w, h = crop
    grid = make_coord_grid(w, h).stacked()
    coords = apply_homography(sampling, grid)
    data, ok = sample_bilinear(base, coords[..., 0], coords[..., 1])
    if not ok.all():
        raise ValueError("frame samples outside the base image")
    movers = np.zeros((h, w), dtype=bool)
    if sprites:
        stable_pts = grid if to_stable is None else apply_homography(to_stable, grid)
        for sp in sprites:
            local = apply_homography(np.linalg.inv(sp.pose(k)), stable_pts)
            inside = _inside_convex(sp.polygon, local)
            if not inside.any():
                continue
            lo = sp.polygon.min(axis=0)
            span = sp.polygon.max(axis=0) - lo
            tsz = sp.texture.shape[0] - 1
            tx = (local[..., 0][inside] - lo[0]) / span[0] * tsz
            ty = (local[..., 1][inside] - lo[1]) / span[1] * tsz
            vals, _ = sample_bilinear(sp.texture, tx, ty)
            data[inside] = vals
            movers |= inside
    truth = FrameTruth(np.asarray(sampling, dtype=np.float64), movers)
    return Frame(data.astype(np.float32), None, truth)


# --------------------------------------------------------------------------
# generator stages

def camera_inverses(cfg: SynthConfig, endpoint: CameraParams) -> list[np.ndarray]:
    """Per-frame maps from stable frame k to crop-aligned base coordinates."""
    center = frame_center(*cfg.crop)
    n = cfg.n_frames
    return [np.linalg.inv(endpoint.lerp(k / (n - 1)).matrix(center)) for k in range(n)]


def stable_sampling_homographies(cfg: SynthConfig, endpoint: CameraParams,
                                 base_shape) -> list[np.ndarray]:
    off = _centered_offset(base_shape, cfg.crop)
    return [off @ g for g in camera_inverses(cfg, endpoint)]


def gen_stable_video(base, cfg: SynthConfig, endpoint: CameraParams | None = None) -> SynthClip:
    """Stable clip: frame k views the base through the k/(N-1)-interpolated camera."""
    base_img = base.data if isinstance(base, Frame) else np.asarray(base, dtype=np.float32)
    if endpoint is None:
        endpoint = draw_camera_endpoint(cfg, _rng(cfg, 1))
    need_w, need_h = required_base_size(cfg, camera_inverses(cfg, endpoint))
    bh, bw = base_img.shape[:2]
    if bw < need_w or bh < need_h:
        raise ValueError(f"base image {bw}x{bh} is too small for this camera path; "
                         f"needs at least {need_w}x{need_h}")
    sampling = stable_sampling_homographies(cfg, endpoint, base_img.shape)
    frames = [render_frame(base_img, g, cfg.crop) for g in sampling]
    return SynthClip(cfg, base_img, sampling, frames, endpoint=endpoint,
                     stable_object_masks=[np.zeros((cfg.crop[1], cfg.crop[0]), bool)
                                          for _ in sampling])


def _render_all(clip: SynthClip) -> None:
    cfg = clip.config
    clip.stable_frames = [render_frame(clip.base, g, cfg.crop, clip.sprites, k)
                          for k, g in enumerate(clip.stable_sampling)]
    clip.stable_object_masks = [f.truth.movers.copy() for f in clip.stable_frames]
    if clip.gt_homographies is not None:
        clip.unstable_frames = [
            render_frame(clip.base, clip.unstable_sampling(k), cfg.crop, clip.sprites, k,
                         to_stable=clip.gt_homographies[k])
            for k in range(len(clip))]
        clip.object_masks = [f.truth.movers.copy() for f in clip.unstable_frames]


def pair_pose(g_from: np.ndarray, g_to: np.ndarray, crop, n_grid: int = 16) -> AffinePose:
    """Similarity part of the map from frame ``from`` to frame ``to``.

    Both arguments are frame->base sampling homographies; the similarity is a
    least-squares fit over an ``n_grid`` x ``n_grid`` lattice of the frame.
    """
    w, h = crop
    xs, ys = np.meshgrid(np.linspace(0, w - 1, n_grid), np.linspace(0, h - 1, n_grid))
    pts = np.stack([xs, ys], axis=-1).reshape(-1, 2)
    rel = np.linalg.inv(g_to) @ g_from
    return fit_similarity(pts, apply_homography(rel, pts), center=frame_center(w, h))


def jitter_video(clip: SynthClip, cfg: SynthConfig | None = None) -> SynthClip:
    """Perturb each stable frame by a random homography (unstable -> stable)."""
    cfg = cfg or clip.config
    rng = _rng(cfg, 2)
    center = frame_center(*cfg.crop)
    jit = []
    acc = CameraParams()
    for _ in range(len(clip)):
        j = draw_jitter(cfg, rng)
        if cfg.jitter_mode == "random_walk":
            # step in the small-angle parameter space; perspective stays a fresh draw
            acc = CameraParams(acc.theta + j.theta, acc.s * j.s, acc.dx + j.dx, acc.dy + j.dy)
            j = dataclasses.replace(acc, px=j.px, py=j.py)
        jit.append(normalize_homography(j.matrix(center)))
    out = dataclasses.replace(clip, gt_homographies=jit)
    _render_all(out)
    out.gt_poses = [pair_pose(out.unstable_sampling(k), out.unstable_sampling(k + 1), cfg.crop)
                    for k in range(len(out) - 1)]
    return out


def _random_sprite(cfg: SynthConfig, rng: np.random.Generator, static: bool) -> Sprite:
    w, h = cfg.crop
    amp = 0.0 if static else rng.uniform(0.0, 0.15)
    r_max = math.sqrt(MAX_SPRITE_AREA * w * h / math.pi) / (1.0 + amp)
    r = rng.uniform(0.5, 1.0) * r_max
    k = int(rng.integers(3, 8))
    ang = np.sort(rng.uniform(0, 2 * math.pi, size=k))
    rad = r * rng.uniform(0.6, 1.0, size=k)
    poly = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    tex = make_base_image(32, 32, seed=int(rng.integers(1 << 30)), channels=3)
    tex = np.clip(tex * rng.uniform(0.5, 1.2) + rng.uniform(-0.2, 0.2), 0.0, 1.0)
    start = np.array([rng.uniform(0.1, 0.9) * w, rng.uniform(0.1, 0.9) * h])
    vel = np.zeros(2) if static else rng.uniform(-3.0, 3.0, size=2)
    spin = 0.0 if static else math.radians(rng.uniform(-2.0, 2.0))
    return Sprite(poly, tex.astype(np.float32), start, vel, spin, amp, rng.uniform(0.05, 0.3))


def insert_movers(clip: SynthClip, cfg: SynthConfig | None = None, m: int | None = None,
                  static: bool = False) -> SynthClip:
    """Composite ``m`` textured polygon sprites (random count if ``None``)."""
    cfg = cfg or clip.config
    rng = _rng(cfg, 3)
    if m is None:
        m = int(rng.integers(0, cfg.n_objects_max + 1))
    if not 0 <= m <= MAX_OBJECTS:
        raise ValueError(f"at most {MAX_OBJECTS} movers are supported")
    if m == 0:
        return clip
    out = dataclasses.replace(clip, sprites=list(clip.sprites)
                              + [_random_sprite(cfg, rng, static) for _ in range(m)])
    _render_all(out)
    return out


def make_clip(cfg: SynthConfig, jitter: bool = True, movers: int | None = None,
              endpoint: CameraParams | None = None) -> SynthClip:
    """Draw a camera path, build a base image large enough and render the clip."""
    if endpoint is None:
        endpoint = draw_camera_endpoint(cfg, _rng(cfg, 1))
    need_w, need_h = required_base_size(cfg, camera_inverses(cfg, endpoint))
    # unstable frames look slightly outside the stable footprint
    pad = int(2 * max(cfg.jitter_t) + 0.1 * max(cfg.crop) * (cfg.jitter_s + math.radians(
        cfg.jitter_theta) + max(cfg.unstable_p_range) * max(cfg.crop))) + 16
    if cfg.jitter_mode == "random_walk":
        pad *= int(math.ceil(math.sqrt(cfg.n_frames)))
    base = make_base_image(need_w + 2 * pad, need_h + 2 * pad, seed=cfg.seed)
    clip = gen_stable_video(base, cfg, endpoint)
    if movers is None or movers > 0:
        clip = insert_movers(clip, cfg, m=movers)
    if jitter:
        clip = jitter_video(clip, cfg)
    return clip


# --------------------------------------------------------------------------
# small field-of-view windows

def window_path(n: int, frame_size, window, rng: np.random.Generator,
                static: bool = False, max_step: float = 3.0) -> np.ndarray:
    """Integer top-left offsets of a window drifting randomly inside the frame."""
    fw, fh = frame_size
    ww, wh = window
    if ww > fw or wh > fh:
        raise ValueError(f"window {ww}x{wh} larger than frame {fw}x{fh}")
    span = np.array([fw - ww, fh - wh], dtype=np.float64)
    pos = rng.uniform(0, 1, size=2) * span
    if static:
        return np.repeat(np.rint(pos)[None].astype(int), n, axis=0)
    vel = rng.uniform(-max_step, max_step, size=2)
    out = np.zeros((n, 2), dtype=int)
    for i in range(n):
        out[i] = np.clip(np.rint(pos), 0, span).astype(int)
        vel = np.clip(vel + rng.uniform(-0.5, 0.5, size=2), -max_step, max_step)
        pos = pos + vel
        for a in range(2):
            if pos[a] < 0:
                pos[a], vel[a] = -pos[a], -vel[a]
            elif pos[a] > span[a]:
                pos[a], vel[a] = 2 * span[a] - pos[a], -vel[a]
            pos[a] = min(max(pos[a], 0.0), span[a])
    return out


@dataclass
class SmallFovClip:
    crops: list[Frame]
    offsets: np.ndarray       # (N, 2) top-left (x, y) of each window
    full: list[Frame]         # ground-truth full frames
    window: tuple[int, int]

    def uncrop(self, k: int) -> Frame:
        """Crop pasted back onto the full canvas; valid only inside the window."""
        full = self.full[k]
        x0, y0 = self.offsets[k]
        ww, wh = self.window
        data = np.zeros_like(full.data)
        valid = np.zeros(full.valid.shape, dtype=bool)
        data[y0:y0 + wh, x0:x0 + ww] = self.crops[k].data
        valid[y0:y0 + wh, x0:x0 + ww] = self.crops[k].valid
        return Frame(data, valid, full.truth)


def gen_small_fov_pair(clip: SynthClip, window=None, static: bool = False,
                       use_unstable: bool = False) -> SmallFovClip:
    """Crop a randomly moving window out of every frame of the clip."""
    cfg = clip.config
    window = tuple(window or cfg.small_fov)
    frames = clip.unstable_frames if use_unstable else clip.stable_frames
    offsets = window_path(len(frames), cfg.crop, window, _rng(cfg, 4), static=static)
    ww, wh = window
    crops = []
    for f, (x0, y0) in zip(frames, offsets):
        crops.append(Frame(f.data[y0:y0 + wh, x0:x0 + ww].copy(),
                           f.valid[y0:y0 + wh, x0:x0 + ww].copy()))
    return SmallFovClip(crops, offsets, frames, window)


# --------------------------------------------------------------------------
# clip directories

def _fmt_row(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_clip(clip: SynthClip, directory) -> None:
    """Write ``stable/``, ``unstable/``, ``masks/`` and the flat-text ``gt.txt``."""
    directory = Path(directory)
    write_frames(directory / "stable", clip.stable_frames)
    if clip.unstable_frames is not None:
        write_frames(directory / "unstable", clip.unstable_frames)
        (directory / "masks").mkdir(parents=True, exist_ok=True)
        for k, m in enumerate(clip.object_masks):
            write_mask(directory / "masks" / f"{k:05d}.pgm", m)
    lines = ["# synthetic clip ground truth", f"frames {len(clip)}",
             f"size {clip.config.crop[0]} {clip.config.crop[1]}"]
    cp = configparser.ConfigParser()
    cp["synth"] = {k: _fmt_cfg(v) for k, v in clip.config.to_dict().items()}
    for key, val in cp["synth"].items():
        lines.append(f"config {key} = {val}")
    for k in range(len(clip)):
        lines.append(f"stable_sampling {k} " + _fmt_row(clip.stable_sampling[k].ravel()))
    if clip.gt_homographies is not None:
        for k in range(len(clip)):
            lines.append(f"H {k} " + _fmt_row(clip.gt_homographies[k].ravel()))
            lines.append(f"unstable_sampling {k} " + _fmt_row(clip.unstable_sampling(k).ravel()))
        for k, p in enumerate(clip.gt_poses):
            lines.append(f"pose {k} " + _fmt_row(p.as_tuple()))
    (directory / "gt.txt").write_text("\n".join(lines) + "\n")


def _fmt_cfg(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


@dataclass
class LoadedClip:
    config: SynthConfig
    unstable_frames: list[Frame]
    stable_frames: list[Frame]
    gt_homographies: list[np.ndarray]
    gt_poses: list[AffinePose]


def read_gt(path) -> dict:
    out = {"config": {}, "stable_sampling": {}, "unstable_sampling": {}, "H": {}, "pose": {}}
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "config":
            name, _, val = rest.partition("=")
            out["config"][name.strip()] = val.strip()
        elif key in ("frames",):
            out[key] = int(rest)
        elif key == "size":
            out[key] = tuple(int(t) for t in rest.split())
        elif key in ("stable_sampling", "unstable_sampling", "H", "pose"):
            idx, *vals = rest.split()
            out[key][int(idx)] = np.array([float(v) for v in vals])
    return out


def load_clip(directory) -> LoadedClip:
    """Read a clip directory back, re-attaching ground-truth geometry to frames."""
    directory = Path(directory)
    gt = read_gt(directory / "gt.txt")
    cfg = SynthConfig.from_dict(gt["config"])
    n = gt["frames"]

    def _frames(sub, key, masks):
        frames = []
        for k in range(n):
            p = directory / sub / FRAME_PATTERN.format(k)
            if not p.exists():
                raise FileNotFoundError(f"missing frame file: {p}")
            data = read_image(p)
            mov = np.zeros(data.shape[:2], dtype=bool)
            if masks:
                mp = directory / "masks" / f"{k:05d}.pgm"
                if mp.exists():
                    mov = read_mask(mp)
            truth = None
            if k in gt[key]:
                truth = FrameTruth(gt[key][k].reshape(3, 3), mov)
            frames.append(Frame(data, None, truth))
        return frames

    stable = _frames("stable", "stable_sampling", False)
    unstable = _frames("unstable", "unstable_sampling", True) if gt["H"] else []
    hs = [gt["H"][k].reshape(3, 3) for k in sorted(gt["H"])]
    poses = [AffinePose(*gt["pose"][k]) for k in sorted(gt["pose"])]
    return LoadedClip(cfg, unstable, stable, hs, poses)
