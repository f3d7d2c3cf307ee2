"""End-to-end stages: stabilization, full-frame rendering and the re-stabilization loop."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coarse import (Trajectory, accumulate_trajectory, align_pose, solve_pair_poses,
                     smooth_trajectory)
from .config import PipelineConfig
from .fine import WarpSolveResult, flow_on_output_grid, residual_pair_flow, solve_video
from .flow import estimate_flow, pair_flows
from .geom import Frame, apply_homography, frame_center, make_coord_grid, warp_frame
from .maskprop import binarize, shared_masks
from .outpaint import (FusionCandidate, core_and_band, fill_holes, fuse_margin, grow_labels,
                       label_map, multi_frame_fuse, outpaint_flow, patch_distance)

log = logging.getLogger(__name__)


def _map(fn, items, workers: int):
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


# --------------------------------------------------------------------------
# stabilization

@dataclass
class StabilizeResult:
    frames: list[Frame]                  # final output
    coarse_frames: list[Frame]           # similarity alignment only
    align: list[np.ndarray]              # 2x3 input -> output, per frame
    trajectory: Trajectory
    pair_poses: list
    flows: list[np.ndarray]              # Y_k on input frame k
    confidences: list[np.ndarray]
    masks: list[np.ndarray]              # shared masks on input frames
    fields: list[np.ndarray]             # W_k on output frames
    fine_results: list[WarpSolveResult] = field(default_factory=list)
    sample_maps: list[np.ndarray] = field(default_factory=list)   # output px -> input px
    timings: dict = field(default_factory=dict)

    def transforms(self, step: int = 16):
        """Input->output correspondences per frame, for distortion measurement."""
        out = []
        for k, m in enumerate(self.sample_maps):
            h, w = m.shape[:2]
            g = make_coord_grid(w, h).stacked()[::step, ::step].reshape(-1, 2)
            src = m[::step, ::step].reshape(-1, 2)
            out.append((src, g))
        return out

    def align_poses(self):
        c = self.trajectory.center
        return [align_pose(m, c) for m in self.align]


def _sample_map(h_k: np.ndarray, w_k: np.ndarray | None, width: int, height: int) -> np.ndarray:
    """Input pixel sampled by every output pixel: ``H_k^-1(q + W_k(q))``."""
    g = make_coord_grid(width, height).stacked()
    q = g if w_k is None else g + w_k
    inv = np.linalg.inv(np.vstack([h_k, [0, 0, 1]]))
    return apply_homography(inv, q)


def stabilize(frames, cfg: PipelineConfig | None = None, fine: bool | None = None,
              flows=None) -> StabilizeResult:
    """Flow, shared masks, similarity path smoothing and per-pixel refinement."""
    cfg = cfg or PipelineConfig()
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    size = frames[0].data.shape
    for k, f in enumerate(frames):
        if f.data.shape != size:
            raise ValueError(f"frame {k} has size {f.data.shape}, expected {size}")
    use_fine = cfg.pipeline.fine if fine is None else fine
    workers = cfg.workers
    h, w = frames[0].height, frames[0].width
    t = {}

    t0 = time.perf_counter()
    if flows is None:
        ys, cs = pair_flows(frames, cfg.provider, workers)
    else:
        ys, cs = flows
    t["flow"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    masks = shared_masks(ys, cs, cfg.maskprop)
    t["maskprop"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    poses, _ = solve_pair_poses(ys, masks, cfg.pose, workers)
    center = frame_center(w, h)
    traj = accumulate_trajectory(poses, center)
    traj = smooth_trajectory(traj, cfg.smooth.window, cfg.smooth.sigma_or_default, (w, h))
    coarse_frames = _map(lambda k: warp_frame(frames[k], traj.align[k]), range(len(frames)),
                         workers)
    t["coarse"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fields = [np.zeros((h, w, 2)) for _ in frames]
    fine_results = []
    if use_fine:
        f_out, m_out = [], []
        for k in range(len(ys)):
            fk = residual_pair_flow(ys[k], traj.align[k], traj.align[k + 1])
            vals, mk, _ = flow_on_output_grid(fk, traj.align[k], masks[k])
            f_out.append(vals)
            m_out.append(mk & coarse_frames[k].valid)
        fields, fine_results = solve_video(f_out, m_out, cfg.warp)
    maps = [_sample_map(traj.align[k], fields[k] if use_fine else None, w, h)
            for k in range(len(frames))]
    if use_fine:
        grid = make_coord_grid(w, h).stacked()
        out_frames = _map(lambda k: warp_frame(frames[k], maps[k] - grid), range(len(frames)),
                          workers)
    else:
        out_frames = coarse_frames
    t["fine"] = time.perf_counter() - t0
    return StabilizeResult(out_frames, coarse_frames, [np.asarray(m) for m in traj.align], traj,
                           poses, ys, cs, masks, fields, fine_results, maps, t)


# --------------------------------------------------------------------------
# full-frame rendering

@dataclass
class OutpaintLog:
    target: int
    rows: list = field(default_factory=list)     # (neighbor, a_s, a_u, ratio, a_o, accepted)
    filled_by_fusion: int = 0
    filled_by_holes: int = 0


def _neighbors(t: int, n_frames: int, radius: int) -> list[int]:
    out = []
    for d in range(1, radius + 1):
        for c in (t - d, t + d):
            if 0 <= c < n_frames:
                out.append(c)
    return out


def margin_candidate(target: Frame, neighbor: Frame, cfg: PipelineConfig, m_core=None,
                     m_band=None):
    """Warp a neighbour into the target's margin and build the fusion candidate.

    Returns ``(fused_frame, fill_mask, FusionCandidate, keep_mask)`` or None
    when the target has too little reliable flow towards the neighbour.
    """
    oc = cfg.outpaint
    y, conf = estimate_flow(neighbor, target, cfg.provider)
    known = target.valid & binarize(conf, cfg.maskprop.delta_c)
    if np.count_nonzero(known) < 16:
        return None
    y_large = outpaint_flow(y, known)
    warp = warp_frame(neighbor, y_large)
    if m_core is None or m_band is None:
        m_core, m_band = core_and_band(target.valid, oc.core_margin)
    # each side borrows the other's pixels where it has none, so patches that
    # straddle a validity border compare like with like
    both = target.valid[..., None]
    i_t_cmp = np.where(both, target.data, warp.data)
    i_w_cmp = np.where(warp.valid[..., None], warp.data, i_t_cmp)
    dist = patch_distance(Frame(i_t_cmp), Frame(i_w_cmp))
    agree = (dist < oc.delta_d) | ~warp.valid
    labels = label_map(target.valid, m_band, agree)
    grown = grow_labels(labels, oc.k_tin, oc.eta_t, oc.max_sweeps)
    keep = grown == 2
    fused = fuse_margin(target, warp, keep)
    fill = ~target.valid & warp.valid & ~keep
    cand = FusionCandidate(float(np.count_nonzero(fill)), float(np.count_nonzero(grown == -1)))
    return fused, fill, cand, keep


def outpaint_frame(frames, t: int, cfg: PipelineConfig | None = None) -> tuple[Frame, OutpaintLog]:
    cfg = cfg or PipelineConfig()
    target = frames[t]
    entry = OutpaintLog(t)
    if target.valid.all():
        return target.copy(), entry
    if not target.valid.any():
        raise ValueError(f"frame {t} has no valid pixels")
    core, band = core_and_band(target.valid, cfg.outpaint.core_margin)
    cands, ids = [], []
    for c in _neighbors(t, len(frames), cfg.outpaint.neighbors):
        r = margin_candidate(target, frames[c], cfg, core, band)
        if r is not None:
            cands.append(r[:3])
            ids.append(c)
    rows = []
    fused = multi_frame_fuse(target, cands, cfg.outpaint, rows)
    entry.rows = [(ids[r[0]],) + tuple(r[1:]) for r in rows]
    entry.filled_by_fusion = int(np.count_nonzero(fused.valid & ~target.valid))
    entry.filled_by_holes = int(np.count_nonzero(~fused.valid))
    return fill_holes(fused), entry


def outpaint_video(frames, cfg: PipelineConfig | None = None) -> tuple[list[Frame], list[OutpaintLog]]:
    """Render every frame full-frame from its neighbours, then fill leftovers."""
    cfg = cfg or PipelineConfig()
    frames = list(frames)
    res = _map(lambda t: outpaint_frame(frames, t, cfg), range(len(frames)), cfg.workers)
    return [r[0] for r in res], [r[1] for r in res]


@dataclass
class PipelineResult:
    stabilized: StabilizeResult
    frames: list[Frame]
    outpaint_logs: list[OutpaintLog]
    timings: dict


def run_pipeline(frames, cfg: PipelineConfig | None = None) -> PipelineResult:
    cfg = cfg or PipelineConfig()
    st = stabilize(frames, cfg)
    t0 = time.perf_counter()
    out, logs = outpaint_video(st.frames, cfg)
    timings = dict(st.timings)
    timings["outpaint"] = time.perf_counter() - t0
    return PipelineResult(st, out, logs, timings)
