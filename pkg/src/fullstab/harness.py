"""Experiment harnesses: repeated re-stabilization and margin-rendering comparisons."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .flow import estimate_flow, pair_flows
from .geom import Frame, warp_frame
from .maskprop import binarize, shared_masks
from .metrics import psnr, ssim_map
from .outpaint import constant_extension, outpaint_flow


@dataclass
class FixedPointTrace:
    flow_magnitude: list[float] = field(default_factory=list)
    # (max |theta|, max |s - 1|, max |d|) of the alignment applied by each pass;
    # iteration 0 is the untouched input
    pose_deltas: list[tuple[float, float, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.flow_magnitude)

    def rows(self):
        for i, (m, d) in enumerate(zip(self.flow_magnitude, self.pose_deltas)):
            yield (i, m) + tuple(d)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "flow_magnitude", "theta", "scale", "translation"])
            for r in self.rows():
                wr.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


def masked_flow_magnitude(flows, masks) -> float:
    """Mean flow length over all pixels selected by the masks, pooled over pairs."""
    total, count = 0.0, 0
    for f, m in zip(flows, masks):
        m = np.asarray(m, dtype=bool)
        if m.any():
            u, v = f[..., 0][m], f[..., 1][m]
            total += float(np.sqrt(u * u + v * v).sum())
            count += int(m.sum())
    return total / count if count else 0.0


def _deltas(st) -> tuple[float, float, float]:
    poses = st.align_poses()
    return (max(abs(p.theta) for p in poses), max(abs(p.s - 1.0) for p in poses),
            max(math.sqrt(p.dx * p.dx + p.dy * p.dy) for p in poses))


def fixed_point_run(frames, iters: int, cfg: PipelineConfig | None = None,
                    fine: bool | None = None) -> FixedPointTrace:
    """Stabilize, then stabilize the result again, ``iters`` times."""
    from .pipeline import stabilize
    if iters < 1:
        raise ValueError("iters must be >= 1")
    cfg = cfg or PipelineConfig()
    trace = FixedPointTrace()
    cur = list(frames)
    flows = pair_flows(cur, cfg.provider, cfg.workers)
    for _ in range(iters):
        st = stabilize(cur, cfg, fine=fine, flows=flows)
        trace.flow_magnitude.append(masked_flow_magnitude(st.flows, st.masks))
        if not trace.pose_deltas:
            trace.pose_deltas.append((0.0, 0.0, 0.0))
        trace.pose_deltas.append(_deltas(st))
        cur = st.frames
        flows = pair_flows(cur, cfg.provider, cfg.workers)
    masks = shared_masks(flows[0], flows[1], cfg.maskprop)
    trace.flow_magnitude.append(masked_flow_magnitude(flows[0], masks))
    return trace


# --------------------------------------------------------------------------
# margin rendering comparison

@dataclass
class MarginComparison:
    epe_harmonic: float
    epe_constant: float
    psnr_harmonic: float
    psnr_constant: float
    ssim_harmonic: float
    ssim_constant: float
    margin_pixels: int

    @property
    def harmonic_wins(self) -> bool:
        return (self.psnr_harmonic > self.psnr_constant
                and self.ssim_harmonic > self.ssim_constant)


def compare_margin_extension(target: Frame, neighbor: Frame, truth_target: Frame,
                             true_flow: np.ndarray | None = None, cfg: PipelineConfig | None = None,
                             delta_c: float = 0.5) -> MarginComparison | None:
    """Render the target's missing margin from a neighbour with two flow extensions.

    The flow towards the neighbour is estimated where the target is valid and
    extended either harmonically or by nearest-value replication; both warps
    are scored against the ground-truth full target over the margin pixels
    that both warps cover. ``true_flow`` (full frame) enables endpoint error.
    """
    cfg = cfg or PipelineConfig()
    y, conf = estimate_flow(neighbor, target, cfg.provider)
    known = target.valid & binarize(conf, delta_c)
    if np.count_nonzero(known) < 16:
        return None
    y_h = outpaint_flow(y, known)
    y_c = constant_extension(y, known)
    w_h = warp_frame(neighbor, y_h)
    w_c = warp_frame(neighbor, y_c)
    margin = ~target.valid & w_h.valid & w_c.valid
    n = int(margin.sum())
    if n == 0:
        return None
    epe_h = epe_c = float("nan")
    if true_flow is not None:
        eh = y_h - true_flow
        ec = y_c - true_flow
        epe_h = float(np.sqrt((eh ** 2).sum(-1))[~target.valid].mean())
        epe_c = float(np.sqrt((ec ** 2).sum(-1))[~target.valid].mean())
    gt = truth_target.data
    # SSIM windows straddle the margin border; outside it both composites carry
    # the ground truth so only the rendered pixels differ
    sel = margin[..., None] if gt.ndim == 3 else margin
    comp_h = np.where(sel, w_h.data, gt)
    comp_c = np.where(sel, w_c.data, gt)
    return MarginComparison(
        epe_h, epe_c,
        psnr(comp_h, gt, margin), psnr(comp_c, gt, margin),
        float(ssim_map(comp_h, gt)[margin].mean()), float(ssim_map(comp_c, gt)[margin].mean()),
        n)


def write_svg_plot(path, values, title: str = "", ylabel: str = "") -> None:
    """Minimal line plot of a series as standalone SVG."""
    vals = [float(v) for v in values]
    w, h, pad = 480, 300, 50
    vmax = max(vals) if vals and max(vals) > 0 else 1.0
    n = max(1, len(vals) - 1)
    pts = [(pad + i * (w - 2 * pad) / n, h - pad - v / vmax * (h - 2 * pad))
           for i, v in enumerate(vals)]
    poly = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
    dots = "".join(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3"/>' for x, y in pts)
    ticks = "".join(
        f'<text x="{x:.1f}" y="{h - pad + 16}" font-size="11" text-anchor="middle">{i}</text>'
        for i, (x, _) in enumerate(pts))
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">'
           f'<rect width="{w}" height="{h}" fill="white"/>'
           f'<text x="{w / 2}" y="20" font-size="14" text-anchor="middle">{title}</text>'
           f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>'
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>'
           f'<text x="{pad - 6}" y="{pad + 4}" font-size="11" text-anchor="end">{vmax:.3g}</text>'
           f'<text x="{pad - 6}" y="{h - pad}" font-size="11" text-anchor="end">0</text>'
           f'<text x="14" y="{h / 2}" font-size="11" transform="rotate(-90 14 {h / 2})" '
           f'text-anchor="middle">{ylabel}</text>'
           f'<polyline points="{poly}" fill="none" stroke="steelblue" stroke-width="2"/>'
           f'{dots}{ticks}</svg>')
    Path(path).write_text(svg)
