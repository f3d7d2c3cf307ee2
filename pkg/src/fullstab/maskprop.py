"""Shared-region masks by back-propagating binarized confidence through a window."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import compose_flows, warp_mask


@dataclass(frozen=True)
class MaskPropConfig:
    k: int = 5
    d: int = 10
    delta_c: float = 0.5
    n: int = 5

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 0.0 < self.delta_c < 1.0:
            raise ValueError("delta_c must lie in (0, 1)")
        if self.n < 1 or self.k < 0:
            raise ValueError("n must be >= 1 and k >= 0")


def binarize(c: np.ndarray, delta_c: float = 0.5) -> np.ndarray:
    """Confidence at or above ``delta_c`` counts as reliable."""
    if not 0.0 < delta_c < 1.0:
        raise ValueError("delta_c must lie in (0, 1)")
    return np.asarray(c) >= delta_c


def backprop_masks(flows, confs, cfg: MaskPropConfig | None = None, seed=None,
                   trace: list | None = None) -> list[np.ndarray]:
    """Aggregate masks for a window by a reverse scan.

    ``flows[i]`` lives on frame i's grid and points into frame i+1, and
    ``confs[i]`` is its confidence. The scan starts from ``seed`` (the
    binarized last confidence when omitted), warps the running mask one step
    back, and intersects it with the binarized confidence of that step. The
    returned list is in window order. When ``trace`` is a list, the true-pixel
    count of the running mask after each step is appended to it.
    """
    cfg = cfg or MaskPropConfig()
    flows = list(flows)
    confs = list(confs)
    if len(flows) != len(confs):
        raise ValueError(f"{len(flows)} flows but {len(confs)} confidence maps")
    if not flows:
        return []
    shape = np.asarray(confs[0]).shape
    for f, c in zip(flows, confs):
        if np.asarray(f).shape[:2] != shape or np.asarray(c).shape != shape:
            raise ValueError("flows and confidences must share one size")
    n = len(flows)
    m_pre = binarize(confs[-1], cfg.delta_c) if seed is None else np.asarray(seed, dtype=bool)
    if m_pre.shape != shape:
        raise ValueError("seed mask size mismatch")
    out = [None] * n
    for i in range(n - 1, -1, -1):
        warped = warp_mask(m_pre, flows[i])
        m_pre = warped & binarize(confs[i], cfg.delta_c)
        out[i] = m_pre
        if trace is not None:
            trace.append(int(m_pre.sum()))
    return out


def fine_masks(flows, confs, coarse_anchor, cfg: MaskPropConfig | None = None) -> list[np.ndarray]:
    """Per-frame masks between two coarse samples, seeded by the coarse anchor."""
    cfg = cfg or MaskPropConfig()
    return backprop_masks(flows, confs, MaskPropConfig(cfg.k, 1, cfg.delta_c, cfg.n),
                          seed=coarse_anchor)


def window_steps(start: int, n_pairs: int, cfg: MaskPropConfig) -> list[tuple[int, int]]:
    """Consecutive ``(a, b)`` coarse steps of one window, clipped to the video."""
    steps = []
    for i in range(cfg.n):
        a = start + i * cfg.d
        if a >= n_pairs:
            break
        steps.append((a, min(a + cfg.d, n_pairs)))
    return steps


def shared_masks(flows, confs, cfg: MaskPropConfig | None = None) -> list[np.ndarray]:
    """Per-pair shared-region masks for a whole video.

    ``flows[k]`` is the pair flow on frame k pointing into frame k+1. The
    video is cut into windows of ``n`` coarse steps of ``d`` frames. Pair
    flows are chained into one long flow per step, the coarse pass runs over
    the long flows, and the fine pass fills each step seeded by the coarse
    mask of the step's end frame. The end of every window is seeded with an
    all-true mask so that each output is the plain intersection along the
    chain.
    """
    cfg = cfg or MaskPropConfig()
    flows = list(flows)
    confs = list(confs)
    if len(flows) != len(confs):
        raise ValueError(f"{len(flows)} flows but {len(confs)} confidence maps")
    n_pairs = len(flows)
    out: list[np.ndarray | None] = [None] * n_pairs
    start = 0
    while start < n_pairs:
        steps = window_steps(start, n_pairs, cfg)
        long_flows, long_confs = [], []
        for a, b in steps:
            f = flows[b - 1]
            c = binarize(confs[b - 1], cfg.delta_c)
            for j in range(b - 2, a - 1, -1):
                f = compose_flows(flows[j], f)
                c = binarize(confs[j], cfg.delta_c) & warp_mask(c, flows[j])
            long_flows.append(f)
            long_confs.append(c.astype(np.float64))
        end_seed = np.ones(np.asarray(confs[0]).shape, dtype=bool)
        coarse = backprop_masks(long_flows, long_confs, cfg, seed=end_seed)
        anchors = coarse[1:] + [end_seed]
        for (a, b), m_a, anchor in zip(steps, coarse, anchors):
            fine = fine_masks(flows[a:b], confs[a:b], anchor, cfg)
            out[a] = m_a & fine[0]
            for j in range(a + 1, b):
                out[j] = fine[j - a]
        start = steps[-1][1]
    return out


def write_manifest(path, windows) -> None:
    lines = ["# window start frames"]
    for w in windows:
        lines.append(" ".join(str(i) for i in w))
    Path(path).write_text("\n".join(lines) + "\n")
