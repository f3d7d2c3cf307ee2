from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fullstab.coarse import (LossWeights, PoseSolveConfig, Trajectory, accumulate_trajectory,
                             apply_alignment, gaussian_kernel, loss_gt, pose_metrics,
                             read_trajectory, smooth_channel, smooth_trajectory, solve_pair_poses,
                             solve_pose, write_trajectory)
from fullstab.flow import pair_flows
from fullstab.geom import AffinePose, Frame, RankDeficientError, affine_flow, frame_center, make_coord_grid
from fullstab.harness import masked_flow_magnitude
from fullstab.maskprop import shared_masks
from fullstab.synth import SynthConfig, make_clip, pair_pose
from tests.conftest import small_cfg

G = make_coord_grid(64, 48)


def _close(p: AffinePose, q: AffinePose, tol: float):
    assert abs(p.theta - q.theta) < tol and abs(p.s - q.s) < tol
    assert abs(p.dx - q.dx) < tol and abs(p.dy - q.dy) < tol


def test_pure_translation_exact():
    f = np.zeros((48, 64, 2))
    f[..., 0], f[..., 1] = 3.0, -2.0
    p = solve_pose(f, np.ones((48, 64), bool))
    _close(p, AffinePose(0, 1, 3, -2), 1e-12)


def test_similarity_recovered():
    gt = AffinePose(0.05, 1.08, 12, -7)
    _close(solve_pose(affine_flow(gt, G), np.ones((48, 64), bool)), gt, 1e-6)


def test_contaminated_but_masked(rng):
    gt = AffinePose(0.05, 1.08, 12, -7)
    f = affine_flow(gt, G)
    bad = rng.random((48, 64)) < 0.3
    f[bad] = rng.normal(0, 40, size=(int(bad.sum()), 2))
    _close(solve_pose(f, ~bad), gt, 1e-6)


@given(st.floats(-0.3, 0.3), st.floats(0.7, 1.3), st.floats(-30, 30), st.floats(-30, 30),
       st.integers(0, 2 ** 31))
def test_exact_on_sparse_non_collinear_support(th, s, dx, dy, seed):
    gt = AffinePose(th, s, dx, dy)
    rng = np.random.default_rng(seed)
    mask = np.zeros((48, 64), bool)
    mask.flat[rng.choice(48 * 64, 16, replace=False)] = True
    try:
        p = solve_pose(affine_flow(gt, G), mask)
    except RankDeficientError:
        return
    _close(p, gt, 1e-9)


def test_degenerate_support_rejected():
    f = np.zeros((48, 64, 2))
    m = np.zeros((48, 64), bool)
    m[:3, :3] = True
    with pytest.raises(RankDeficientError):
        solve_pose(f, m)
    m = np.zeros((48, 64), bool)
    m[10, :] = True
    with pytest.raises(RankDeficientError):
        solve_pose(f, m)


def test_huber_refinement_reduces_outlier_influence(rng):
    gt = AffinePose(0.02, 1.01, 4, 1)
    f = affine_flow(gt, G)
    bad = rng.random((48, 64)) < 0.05
    f[bad] += rng.normal(0, 20, size=(int(bad.sum()), 2))
    hist = []
    p = solve_pose(f, np.ones((48, 64), bool), PoseSolveConfig(max_iters=30), history=hist)
    one = solve_pose(f, np.ones((48, 64), bool), PoseSolveConfig(max_iters=1))
    assert abs(p.dx - gt.dx) < abs(one.dx - gt.dx) + 1e-9
    assert len(hist) >= 2


def test_solve_pair_poses_falls_back_to_identity():
    f = [affine_flow(AffinePose(0, 1, 1, 0), G), np.zeros((48, 64, 2))]
    m = [np.ones((48, 64), bool), np.zeros((48, 64), bool)]
    poses, ok = solve_pair_poses(f, m)
    assert ok == [True, False] and poses[1] == AffinePose.identity()


def test_pose_metrics_examples():
    w = LossWeights()
    gt = AffinePose(0.1, 1.2, 3, 4)
    lg, lgrid, ls = pose_metrics(gt, gt, w)
    assert lg == 0.0 and lgrid == pytest.approx(2 * w.epsilon, abs=1e-15)
    pred = AffinePose(0.1, 2.4, 3, 4)
    assert loss_gt(pred, gt, w) == pytest.approx(w.lambda_s)
    zero = SimpleNamespace(theta=0.0, s=0.0, dx=0.0, dy=0.0)
    with pytest.raises(ValueError):
        pose_metrics(gt, zero)


def _ref_stab(pred, gt, w, n=16):
    lg = (w.lambda_theta * abs(pred.theta - gt.theta) + w.lambda_s * abs(1 - pred.s / gt.s)
          + w.lambda_t * (abs(pred.dx - gt.dx) + abs(pred.dy - gt.dy)))
    cx = cy = (n - 1) / 2
    tot = 0.0
    for j in range(n):
        for i in range(n):
            pts = []
            for p in (gt, pred):
                x, y = i - cx, j - cy
                c, s = math.cos(p.theta), math.sin(p.theta)
                pts.append((p.s * (c * x - s * y) + cx + p.dx, p.s * (s * x + c * y) + cy + p.dy))
            gx = (pts[0][0] - pts[1][0]) * 2 / (n - 1)
            gy = (pts[0][1] - pts[1][1]) * 2 / (n - 1)
            tot += abs(gx + w.epsilon) + abs(gy + w.epsilon)
    lgrid = tot / (n * n)
    return lg, lgrid, lg + w.lambda_grid * lgrid


@given(st.tuples(st.floats(-0.5, 0.5), st.floats(0.5, 1.5), st.floats(-9, 9), st.floats(-9, 9)),
       st.tuples(st.floats(-0.5, 0.5), st.floats(0.5, 1.5), st.floats(-9, 9), st.floats(-9, 9)))
def test_pose_metrics_match_reference(a, b):
    pred, gt = AffinePose(*a), AffinePose(*b)
    got = pose_metrics(pred, gt)
    ref = _ref_stab(pred, gt, LossWeights())
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)
    assert (got[0] == 0) == (pred == gt)


def test_accumulate_examples():
    t = accumulate_trajectory([AffinePose.identity()] * 3)
    assert all(p == AffinePose.identity() for p in t.poses)
    t = accumulate_trajectory([AffinePose(0, 1, 1, 0), AffinePose(0, 1, 2, 0)])
    assert t.poses[0] == AffinePose.identity()
    _close(t.poses[2], AffinePose(0, 1, 3, 0), 1e-12)
    with pytest.raises(ValueError):
        accumulate_trajectory([])


def test_accumulate_matches_generator_over_50_frames():
    cfg = small_cfg(n_frames=50, p_max=(0.0, 0.0), unstable_p_range=(0.0, 0.0))
    clip = make_clip(cfg, movers=0)
    traj = accumulate_trajectory(clip.gt_poses, frame_center(*cfg.crop))
    for k in range(50):
        direct = pair_pose(clip.unstable_sampling(0), clip.unstable_sampling(k), cfg.crop)
        _close(traj.poses[k], direct, 1e-4)


def test_constant_path_unchanged():
    t = Trajectory([AffinePose(0.1, 1.2, 3, -1)] * 12)
    sm = smooth_trajectory(t, 6)
    for p in sm.smoothed:
        _close(p, AffinePose(0.1, 1.2, 3, -1), 1e-12)
    for m in sm.align:
        np.testing.assert_allclose(m, [[1, 0, 0], [0, 1, 0]], atol=1e-9)


def test_impulse_response_is_kernel():
    k = gaussian_kernel(20)
    assert len(k) == 21 and k.sum() == pytest.approx(1.0) and k[10] == k.max()
    v = np.zeros(61)
    v[30] = 1.0
    out = smooth_channel(v, k)
    np.testing.assert_allclose(out[20:41], k[::-1], atol=1e-15)
    poses = [AffinePose(0, 1, float(x), 0) for x in v]
    sm = smooth_trajectory(Trajectory(poses), 20)
    np.testing.assert_allclose([p.dx for p in sm.smoothed][20:41], k, atol=1e-12)


@given(st.integers(0, 2 ** 31), st.integers(1, 5))
def test_smoothing_shift_equivariant(seed, shift):
    v = np.random.default_rng(seed).normal(size=80)
    k = gaussian_kernel(10)
    a = smooth_channel(v, k)
    b = smooth_channel(np.roll(v, shift), k)
    np.testing.assert_allclose(b[15 + shift:65], a[15:65 - shift], atol=1e-12)


def test_linear_path_passes_unchanged():
    v = 0.7 * np.arange(30) - 3
    np.testing.assert_allclose(smooth_channel(v, gaussian_kernel(20)), v, atol=1e-12)


def test_smoothing_reduces_second_difference(jitter_clip):
    t = accumulate_trajectory(jitter_clip.gt_poses, frame_center(*jitter_clip.config.crop))
    sm = smooth_trajectory(t, 6)
    raw = np.diff([p.dx for p in t.poses], 2)
    smo = np.diff([p.dx for p in sm.smoothed], 2)
    assert (smo ** 2).mean() < (raw ** 2).mean()
    assert all(p.s > 0 for p in sm.smoothed)


@given(st.lists(st.floats(-0.69, 0.69), min_size=3, max_size=20))
def test_smoothed_scale_positive(logs):
    sm = smooth_trajectory(Trajectory([AffinePose(0, math.exp(v)) for v in logs]), 4)
    assert all(p.s > 0 for p in sm.smoothed)


def test_smooth_requires_two_frames():
    with pytest.raises(ValueError):
        smooth_trajectory(Trajectory([AffinePose()]))


def test_alignment_identity_keeps_frames(jitter_clip):
    fr = jitter_clip.unstable_frames[:3]
    t = Trajectory([AffinePose()] * 3, [AffinePose()] * 3, [np.eye(3)[:2]] * 3)
    out, hs = apply_alignment(fr, t)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(out, fr))


def test_stable_linear_input_gives_identity_alignment():
    # rotation and translation interpolate linearly along a stable clip, so the
    # smoothed path equals the raw path
    cfg = SynthConfig.static(n_frames=12, crop=(96, 72), theta_max=3.0, t_max=(8.0, 5.0))
    clip = make_clip(cfg, jitter=False, movers=0)
    flows, confs = pair_flows(clip.stable_frames)
    poses, _ = solve_pair_poses(flows, shared_masks(flows, confs))
    t = smooth_trajectory(accumulate_trajectory(poses, frame_center(96, 72)), 20,
                          frame_size=(96, 72))
    for m in t.align:
        assert np.abs(m - np.eye(3)[:2]).max() < 1e-3


def test_alignment_reduces_flow_magnitude(jitter_clip):
    fr = jitter_clip.unstable_frames
    flows, confs = pair_flows(fr)
    masks = shared_masks(flows, confs)
    poses, _ = solve_pair_poses(flows, masks)
    t = smooth_trajectory(accumulate_trajectory(poses, frame_center(120, 96)), 6, frame_size=(120, 96))
    aligned, _ = apply_alignment(fr, t)
    f2, c2 = pair_flows(aligned)
    assert masked_flow_magnitude(f2, shared_masks(f2, c2)) < masked_flow_magnitude(flows, masks)


def test_trajectory_file_round_trip(tmp_path):
    t = smooth_trajectory(Trajectory([AffinePose(0.01 * i, 1.0, i, -i) for i in range(5)]), 4)
    write_trajectory(tmp_path / "t.txt", t)
    back = read_trajectory(tmp_path / "t.txt")
    assert back.poses == t.poses and back.smoothed == t.smoothed
