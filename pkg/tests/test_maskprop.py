from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fullstab.flow import pair_flows
from fullstab.geom import warp_mask
from fullstab.maskprop import (MaskPropConfig, backprop_masks, binarize, fine_masks,
                               shared_masks, window_steps, write_manifest)

N = 16


def _reference_backprop(flows, confs, delta_c, seed=None):
    """Per-pixel loop over the reverse scan, nearest sampling, outside -> False."""
    n = len(flows)
    h, w = confs[0].shape
    m_pre = [[bool(confs[-1][y][x] >= delta_c) for x in range(w)] for y in range(h)] \
        if seed is None else [[bool(v) for v in row] for row in seed]
    out = [None] * n
    counts = []
    for i in range(n - 1, -1, -1):
        nxt = [[False] * w for _ in range(h)]
        for y in range(h):
            for x in range(w):
                sx = int(np.floor(x + flows[i][y][x][0] + 0.5))
                sy = int(np.floor(y + flows[i][y][x][1] + 0.5))
                inside = 0 <= sx < w and 0 <= sy < h
                nxt[y][x] = inside and m_pre[sy][sx] and confs[i][y][x] >= delta_c
        m_pre = nxt
        out[i] = np.array(nxt)
        counts.append(sum(map(sum, nxt)))
    return out, counts


def _fixture():
    """Three-step window on 16x16 with integer flows."""
    flows = [np.zeros((N, N, 2)) for _ in range(3)]
    flows[2][..., 0] = 1.0
    flows[1][..., 1] = -2.0
    confs = [np.full((N, N), 0.5), np.ones((N, N)), np.ones((N, N))]
    confs[2][:, 15] = 0.0
    confs[1][4:8, 4:8] = 0.2
    confs[0][10, 10] = 0.49
    return flows, confs


def test_binarize_examples():
    assert binarize(np.ones((3, 3)), 0.5).all()
    assert binarize(np.full((3, 3), 0.5), 0.5).all()
    cb = np.indices((4, 4)).sum(0) % 2 == 0
    assert np.array_equal(binarize(np.where(cb, 0.8, 0.2), 0.5), cb)


def test_backprop_hand_trace_bit_exact():
    flows, confs = _fixture()
    trace = []
    out = backprop_masks(flows, confs, MaskPropConfig(), trace=trace)
    # hand simulation: seed = columns 0..14; shift by one column -> columns 0..13;
    # shift two rows down -> rows 2..15, minus the 4x4 hole; then one pixel below threshold
    e2 = np.zeros((N, N), bool)
    e2[:, :14] = True
    e1 = np.zeros((N, N), bool)
    e1[2:, :14] = True
    e1[4:8, 4:8] = False
    e0 = e1.copy()
    e0[10, 10] = False
    assert trace == [224, 180, 179]
    for got, exp in zip(out, [e0, e1, e2]):
        assert np.array_equal(got, exp)
    ref, counts = _reference_backprop(flows, confs, 0.5)
    assert counts == trace
    assert all(np.array_equal(a, b) for a, b in zip(out, ref))


@given(st.integers(0, 2 ** 31), st.integers(1, 4))
def test_backprop_matches_loop_reference(seed, n):
    rng = np.random.default_rng(seed)
    flows = [rng.uniform(-3, 3, size=(8, 8, 2)) for _ in range(n)]
    confs = [rng.random((8, 8)) for _ in range(n)]
    got = backprop_masks(flows, confs)
    ref, _ = _reference_backprop(flows, confs, 0.5)
    assert all(np.array_equal(a, b) for a, b in zip(got, ref))


def test_all_ones_zero_flow_keeps_everything():
    out = backprop_masks([np.zeros((N, N, 2))] * 4, [np.ones((N, N))] * 4)
    assert all(m.all() for m in out)


def test_disk_hole_propagates_backwards():
    yy, xx = np.mgrid[0:N, 0:N]
    disk = (xx - 8) ** 2 + (yy - 8) ** 2 <= 9
    confs = [np.ones((N, N)) for _ in range(5)]
    confs[3][disk] = 0.0
    out = backprop_masks([np.zeros((N, N, 2))] * 5, confs)
    for j in range(4):
        assert not out[j][disk].any() and out[j][~disk].all()
    assert out[4].all()


@given(st.integers(0, 2 ** 31), st.integers(-2, 2), st.integers(-2, 2))
def test_monotone_attrition_and_subset(seed, dx, dy):
    rng = np.random.default_rng(seed)
    flows = [np.full((10, 10, 2), [dx, dy], float) for _ in range(4)]
    confs = [rng.random((10, 10)) * 0.4 + 0.3 for _ in range(4)]
    trace = []
    out = backprop_masks(flows, confs, trace=trace)
    assert all(a >= b for a, b in zip(trace, trace[1:]))
    for m, c in zip(out, confs):
        assert not (m & ~binarize(c)).any()


@given(st.integers(0, 2 ** 31))
def test_identity_flows_give_suffix_intersection(seed):
    rng = np.random.default_rng(seed)
    confs = [rng.random((6, 6)) for _ in range(4)]
    out = backprop_masks([np.zeros((6, 6, 2))] * 4, confs)
    for j in range(4):
        exp = np.logical_and.reduce([binarize(c) for c in confs[j:]])
        assert np.array_equal(out[j], exp)


def test_length_mismatch():
    with pytest.raises(ValueError):
        backprop_masks([np.zeros((4, 4, 2))], [])


def test_config_validation():
    with pytest.raises(ValueError):
        MaskPropConfig(d=0)
    with pytest.raises(ValueError):
        MaskPropConfig(delta_c=1.0)
    assert (MaskPropConfig().k, MaskPropConfig().d, MaskPropConfig().delta_c) == (5, 10, 0.5)


def test_fine_masks_degenerate_and_absorbing(rng):
    f = [rng.uniform(-1, 1, size=(8, 8, 2))]
    c = [rng.random((8, 8))]
    anchor = binarize(c[0])
    assert np.array_equal(fine_masks(f, c, anchor)[0], backprop_masks(f, c, seed=anchor)[0])
    flows = [np.zeros((8, 8, 2))] * 3
    out = fine_masks(flows, [np.ones((8, 8))] * 3, np.zeros((8, 8), bool))
    assert not any(m.any() for m in out)


def test_fine_masks_inside_warped_anchor(jitter_clip):
    flows, confs = pair_flows(jitter_clip.unstable_frames[:11])
    anchor = np.ones(confs[0].shape, bool)
    anchor[30:50, 40:70] = False
    out = fine_masks(flows, confs, anchor)
    nxt = anchor
    for j in range(len(flows) - 1, -1, -1):
        assert not (out[j] & ~warp_mask(nxt, flows[j])).any()
        nxt = out[j]


def test_shared_masks_exclude_movers(mover_clip):
    flows, confs = pair_flows(mover_clip.unstable_frames)
    masks = shared_masks(flows, confs, MaskPropConfig(d=3, n=2))
    mov = sum(int(m.sum()) for m in mover_clip.object_masks[:-1])
    kept = sum(int((s & m).sum()) for s, m in zip(masks, mover_clip.object_masks[:-1]))
    assert mov > 0 and kept <= 0.05 * mov
    for s, c in zip(masks, confs):
        assert not (s & ~binarize(c)).any()


def test_window_steps_clip_to_video():
    cfg = MaskPropConfig(d=10, n=5)
    assert window_steps(0, 25, cfg) == [(0, 10), (10, 20), (20, 25)]
    assert window_steps(40, 100, cfg)[-1] == (80, 90)


def test_manifest(tmp_path):
    write_manifest(tmp_path / "m.txt", [[0, 10], [40]])
    assert (tmp_path / "m.txt").read_text().splitlines()[1:] == ["0 10", "40"]
