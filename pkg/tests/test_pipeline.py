from __future__ import annotations

import numpy as np
import pytest

from fullstab.config import PipelineConfig
from fullstab.geom import Frame
from fullstab.harness import (FixedPointTrace, compare_margin_extension, fixed_point_run,
                              masked_flow_magnitude, write_svg_plot)
from fullstab.metrics import cropping_ratio
from fullstab.pipeline import _neighbors, outpaint_frame, outpaint_video, run_pipeline, stabilize
from fullstab.synth import SynthConfig, gen_small_fov_pair, make_base_image, make_clip
from tests.conftest import small_cfg


def _cfg(**smooth):
    cfg = PipelineConfig().replace("smooth", window=6)
    return cfg.replace("warp", window=6)


def test_stabilize_outputs(jitter_clip):
    st = stabilize(jitter_clip.unstable_frames, _cfg())
    n = len(jitter_clip)
    assert len(st.frames) == len(st.sample_maps) == len(st.fields) == len(st.align) == n
    assert len(st.flows) == len(st.masks) == n - 1
    assert not st.fields[0].any() and not st.fields[-1].any()
    assert set(st.timings) == {"flow", "maskprop", "coarse", "fine"}
    assert len(st.transforms()) == n


def test_stabilize_rejects_bad_input():
    with pytest.raises(ValueError):
        stabilize([Frame(np.zeros((8, 8)))])
    with pytest.raises(ValueError):
        stabilize([Frame(np.zeros((8, 8))), Frame(np.zeros((9, 8)))])


def test_coarse_only_matches_sample_maps(jitter_clip):
    st = stabilize(jitter_clip.unstable_frames, _cfg(), fine=False)
    assert all(a is b for a, b in zip(st.frames, st.coarse_frames))
    assert all(not f.any() for f in st.fields)


def test_stable_input_stays_put():
    cfg = SynthConfig.static(n_frames=10, crop=(96, 72), theta_max=3.0, t_max=(8.0, 5.0))
    clip = make_clip(cfg, jitter=False, movers=0)
    st = stabilize(clip.stable_frames, _cfg())
    for a, b in zip(clip.stable_frames, st.frames):
        ok = b.valid
        assert ok.mean() > 0.95
        assert np.abs(a.data - b.data)[ok].mean() < 0.01


def test_worker_count_does_not_change_results(jitter_clip):
    a = stabilize(jitter_clip.unstable_frames[:6], _cfg())
    b = stabilize(jitter_clip.unstable_frames[:6], _cfg().replace("pipeline", workers=3))
    for x, y in zip(a.frames, b.frames):
        assert np.array_equal(x.data, y.data)


def test_neighbor_order():
    assert _neighbors(0, 5, 3) == [1, 2, 3]
    assert _neighbors(2, 5, 2) == [1, 3, 0, 4]


def test_outpaint_fully_valid_is_identity(jitter_clip):
    frames = jitter_clip.unstable_frames[:3]
    out, logs = outpaint_video(frames)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(frames, out))
    assert all(not e.rows for e in logs)


def test_outpaint_without_neighbours_uses_hole_fill():
    data = make_base_image(40, 30, seed=1)
    valid = np.zeros((30, 40), bool)
    valid[5:25, 5:35] = True
    out, log = outpaint_frame([Frame(data, valid)], 0)
    assert out.valid.all() and log.filled_by_fusion == 0 and log.filled_by_holes == 30 * 40 - 600
    assert np.array_equal(out.data[valid], data[valid])
    with pytest.raises(ValueError):
        outpaint_frame([Frame(data, np.zeros((30, 40), bool))], 0)


def test_pipeline_full_frame(jitter_clip):
    res = run_pipeline(jitter_clip.unstable_frames[:8], _cfg())
    assert cropping_ratio(jitter_clip.unstable_frames[:8], res.frames) == 1.0
    assert "outpaint" in res.timings
    # margins came at least partly from neighbours
    assert sum(e.filled_by_fusion for e in res.outpaint_logs) > 0


def test_fixed_point_single_pass(jitter_clip):
    tr = fixed_point_run(jitter_clip.unstable_frames[:6], 1, _cfg())
    assert len(tr) == 2 and len(tr.pose_deltas) == 2 and tr.pose_deltas[0] == (0.0, 0.0, 0.0)
    assert tr.flow_magnitude[1] < tr.flow_magnitude[0]
    with pytest.raises(ValueError):
        fixed_point_run(jitter_clip.unstable_frames[:6], 0)


def test_trace_outputs(tmp_path):
    tr = FixedPointTrace([3.0, 1.0], [(0.0, 0.0, 0.0), (0.1, 0.01, 2.0)])
    tr.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iteration,flow_magnitude,theta,scale,translation" and len(lines) == 3
    write_svg_plot(tmp_path / "t.svg", tr.flow_magnitude, "flow", "px")
    assert (tmp_path / "t.svg").read_text().startswith("<svg")


def test_masked_flow_magnitude():
    f = np.zeros((4, 4, 2))
    f[..., 0] = 3.0
    f[..., 1] = 4.0
    m = np.zeros((4, 4), bool)
    m[0, 0] = True
    assert masked_flow_magnitude([f], [m]) == 5.0
    assert masked_flow_magnitude([f], [~np.ones((4, 4), bool)]) == 0.0


def test_margin_comparison_on_small_fov():
    cfg = small_cfg(seed=4, n_frames=4, p_max=(0.0, 0.0), unstable_p_range=(0.0, 0.0))
    clip = make_clip(cfg, jitter=False, movers=0)
    sf = gen_small_fov_pair(clip, (96, 72))
    r = compare_margin_extension(sf.uncrop(1), sf.uncrop(0), sf.full[1])
    assert r is not None and r.margin_pixels > 0
    assert r.psnr_harmonic > 20
