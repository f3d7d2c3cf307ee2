from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from fullstab.coarse import gaussian_kernel, smooth_channel
from fullstab.geom import AffinePose, Frame, frame_center
from fullstab.metrics import (PSNR_CAP, MetricsReport, anisotropy, camera_path, cropping_ratio,
                              distortion_series, distortion_value, path_stability, psnr, ssim,
                              ssim_map)


def _frames(n, valid_frac=1.0):
    out = []
    for _ in range(n):
        v = np.zeros((10, 10), bool)
        v.flat[:int(100 * valid_frac)] = True
        out.append(Frame(np.zeros((10, 10)), v))
    return out


def test_cropping_ratio_examples():
    assert cropping_ratio(_frames(3), _frames(3)) == 1.0
    assert cropping_ratio(_frames(3), _frames(3, 0.8)) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        cropping_ratio([], [])


def test_distortion_examples():
    sim = AffinePose(0.3, 1.4, 5, -2).matrix((50, 40))
    assert distortion_value(transforms=[sim]) == pytest.approx(1.0, abs=1e-12)
    assert distortion_value(transforms=[np.diag([0.8, 1.0, 1.0])]) == pytest.approx(0.8)
    assert distortion_value(transforms=[sim, np.diag([1.0, 0.9, 1.0])]) == pytest.approx(0.9)


def test_distortion_from_correspondences(rng):
    src = rng.uniform(0, 100, size=(20, 2))
    dst = src * [0.8, 1.0] + [3, 4]
    assert distortion_value(transforms=[(src, dst)]) == pytest.approx(0.8, abs=1e-9)


@given(st.floats(0.2, 5.0), st.floats(0.5, 1.0))
def test_distortion_invariant_to_isotropic_rescale(s, sx):
    h = np.diag([sx, 1.0, 1.0])
    h[0, 2] = 4.0
    assert distortion_value(transforms=[np.diag([s, s, 1.0]) @ h]) == pytest.approx(
        distortion_value(transforms=[h]), abs=1e-12)


def test_distortion_skips_unfittable(caplog):
    pts = np.zeros((2, 2))
    series = distortion_series(transforms=[(pts, pts), np.eye(3)])
    assert math.isnan(series[0]) and series[1] == 1.0
    assert "skipped" in caplog.text
    with pytest.raises(ValueError):
        distortion_value(transforms=[(pts, pts)])


def test_anisotropy_rejects_singular():
    with pytest.raises(ValueError):
        anisotropy(np.diag([0.0, 0.0, 1.0]))


def test_stability_examples():
    assert path_stability(np.zeros((40, 3))) == 1.0
    n = 64
    t = np.arange(n)
    assert path_stability(np.sin(2 * np.pi * 2 * t / n)) == pytest.approx(1.0, abs=1e-12)
    assert path_stability(np.sin(2 * np.pi * 20 * t / n)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        path_stability(np.zeros(31))


@given(st.integers(0, 2 ** 31), st.floats(-100, 100))
def test_stability_ignores_offset_and_rewards_smoothing(seed, c):
    noise = np.random.default_rng(seed).normal(size=(64, 3))
    assert path_stability(noise + c) == pytest.approx(path_stability(noise), abs=1e-9)
    k = gaussian_kernel(20)
    smooth = np.stack([smooth_channel(noise[:, i], k) for i in range(3)], 1)
    assert path_stability(smooth) > path_stability(noise)


def test_camera_path_channels():
    p = camera_path([AffinePose(0.01, 1.0, 1.0, -2.0)] * 3)
    np.testing.assert_allclose(p[:, 0], [0, 0.01, 0.02, 0.03], atol=1e-12)
    assert p.shape == (4, 3)


def test_psnr_examples(rng):
    a = rng.random((20, 20, 3)) * 0.8
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(a, a[:5])
    m = np.zeros((20, 20), bool)
    m[:5] = True
    b = a.copy()
    b[5:] = 0
    assert psnr(a, b, m) == PSNR_CAP


@given(st.integers(0, 2 ** 31))
def test_psnr_ssim_match_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((32, 40, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert psnr(a, b) == pytest.approx(peak_signal_noise_ratio(a, b, data_range=1.0), abs=1e-9)
    ref = structural_similarity(a, b, data_range=1.0, channel_axis=2, gaussian_weights=True,
                                sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


def _ssim_textbook(x, y, sigma=1.5, r=5):
    """Direct weighted sums over an 11x11 Gaussian window, reflect borders."""
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    w2 = np.outer(k, k) / k.sum() ** 2
    xp = np.pad(x, r, mode="symmetric")
    yp = np.pad(y, r, mode="symmetric")
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            px = xp[i:i + 2 * r + 1, j:j + 2 * r + 1]
            py = yp[i:i + 2 * r + 1, j:j + 2 * r + 1]
            mx, my = (w2 * px).sum(), (w2 * py).sum()
            vx = (w2 * px * px).sum() - mx * mx
            vy = (w2 * py * py).sum() - my * my
            cxy = (w2 * px * py).sum() - mx * my
            out[i, j] = ((2 * mx * my + 1e-4) * (2 * cxy + 9e-4)) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4))
    return out


def test_ssim_map_matches_textbook(rng):
    a = rng.random((18, 16))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    np.testing.assert_allclose(ssim_map(a, b), _ssim_textbook(a, b), atol=1e-9)
    assert ssim(a, a) == pytest.approx(1.0)


def test_report_clamps_and_writes(tmp_path):
    r = MetricsReport(1.2, -0.1, float("nan"), [1.0], [0.9])
    assert r.cropping_ratio == 1.0 and r.distortion_value == 0.0 and math.isnan(r.stability_score)
    r.write_csv(tmp_path / "m.csv")
    assert "summary" in (tmp_path / "m.csv").read_text()
    assert r.as_text().startswith("cropping_ratio 1.000000")
