# Copyright 2024 The LVCD Authors

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
import numpy as np
from numpy.testing import assert_almost_equal
from lvcd.data import Shape, extract_sketch, gen_clip, render_clip
from lvcd.metrics import (EvalConfig, color_error, edmd, edmd_masks, edmd_report, edt,
                          evaluate_clip, mean_motion, psnr, resize_mask, ssim, tc,
                          tc_report, warp)


def brute_force_edt(mask):
    """O(n^2) distance to the nearest line pixel"""
    ys, xs = np.nonzero(mask)
    H, W = mask.shape
    yy, xx = np.mgrid[0:H, 0:W]
    squared = (yy[..., np.newaxis] - ys) ** 2 + (xx[..., np.newaxis] - xs) ** 2
    return np.sqrt(squared.min(axis=-1).astype(np.float64))


def test_warp_identity():
    """Test zero flow is the identity"""
    frame = np.random.default_rng(0).random((3, 8, 6)).astype(np.float32)
    out = warp(frame, np.zeros((2, 8, 6), dtype=np.float32))
    assert np.array_equal(out, frame)


def test_warp_ramp():
    """Test a constant flow shifts a ramp"""
    ramp = np.tile(np.arange(5, dtype=np.float64), (1, 4, 1))
    flow = np.zeros((2, 4, 5))
    flow[0] = -1
    out = warp(ramp, flow)
    assert_almost_equal(out[0, 2], [0, 0, 1, 2, 3])
    flow[0] = 0.5
    assert_almost_equal(warp(ramp, flow)[0, 2], [0.5, 1.5, 2.5, 3.5, 4])


def test_warp_synthetic_clip():
    """Test warping frame t with the ground-truth flow gives frame t+1"""
    shape = Shape(kind='rect', color=(1.0, 0.0, 0.0), size=(4.0, 4.0),
                  knots=[(0, 10.0, 8.0), (1, 12.0, 11.0)])
    frames, flows, labels, _ = render_clip([shape], 2, 24, 24)
    out = warp(frames[0], flows[0])
    inside = labels[1] == 1
    assert inside.sum() == 81
    assert_almost_equal(out[:, inside], frames[1][:, inside])


def test_tc_identity():
    """Test tc of the original clip"""
    clip = gen_clip(1, length=5, H=16, W=16)
    rng = np.random.default_rng(1)
    flows = rng.normal(0, 2, clip.flows.shape)
    assert abs(tc(clip.frames, clip.frames, flows) - 1) < 1e-6
    assert abs(tc(clip.frames, clip.frames, clip.flows, EvalConfig(size=None)) - 1) < 1e-6


def test_tc_scale_invariant():
    """Test doubling the generated brightness"""
    clip = gen_clip(2, length=4, H=16, W=16)
    generated = np.clip(clip.frames + 0.05 * np.random.default_rng(2).random(
        clip.frames.shape), 0, 1) * 0.5
    config = EvalConfig(size=None)
    first = tc(generated, clip.frames, clip.flows, config)
    second = tc(2 * generated, clip.frames, clip.flows, config)
    assert abs(first - second) < 1e-6


def test_tc_black_original():
    """Test guarded denominators are flagged"""
    frames = np.zeros((3, 3, 8, 8))
    generated = np.random.default_rng(3).random((3, 3, 8, 8))
    report = tc_report(generated, frames, np.zeros((2, 2, 8, 8)), EvalConfig(size=None))
    assert report.flagged == [0, 1]
    assert np.isfinite(report.value)
    try:
        tc(frames[:1], frames[:1], np.zeros((0, 2, 8, 8)), EvalConfig(size=None))
    except ValueError:
        return
    assert False


def test_edt_examples():
    """Test edt on small masks"""
    mask = np.zeros((3, 3), dtype=bool)
    mask[0, 0] = True
    expected = np.array([[0, 1, 2], [1, np.sqrt(2), np.sqrt(5)],
                         [2, np.sqrt(5), 2 * np.sqrt(2)]])
    assert_almost_equal(edt(mask), expected)
    assert np.all(edt(np.ones((4, 5))) == 0)
    try:
        edt(np.zeros((3, 3)))
    except ValueError:
        return
    assert False


def test_edt_brute_force():
    """Test edt equals the brute force oracle"""
    rng = np.random.default_rng(4)
    for k in range(200):
        density = rng.uniform(0.002, 0.3)
        mask = rng.random((32, 32)) < density
        if not mask.any():
            mask[rng.integers(32), rng.integers(32)] = True
        assert np.array_equal(edt(mask), brute_force_edt(mask)), k


def test_edmd_rows():
    """Test line at row 10 against a line at row 12"""
    first = np.zeros((32, 32))
    first[10] = 1
    second = np.zeros((32, 32))
    second[12] = 1
    expected = np.sqrt(np.mean((brute_force_edt(first) - brute_force_edt(second)) ** 2))
    assert_almost_equal(edmd_masks(second, first), expected)
    assert_almost_equal(edmd_masks(second, first), np.sqrt(3.875))
    assert_almost_equal(edmd_masks(second, first, size=256), np.sqrt(62144 / 256))
    large = resize_mask(first, 256)
    assert large.shape == (256, 256) and np.all(large[80:88]) and large.sum() == 8 * 256
    assert_almost_equal(edmd_masks(second[None], first, size=256), np.sqrt(242.75))
    assert edmd_masks(first, first) == 0


def test_edmd_identity():
    """Test edmd of frames against their own sketches"""
    clip = gen_clip(5, length=3, H=32, W=32)
    assert edmd(clip.frames, clip.sketches) == 0
    shifted = np.roll(clip.frames, 2, axis=3)
    assert edmd(shifted, clip.sketches) >= 0


def test_edmd_skips_empty():
    """Test frames without lines are skipped"""
    frames = np.full((2, 3, 16, 16), 0.5)
    frames[1, :, :, 8:] = 1
    sketches = np.stack([extract_sketch(f) for f in frames])
    report = edmd_report(frames, sketches)
    assert report.skipped == [0]
    assert report.value == 0


def test_psnr():
    """Test psnr"""
    a = np.full((3, 4, 4), 0.5)
    assert psnr(a, a) == float('inf')
    assert_almost_equal(psnr(a, a + 0.1), 20.0)


def test_ssim():
    """Test ssim identity and symmetry"""
    rng = np.random.default_rng(6)
    a = rng.random((3, 16, 16))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert_almost_equal(ssim(a, a), 1.0)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
    assert ssim(a, b) < 1


def test_mean_motion():
    """Test the motion statistic"""
    flows = np.zeros((2, 2, 8, 8))
    assert mean_motion(flows) == 0
    flows[0, 0, :2] = 3
    assert_almost_equal(mean_motion(flows, size=None), 3)
    assert_almost_equal(mean_motion(flows, size=16), 6)


def test_color_error():
    """Test colour error on shape pixels"""
    clip = gen_clip(7, length=3, H=16, W=16)
    assert_almost_equal(color_error(clip.frames, clip.labels, clip.palette), 0)
    assert color_error(1 - clip.frames, clip.labels, clip.palette) >= 0


def test_evaluate_clip():
    """Test all metrics of an identical clip"""
    clip = gen_clip(8, length=4, H=32, W=32)
    res = evaluate_clip(clip.frames, clip.frames, clip.flows, clip.sketches,
                        EvalConfig(size=64))
    assert res['psnr'] == float('inf')
    assert_almost_equal(res['ssim'], 1.0)
    assert abs(res['tc'] - 1) < 1e-6
    assert res['edmd'] == 0 or np.isnan(res['edmd'])


def test_evaluate_clip_psnr():
    """Test psnr over the whole clip with one identical frame"""
    clip = gen_clip(9, length=3, H=32, W=32)
    generated = clip.frames.copy()
    generated[1:] = np.clip(generated[1:] + 0.1, 0, 1)
    res = evaluate_clip(generated, clip.frames, clip.flows, clip.sketches,
                        EvalConfig(size=None))
    assert np.isfinite(res['psnr'])
    assert_almost_equal(res['psnr'], psnr(generated, clip.frames))
    assert res['psnr'] > psnr(generated[1:], clip.frames[1:])
