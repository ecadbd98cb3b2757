import numpy as np
import pytest

from usbone.bonemap import BoneMapConfig, bone_probability_map
from usbone.phantom import (
    Fracture,
    PhantomConfig,
    PhantomTruth,
    bone_curve,
    generate,
    truth_roi,
    with_seed,
)
from usbone.tga import apply_tga


def test_fracture_gap_columns():
    cfg = PhantomConfig(frames=4, fracture=Fracture(128, gap_width=6))
    _, truth = generate(cfg)
    for i in range(4):
        assert np.flatnonzero(np.isnan(truth.curves[i])).tolist() == list(range(125, 132))
        mask = truth.bone_mask(i)
        assert not mask[:, 125:132].any()
        assert mask[:, 124].any() and mask[:, 132].any()


def test_gap_columns_carry_no_ridge():
    seq, truth = generate(PhantomConfig.scaled(64, frames=2, fracture=Fracture(32, gap_width=4)))
    row = int(round(truth.curves[0, 10]))
    assert seq[0][row, 31:34].mean() < 0.5 * seq[0][row, 5:25].mean()


def test_curves_continuous_without_fracture():
    for curvature in (0.0, 20.0):
        cfg = PhantomConfig(frames=8, bone_curvature=curvature)
        slope = curvature * 2 / ((cfg.size - 1) / 2)
        for t in range(cfg.frames):
            assert np.max(np.abs(np.diff(bone_curve(cfg, t)))) <= 1 + slope


def test_same_seed_bit_identical():
    cfg = PhantomConfig.scaled(48, frames=6, seed=11)
    a, ta = generate(cfg)
    b, tb = generate(cfg)
    assert a.frames.tobytes() == b.frames.tobytes()
    np.testing.assert_array_equal(ta.curves, tb.curves)
    c, _ = generate(with_seed(cfg, 12))
    assert not np.array_equal(a.frames, c.frames)


def test_values_clipped_to_unit_range(small_phantom):
    seq, _ = small_phantom
    assert seq.frames.min() >= 0 and seq.frames.max() <= 1


@pytest.mark.parametrize("kwargs", [
    dict(bone_depth=250),
    dict(bone_depth=4),
    dict(drift_amplitude=120),
    dict(fracture=Fracture(300)),
    dict(shadow_attenuation=1.0),
    dict(size=4),
])
def test_geometry_checked(kwargs):
    with pytest.raises(ValueError):
        PhantomConfig(**kwargs)


def test_fracture_gap_width_checked():
    with pytest.raises(ValueError):
        Fracture(10, gap_width=0)


def test_flat_bone_roi_rows():
    _, truth = generate(PhantomConfig(frames=2, drift_amplitude=0))
    hw = truth.ridge_half_width
    roi = truth_roi(truth, 0, margin=10)
    assert (roi.top, roi.bottom) == (90, 110 + hw)
    assert (roi.left, roi.right) == (0, 255)
    roi0 = truth_roi(truth, 1, margin=0)
    assert (roi0.top, roi0.bottom) == (100, 100 + hw)


def test_roi_contains_curve(small_phantom):
    _, truth = small_phantom
    for i in range(len(truth.curves)):
        roi = truth_roi(truth, i)
        for c, d in enumerate(truth.curves[i]):
            assert roi.contains(d, c)


def test_fracture_step_grows_roi_by_step():
    base = PhantomConfig(frames=2, drift_amplitude=0, fracture=Fracture(128, 6, 0.0))
    stepped = PhantomConfig(frames=2, drift_amplitude=0, fracture=Fracture(128, 6, 8.0))
    a = truth_roi(generate(base)[1], 0)
    b = truth_roi(generate(stepped)[1], 0)
    assert (b.bottom - b.top) - (a.bottom - a.top) == 8


def test_roi_index_checked(small_phantom):
    with pytest.raises(IndexError):
        truth_roi(small_phantom[1], len(small_phantom[1].curves))


def test_truth_dict_round_trip():
    _, truth = generate(PhantomConfig.scaled(32, frames=3, fracture=Fracture(16, 2, 1.5)))
    doc = truth.to_dict(margin=4)
    back = PhantomTruth.from_dict(doc)
    np.testing.assert_allclose(back.curves, truth.curves, atol=1e-4)
    assert back.fracture == truth.fracture
    assert doc["rois"][0] == truth_roi(truth, 0, 4).as_list()


def _regions(seq, truth, t):
    frame = seq[t]
    n = frame.shape[0]
    rows = np.arange(n)[:, None]
    d = truth.curves[t][None, :]
    ridge = np.abs(rows - d) <= 3 * truth.ridge_sigma
    near = rows < 0.1 * n
    return frame, ridge, near, rows > d


def test_ridge_dominates_background(default_phantom_frames):
    seq, truth = default_phantom_frames
    for t in (0, 64, 200):
        frame, ridge, near, _ = _regions(seq, truth, t)
        on_curve = frame[np.rint(truth.curves[t]).astype(int), np.arange(frame.shape[1])].mean()
        background = frame[~ridge & ~near].mean()
        assert on_curve >= 2 * background


def test_shadow_darker_than_tissue_above(default_phantom_frames):
    seq, truth = default_phantom_frames
    cfg = PhantomConfig()
    for t in (0, 100, 255):
        frame, ridge, near, below = _regions(seq, truth, t)
        above_mean = frame[~below & ~ridge & ~near].mean()
        below_mean = frame[below & ~ridge].mean()
        assert below_mean < above_mean
        assert below_mean / above_mean <= cfg.shadow_attenuation + 0.1


def test_bone_map_mass_in_roi(default_phantom_frames):
    seq, truth = default_phantom_frames
    roi = truth_roi(truth, 0, 10)
    assert roi.area < 0.25 * 256 * 256
    t = bone_probability_map(apply_tga(seq[0]), BoneMapConfig(), 1)
    assert t[roi.mask(256, 256)].sum() >= 0.5 * t.sum()
