import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from talkstyle.mesh import LipMetadataError, MeshSequence, TemplateMesh
from talkstyle.numerics import DimensionError, ParamStore, finite_diff_check, make_rng
from talkstyle.supervision import (
    DegenerateLossWarning,
    LossWeights,
    Phone,
    PhonemeTiming,
    TimingWarning,
    detect_closures,
    gaussian_weights,
    is_bilabial,
    label_sequence,
    lip_distance,
    load_timings,
    load_weights,
    loss_lip,
    loss_mse,
    loss_total,
    loss_vel,
    save_timings,
    save_weights,
)


def _z(T, V=1):
    return np.zeros((T, V, 3))


# losses ------------------------------------------------------------------------------------
def test_mse_examples():
    assert float(loss_mse(_z(2, 3), _z(2, 3)).data) == 0.0
    p = _z(1)
    p[0, 0] = (1, 0, 0)
    assert float(loss_mse(p, _z(1)).data) == 1.0
    p = _z(2)
    p[0, 0], p[1, 0] = (1, 0, 0), (0, 2, 0)
    assert float(loss_mse(p, _z(2)).data) == 5.0


def test_mse_shape_and_basis_errors():
    with pytest.raises(DimensionError):
        loss_mse(_z(2), _z(3))
    with pytest.raises(ValueError):
        loss_mse(MeshSequence(_z(2), is_displacement=True), MeshSequence(_z(2)))


def test_vel_examples():
    p = _z(2)
    p[1, 0] = (1, 0, 0)
    assert float(loss_vel(p, _z(2)).data) == 1.0
    assert float(loss_vel(_z(3), _z(3)).data) == 0.0


def test_vel_degenerate_single_frame():
    with pytest.warns(DegenerateLossWarning):
        assert float(loss_vel(_z(1), _z(1)).data) == 0.0


@given(st.integers(0, 10**6))
def test_vel_invariant_to_constant_offset(seed):
    r = make_rng(seed)
    p, g = r.normal(size=(5, 4, 3)), r.normal(size=(5, 4, 3))
    off = r.normal(size=(1, 4, 3)) * 10
    np.testing.assert_allclose(loss_vel(p + off, g).data, loss_vel(p, g).data, rtol=1e-12)


def test_lip_examples():
    assert float(loss_lip(np.ones((4, 3, 3)), _z(4, 3), np.zeros(4), [0, 1]).data) == 0.0
    p = _z(4, 3)
    p[2, 1] = (1, 0, 0)
    w = np.zeros(4)
    w[2] = 1
    assert float(loss_lip(p, _z(4, 3), w, [1]).data) == 1.0
    # non-lip vertices never count
    p[2, 2] = (5, 5, 5)
    assert float(loss_lip(p, _z(4, 3), w, [1]).data) == 1.0


def test_lip_gaussian_window_times_unit_error():
    w = gaussian_weights([5], 10)
    p = _z(10, 2)
    p[:, 0, 0] = 1.0
    assert float(loss_lip(p, _z(10, 2), w, [0]).data) == pytest.approx(w.sum(), abs=1e-15)
    assert w.sum() == pytest.approx(1 + 2 * math.exp(-0.5) + 2 * math.exp(-2), abs=1e-15)


def test_lip_errors():
    with pytest.raises(DimensionError):
        loss_lip(_z(3), _z(3), np.ones(2), [0])
    with pytest.raises(LipMetadataError):
        loss_lip(_z(3), _z(3), np.ones(3), [])


def test_total_uses_paper_weights():
    # errors +-1/sqrt(2) on one vertex over two frames: mse = 1, vel = 2, lip = 3 with w = (3, 3)
    e = 1 / math.sqrt(2)
    p = _z(2)
    p[:, 0, 0] = (e, -e)
    tot, parts = loss_total(p, _z(2), np.array([3.0, 3.0]), [0])
    assert [float(parts[k].data) for k in ("mse", "vel", "lip")] == pytest.approx([1, 2, 3], abs=1e-12)
    assert float(tot.data) == pytest.approx(36, abs=1e-12)


def test_total_zero_when_exact():
    g = make_rng(1).normal(size=(4, 3, 3))
    tot, parts = loss_total(g, g, np.ones(4), [1])
    assert float(tot.data) == 0.0 and all(float(v.data) == 0.0 for v in parts.values())


def test_loss_weights_non_negative():
    with pytest.raises(ValueError):
        LossWeights(lip=-1)
    assert LossWeights() == LossWeights(1.0, 10.0, 5.0)


def test_total_gradient():
    r = make_rng(2)
    p = ParamStore()
    p.add("y", r.normal(size=(3, 4, 3)))
    g = r.normal(size=(3, 4, 3))
    w = np.array([0.2, 1.0, 0.6])
    assert finite_diff_check(lambda q: loss_total(q["y"], g, w, [1, 3])[0], p) < 1e-4


@given(st.integers(0, 10**6))
def test_components_non_negative(seed):
    r = make_rng(seed)
    p, g = r.normal(size=(3, 2, 3)), r.normal(size=(3, 2, 3))
    _, parts = loss_total(p, g, r.random(3), [0])
    assert all(float(v.data) >= 0 for v in parts.values())


# labeling ------------------------------------------------------------------------------------
def _tmpl(verts):
    verts = np.asarray(verts, dtype=float)
    n = len(verts) // 2
    return TemplateMesh(verts, list(range(n)), list(range(n, 2 * n)), list(range(2 * n)))


def test_lip_distance_examples():
    assert lip_distance(np.zeros((2, 3)), _tmpl(np.zeros((2, 3)))) == 0.0
    f = np.array([[0, 1.0, 0], [0, 0, 0]])
    assert lip_distance(f, _tmpl(f)) == 1.0
    f = np.array([[0, 1.0, 0], [5, 3.0, 0], [0, 0, 0], [5, 0, 0]])
    assert lip_distance(f, _tmpl(f)) == 2.0


def test_lip_distance_needs_pairs():
    with pytest.raises(LipMetadataError):
        lip_distance(np.zeros((2, 3)), TemplateMesh(np.zeros((2, 3))))


def test_is_bilabial_aliases():
    assert all(is_bilabial(x) for x in ("m", "B", " P "))
    assert not is_bilabial("s")


def test_detect_closures_examples():
    curve = [3, 2, 1, 2, 3]
    t = PhonemeTiming([Phone("m", 4.0, 5.0)])
    assert detect_closures(curve, t, fps=1.0, search_window=4) == [2]
    assert detect_closures(curve, PhonemeTiming([Phone("a", 0, 5)]), fps=1.0) == []
    t2 = PhonemeTiming([Phone("b", 3.0, 4.0), Phone("p", 4.0, 5.0)])
    assert detect_closures(curve, t2, fps=1.0, search_window=4) == [2]


def test_detect_closures_ties_take_earliest_and_window_clips_at_zero():
    t = PhonemeTiming([Phone("m", 3.0, 4.0)])
    assert detect_closures([1, 0, 0, 0, 5], t, fps=1.0, search_window=10) == [1]


def test_detect_closures_skips_late_bilabial():
    t = PhonemeTiming([Phone("m", 1.0, 2.0), Phone("p", 9.0, 10.0)])
    with pytest.warns(TimingWarning):
        assert detect_closures([2, 1, 3], t, fps=1.0, search_window=1) == [1]


def test_detect_closures_window_validation():
    with pytest.raises(ValueError):
        detect_closures([1, 2], PhonemeTiming(), 30.0, search_window=0)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=25), st.lists(st.integers(0, 30), max_size=4), st.integers(1, 6))
def test_detect_closures_against_brute_force(curve, onsets, window):
    onsets = sorted(onsets)
    t = PhonemeTiming([Phone("m", s, s + 0.5) for s in onsets])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TimingWarning)
        got = detect_closures(curve, t, fps=1.0, search_window=window)
    expect = set()
    for s in onsets:
        if s >= len(curve):
            continue
        lo = max(0, s - window)
        vals = curve[lo : s + 1]
        expect.add(lo + min(range(len(vals)), key=lambda i: (vals[i], i)))
    assert got == sorted(expect)
    for c in got:
        assert any(max(0, s - window) <= c <= s and curve[c] == min(curve[max(0, s - window) : s + 1]) for s in onsets)


def test_gaussian_weights_example():
    w = gaussian_weights([5], 10)
    np.testing.assert_allclose(w[3:8], [0.1353, 0.6065, 1, 0.6065, 0.1353], atol=1e-4)
    assert np.all(w[:3] == 0) and np.all(w[8:] == 0)
    for k in range(-2, 3):
        assert abs(w[5 + k] - math.exp(-k * k / 2)) < 1e-15


def test_gaussian_weights_edges_and_overlap():
    assert np.all(gaussian_weights([], 5) == 0)
    w = gaussian_weights([0, 2], 4)
    np.testing.assert_allclose(w, [1, math.exp(-0.5), 1, math.exp(-0.5)])
    assert np.all(gaussian_weights([1, 3], 6, binary=True)[:6] == [1, 1, 1, 1, 1, 1])
    with pytest.raises(ValueError):
        gaussian_weights([7], 5)


@given(st.lists(st.integers(0, 19), max_size=6), st.integers(0, 4), st.floats(0.2, 3))
def test_gaussian_weights_in_unit_interval(closures, radius, sigma):
    w = gaussian_weights(closures, 20, radius, sigma)
    assert np.all((w >= 0) & (w <= 1))
    for c in closures:
        assert w[c] == 1.0
    far = [f for f in range(20) if all(abs(f - c) > radius for c in closures)]
    assert np.all(w[far] == 0)


def test_label_sequence_on_displacements():
    verts = np.array([[0, 1.0, 0], [0, 0, 0]])
    tmpl = _tmpl(verts)
    d = np.zeros((6, 2, 3))
    d[:, 0, 1] = [0, -0.3, -0.9, -0.4, 0, 0]  # upper lip dips to touch at frame 2
    closures, w = label_sequence(MeshSequence(d, 1.0, True), tmpl, PhonemeTiming([Phone("m", 3.0, 4.0)]), search_window=3)
    assert closures == [2]
    assert w[2] == 1.0 and w.shape == (6,)


# files -----------------------------------------------------------------------------------------
def test_phoneme_timing_validation():
    with pytest.raises(ValueError):
        PhonemeTiming([("a", 1.0, 1.0)])
    with pytest.raises(ValueError):
        PhonemeTiming([("a", 1.0, 2.0), ("b", 0.5, 0.7)])


def test_timing_round_trip(tmp_path):
    t = PhonemeTiming([("a", 0.0, 1 / 3), ("m", 1 / 3, 0.7)])
    save_timings(t, tmp_path / "x.tim")
    assert load_timings(tmp_path / "x.tim") == t
    (tmp_path / "bad.tim").write_text("a 0 1\n")
    with pytest.raises(ValueError):
        load_timings(tmp_path / "bad.tim")


def test_weights_round_trip(tmp_path):
    w = gaussian_weights([3], 9)
    save_weights(w, tmp_path / "w.txt")
    np.testing.assert_array_equal(load_weights(tmp_path / "w.txt"), w)
