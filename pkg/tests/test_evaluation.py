import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from talkstyle import kernels
from talkstyle.evaluation import MetricReport, dtw_distance, evaluate, frame_costs, lip_sync, metric_l2
from talkstyle.mesh import MeshSequence, TemplateMesh
from talkstyle.numerics import make_rng


def brute_force_dtw(a, b):
    """Enumerate every monotone unit-step path; min cost, then shortest, then cost / length."""
    c = frame_costs(a, b)
    n, m = c.shape
    best = None

    def walk(i, j, cost, length):
        nonlocal best
        cost, length = cost + c[i, j], length + 1
        if (i, j) == (n - 1, m - 1):
            if best is None or (cost, length) < best:
                best = (cost, length)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, cost, length)

    walk(0, 0, 0.0, 0)
    return best[0] / best[1]


# L2 and Lip-sync ------------------------------------------------------------------------------
def test_l2_examples():
    g = make_rng(0).normal(size=(3, 4, 3))
    assert metric_l2(g, g) == 0.0
    p = np.zeros((1, 2, 3))
    p[0, 0] = (1, 0, 0)
    assert metric_l2(p, np.zeros((1, 2, 3))) == 0.5
    d = make_rng(1).normal(size=(5, 6, 3))
    d *= 0.7 / np.linalg.norm(d, axis=-1, keepdims=True)
    base = make_rng(9).normal(size=(5, 6, 3))
    assert metric_l2(base + d, base) == pytest.approx(0.7, abs=1e-14)


def test_l2_subset_and_errors():
    p = np.zeros((2, 3, 3))
    p[:, 2] = (0, 4, 0)
    assert metric_l2(p, np.zeros((2, 3, 3)), [2]) == 4.0
    assert metric_l2(p, np.zeros((2, 3, 3)), [0, 1]) == 0.0
    with pytest.raises(ValueError):
        metric_l2(p, np.zeros((2, 4, 3)))
    with pytest.raises(ValueError):
        metric_l2(p, p, [])


def test_lip_sync_examples():
    g = np.zeros((3, 4, 3))
    assert lip_sync(g, g, [0, 1]) == 0.0
    p = g.copy()
    p[1, 1] = (0, 0, 3)
    assert lip_sync(p, g, [0, 1]) == 1.0
    p = g.copy()
    p[:, :2] = (0.0, 0.25, 0.0)
    assert lip_sync(p, g, [0, 1]) == 0.25


# DTW ---------------------------------------------------------------------------------------
def test_dtw_examples():
    a = make_rng(2).normal(size=(4, 3, 3))
    assert dtw_distance(a, a) == 0.0
    assert dtw_distance(np.array([0.0, 1.0]), np.array([0.0, 0.0, 1.0])) == 0.0
    with pytest.raises(ValueError):
        dtw_distance(np.zeros((0, 2, 3)), a[:, :2])


def test_dtw_hand_computed():
    # costs |a_i - b_j| for a=[0,2], b=[1]: path (0,0)->(1,0), cost 1 + 1 over length 2
    assert dtw_distance(np.array([0.0, 2.0]), np.array([1.0])) == 1.0


@given(st.integers(0, 10**6), st.integers(1, 6), st.integers(1, 6))
def test_dtw_matches_brute_force(seed, n, m):
    r = make_rng(seed)
    a, b = r.normal(size=n), r.normal(size=m)
    assert dtw_distance(a, b) == brute_force_dtw(a, b)


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_dtw_brute_force_with_ties(backend):
    prev = kernels.BACKEND
    kernels.set_backend(backend)
    try:
        r = make_rng(3)
        for _ in range(40):
            a, b = r.integers(0, 3, r.integers(1, 6)).astype(float), r.integers(0, 3, r.integers(1, 6)).astype(float)
            assert dtw_distance(a, b) == brute_force_dtw(a, b)
    finally:
        kernels.set_backend(prev)


@given(st.integers(0, 10**6), st.integers(1, 7), st.integers(1, 7))
def test_dtw_symmetric(seed, n, m):
    r = make_rng(seed)
    a, b = r.normal(size=(n, 3, 3)), r.normal(size=(m, 3, 3))
    assert dtw_distance(a, b) == pytest.approx(dtw_distance(b, a), rel=1e-14)


@given(st.integers(0, 10**6), st.integers(1, 8))
def test_dtw_bounded_by_diagonal(seed, n):
    r = make_rng(seed)
    a, b = r.normal(size=(n, 2, 3)), r.normal(size=(n, 2, 3))
    diag = np.mean(np.diag(frame_costs(a, b)))
    assert dtw_distance(a, b) <= diag + 1e-12


def test_dtw_subset_uses_only_those_vertices():
    r = make_rng(4)
    a, b = r.normal(size=(5, 4, 3)), r.normal(size=(6, 4, 3))
    b2 = b.copy()
    b2[:, 3] += 100
    assert dtw_distance(a, b, [0, 1]) == dtw_distance(a, b2, [0, 1])


# invariants -------------------------------------------------------------------------------------
@given(st.integers(0, 10**6))
def test_vertex_permutation_invariance(seed):
    r = make_rng(seed)
    p, g = r.normal(size=(4, 6, 3)), r.normal(size=(4, 6, 3))
    perm = r.permutation(6)
    assert metric_l2(p[:, perm], g[:, perm]) == pytest.approx(metric_l2(p, g), rel=1e-14)
    assert lip_sync(p[:, perm], g[:, perm], range(6)) == lip_sync(p, g, range(6))
    assert dtw_distance(p[:, perm], g[:, perm]) == pytest.approx(dtw_distance(p, g), rel=1e-13)


def _tmpl(V=6):
    return TemplateMesh(np.zeros((V, 3)), [0, 1], [2, 3], [0, 1, 2, 3])


def test_evaluate_examples():
    g = [make_rng(5).normal(size=(4, 6, 3)), make_rng(6).normal(size=(3, 6, 3))]
    rep = evaluate(g, g, _tmpl())
    assert rep.as_dict() == dict(l2_face=0.0, l2_lip=0.0, f_dtw=0.0, lip_dtw=0.0, lip_sync=0.0, n_sequences=2)
    p = g[0] + make_rng(7).normal(size=g[0].shape)
    one = evaluate([p], [g[0]], _tmpl())
    lips = [0, 1, 2, 3]
    assert one.l2_face == metric_l2(p, g[0])
    assert one.l2_lip == metric_l2(p, g[0], lips)
    assert one.f_dtw == dtw_distance(p, g[0])
    assert one.lip_dtw == dtw_distance(p, g[0], lips)
    assert one.lip_sync == lip_sync(p, g[0], lips)


def test_evaluate_scale_probe():
    r = make_rng(8)
    g = r.normal(size=(5, 6, 3))
    e = r.normal(size=g.shape)
    a = evaluate([g + e], [g], _tmpl())
    b = evaluate([g + 2 * e], [g], _tmpl())
    for f in ("l2_face", "l2_lip", "lip_sync"):
        assert getattr(b, f) == pytest.approx(2 * getattr(a, f), rel=1e-14)


def test_evaluate_accepts_mesh_sequences_and_checks_pairing():
    g = MeshSequence(np.zeros((2, 6, 3)))
    assert evaluate([g], [g], [_tmpl()]).n_sequences == 1
    with pytest.raises(ValueError):
        evaluate([g, g], [g], _tmpl())
    with pytest.raises(ValueError):
        evaluate([g], [g], [_tmpl(), _tmpl()])


def test_report_validation_and_csv():
    with pytest.raises(ValueError):
        MetricReport(-1.0, 0, 0, 0, 0, 1)
    with pytest.raises(ValueError):
        MetricReport(float("nan"), 0, 0, 0, 0, 1)
    rep = MetricReport(0.1, 0.2, 0.3, 0.4, 0.5, 3)
    lines = rep.csv_text().splitlines()
    assert lines[0] == "l2_face,l2_lip,f_dtw,lip_dtw,lip_sync,n_sequences"
    assert lines[1] == "0.1,0.2,0.3,0.4,0.5,3"
    assert "lip_sync" in rep.table()


def test_brute_force_counts_all_paths():
    # sanity of the oracle itself: Delannoy numbers count monotone unit-step paths
    def count(n, m):
        return sum(1 for _ in _paths(n, m))

    assert [count(k, k) for k in (1, 2, 3, 4)] == [1, 3, 13, 63]


def _paths(n, m):
    def rec(i, j):
        if (i, j) == (n - 1, m - 1):
            yield ()
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                yield from rec(i + di, j + dj)

    return rec(0, 0)

