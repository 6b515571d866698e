import numpy as np
import pytest

from talkstyle.mesh import (
    LipMetadataError,
    MeshFormatError,
    MeshSequence,
    TemplateMesh,
    TopologyError,
    apply_template,
    load_msq,
    load_template,
    msq_bytes,
    parse_msq,
    save_msq,
    save_template,
    to_displacements,
)
from talkstyle.motion import identity_onehot, init_motion_params, motion_synthesis, style_from_onehot
from talkstyle.numerics import DimensionError, ParamStore, Tensor, leaky_relu, linear, make_rng, sum_squares

V = 6


def _motion(seed=0, n_vertices=V):
    p = ParamStore()
    init_motion_params(p, n_vertices, make_rng(seed))
    return p


def _vis(T, seed=1):
    return make_rng(seed).normal(size=(T, 64))


def test_onehot_selects_embedding_row():
    p = _motion()
    for k in (0, 5):
        np.testing.assert_array_equal(style_from_onehot(identity_onehot(k), p).data, p["motion.style.W"].data[k])
    assert not np.array_equal(style_from_onehot(identity_onehot(1), p).data, style_from_onehot(identity_onehot(2), p).data)


def test_onehot_validation():
    p = _motion()
    with pytest.raises(ValueError):
        identity_onehot(8)
    with pytest.raises(DimensionError):
        style_from_onehot(np.eye(5)[0], p)
    with pytest.raises(ValueError):
        style_from_onehot(np.full(8, 0.125), p)


def test_style_gradient_only_reaches_selected_row():
    p = _motion()
    s = style_from_onehot(identity_onehot(3), p)
    sum_squares(motion_synthesis(_vis(4), s, p)).backward()
    g = p["motion.style.W"].grad
    assert np.any(g[3] != 0)
    assert np.all(np.delete(g, 3, axis=0) == 0)


def test_zero_weights_give_zero_displacement():
    p = _motion()
    for t in p.values():
        t.data = np.zeros_like(t.data)
    out = motion_synthesis(_vis(5), make_rng(2).normal(size=64), p)
    assert out.shape == (5, V, 3)
    assert np.all(out.data == 0)


@pytest.mark.parametrize("T", [1, 3, 17])
def test_output_shape(T):
    assert motion_synthesis(_vis(T), np.zeros(64), _motion()).shape == (T, V, 3)


def test_style_changes_output():
    p = _motion()
    v = _vis(4)
    a = motion_synthesis(v, p["motion.style.W"].data[0], p).data
    b = motion_synthesis(v, p["motion.style.W"].data[1], p).data
    assert np.abs(a - b).max() > 0


def test_topology_mismatch():
    with pytest.raises(TopologyError):
        motion_synthesis(_vis(2), np.zeros(64), _motion(), n_vertices=V + 1)


def test_pipeline_decomposition_recomputed_by_hand():
    p = _motion()
    v, s = _vis(3), make_rng(4).normal(size=64)
    h = np.hstack([v, np.tile(s, (3, 1))])
    for i in range(1, 5):
        h = leaky_relu(linear(Tensor(h), p[f"motion.fc{i}.W"], p[f"motion.fc{i}.b"]), 0.01).data
    expect = (h @ p["motion.basis.W"].data + p["motion.basis.b"].data).reshape(3, V, 3)
    np.testing.assert_allclose(motion_synthesis(v, s, p).data, expect, rtol=0, atol=1e-12)


def test_frame_permutation_equivariance():
    p = _motion()
    v, s = _vis(6), np.ones(64) * 0.1
    perm = make_rng(5).permutation(6)
    np.testing.assert_array_equal(motion_synthesis(v[perm], s, p).data, motion_synthesis(v, s, p).data[perm])


# templates and sequences ----------------------------------------------------------------------
def _template():
    return TemplateMesh(make_rng(6).normal(size=(V, 3)), [0, 1], [2, 3], [0, 1, 2, 3, 4])


def test_apply_template_examples():
    t = TemplateMesh(np.ones((V, 3)), [0], [1], [0, 1])
    seq = apply_template(np.zeros((2, V, 3)), t)
    assert not seq.is_displacement and np.all(seq.frames == 1)
    assert np.all(apply_template(np.ones((2, V, 3)), t).frames == 2)


def test_apply_then_subtract_is_exact():
    t = _template()
    d = make_rng(7).normal(size=(4, V, 3))
    back = to_displacements(apply_template(d, t), t)
    np.testing.assert_allclose(back, d, rtol=0, atol=1e-15)


def test_apply_template_topology_error():
    with pytest.raises(TopologyError):
        apply_template(np.zeros((2, V + 1, 3)), _template())


def test_template_lip_metadata_validation():
    with pytest.raises(LipMetadataError):
        TemplateMesh(np.zeros((4, 3)), [0], [1, 2], [0, 1, 2])
    with pytest.raises(LipMetadataError):
        TemplateMesh(np.zeros((4, 3)), [0], [9], [0, 9])
    with pytest.raises(LipMetadataError):
        TemplateMesh(np.zeros((4, 3)), [0], [1], [0])
    with pytest.raises(LipMetadataError):
        TemplateMesh(np.zeros((4, 3))).require_lips()


def test_mesh_sequence_validation():
    with pytest.raises(MeshFormatError):
        MeshSequence(np.zeros((2, 3)))
    with pytest.raises(MeshFormatError):
        MeshSequence(np.full((1, 2, 3), np.nan))
    with pytest.raises(MeshFormatError):
        MeshSequence(np.zeros((1, 2, 3)), fps=0)


def test_msq_round_trip_byte_exact(tmp_path):
    seq = MeshSequence(make_rng(8).normal(size=(5, V, 3)).astype(np.float32), 30.0, True)
    save_msq(seq, tmp_path / "a.msq")
    back = load_msq(tmp_path / "a.msq")
    np.testing.assert_array_equal(back.frames, seq.frames)
    assert back.is_displacement and back.fps == 30.0
    assert msq_bytes(back) == (tmp_path / "a.msq").read_bytes()


def test_msq_errors():
    raw = msq_bytes(MeshSequence(np.zeros((2, 3, 3))))
    with pytest.raises(MeshFormatError):
        parse_msq(b"MSQ2" + raw[4:])
    with pytest.raises(OSError):
        parse_msq(raw[:-1])
    with pytest.raises(OSError):
        parse_msq(raw[:10])


def test_template_round_trip_with_sidecar(tmp_path):
    t = _template()
    t.vertices = t.vertices.astype(np.float32).astype(np.float64)
    save_template(t, tmp_path / "face.msq")
    assert (tmp_path / "face.json").exists()
    back = load_template(tmp_path / "face.msq")
    np.testing.assert_array_equal(back.vertices, t.vertices)
    assert back.metadata() == t.metadata()


def test_template_without_sidecar(tmp_path):
    save_msq(MeshSequence(np.zeros((1, V, 3))), tmp_path / "bare.msq")
    with pytest.raises(LipMetadataError):
        load_template(tmp_path / "bare.msq")
