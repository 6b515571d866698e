"""Style-conditioned motion decoder: viseme features + style vector -> vertex displacements."""
from __future__ import annotations

import numpy as np

from .mesh import TopologyError
from .numerics import DimensionError, ParamStore, Tensor, add, concat, leaky_relu, matmul, matmul_rows, reshape, xavier_uniform

STYLE_DIM = 64
HIDDEN = 64
N_HIDDEN_LAYERS = 4
BASIS_W = "motion.basis.W"
BASIS_B = "motion.basis.b"


def identity_onehot(index: int, n_identities: int = 8) -> np.ndarray:
    if not 0 <= index < n_identities:
        raise ValueError(f"identity {index} outside [0, {n_identities})")
    v = np.zeros(n_identities)
    v[index] = 1.0
    return v


def init_motion_params(params: ParamStore, n_vertices: int, rng, n_identities: int = 8, viseme_dim: int = 64) -> None:
    params.add("motion.style.W", xavier_uniform(rng, n_identities, STYLE_DIM))
    params.add_linear("motion.fc1", viseme_dim + STYLE_DIM, HIDDEN, rng)
    for i in range(2, N_HIDDEN_LAYERS + 1):
        params.add_linear(f"motion.fc{i}", HIDDEN, HIDDEN, rng)
    params.add_linear("motion.basis", HIDDEN, 3 * n_vertices, rng)


def style_from_onehot(onehot, params: ParamStore) -> Tensor:
    """Linear style layer applied to a one-hot identity: selects one embedding row."""
    oh = np.asarray(onehot, dtype=np.float64).reshape(1, -1)
    W = params["motion.style.W"]
    if oh.shape[1] != W.shape[0]:
        raise DimensionError(f"one-hot of length {oh.shape[1]} vs style table with {W.shape[0]} rows")
    if not (np.all((oh == 0) | (oh == 1)) and oh.sum() == 1):
        raise ValueError("identity vector must be one-hot")
    return reshape(matmul(Tensor.constant(oh), W), (STYLE_DIM,))


def basis_vertices(params: ParamStore) -> int:
    return params[BASIS_W].shape[1] // 3


def _frame_linear(h, params, name):
    # row-wise product: frame t's output never depends on other frames, not even through rounding
    return add(matmul_rows(h, params[f"{name}.W"]), params[f"{name}.b"])


def motion_synthesis(visemes, style, params: ParamStore, slope: float = 0.01, n_vertices: int | None = None) -> Tensor:
    """Per-frame MLP on ``[v_t, style]`` followed by the linear deformation basis.

    Returns a T x V x 3 displacement tensor.
    """
    v = visemes if isinstance(visemes, Tensor) else Tensor.constant(np.asarray(visemes, dtype=np.float64))
    s = style if isinstance(style, Tensor) else Tensor.constant(np.asarray(style, dtype=np.float64))
    V = basis_vertices(params)
    if n_vertices is not None and n_vertices != V:
        raise TopologyError(f"deformation basis covers {V} vertices, mesh has {n_vertices}")
    T = v.shape[0]
    s_rows = matmul(Tensor.constant(np.ones((T, 1))), reshape(s, (1, STYLE_DIM)))
    h = concat([v, s_rows], axis=1)
    for i in range(1, N_HIDDEN_LAYERS + 1):
        h = leaky_relu(_frame_linear(h, params, f"motion.fc{i}"), slope)
    out = _frame_linear(h, params, "motion.basis")
    return reshape(out, (T, V, 3))
