"""Autoregressive transformer mapping audio embeddings to viseme features.

Two decode paths produce the same sequence:

* :func:`decode_naive` re-runs every decoder layer over the whole prefix at
  each step, exactly as the model is defined (used as a reference).
* :func:`autoregressive_decode` keeps per-layer key/value caches so each step
  only processes the newest row. Causal masking makes earlier rows
  independent of later ones, so the cached rows equal the recomputed ones.

Layers are post-norm: ``LN(x + sublayer(x))`` around causal self-attention,
cross-attention onto the audio stream and a ReLU feed-forward block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import (
    DegenerateRowError,
    DimensionError,
    ParamStore,
    Tensor,
    add,
    col_slice,
    concat,
    layer_norm,
    linear,
    matmul,
    matmul_rows,
    mul,
    relu,
    row_slice,
    softmax_rows,
    stack_rows,
    transpose,
    xavier_uniform,
)


class AlignmentError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    d_model: int = 64
    n_heads: int = 4
    d_head: int = 64
    d_ff: int = 128
    n_layers: int = 2

    def __post_init__(self):
        for k in ("d_model", "n_heads", "d_head", "d_ff", "n_layers"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")

    @property
    def start_token(self) -> np.ndarray:
        return np.zeros(self.d_model)


# masks and encodings ----------------------------------------------------------------
def positional_encoding(t: int, d: int = 64) -> np.ndarray:
    if t < 0:
        raise ValueError("frame index must be non-negative")
    k = np.arange(0, d, 2)
    angle = t / np.power(10000.0, k / d)
    pe = np.empty(d)
    pe[0::2] = np.sin(angle)
    pe[1::2] = np.cos(angle[: d // 2])
    return pe


def positional_table(n: int, d: int = 64) -> np.ndarray:
    return np.stack([positional_encoding(t, d) for t in range(n)])


def alignment_bias(T: int, cols: int | None = None) -> np.ndarray:
    """0 on the diagonal, -inf elsewhere; ``cols`` crops/extends the key axis."""
    if T < 1:
        raise ValueError("T must be >= 1")
    cols = T if cols is None else cols
    b = np.full((T, cols), -np.inf)
    idx = np.arange(min(T, cols))
    b[idx, idx] = 0.0
    return b


def causal_mask(T: int) -> np.ndarray:
    if T < 1:
        raise ValueError("T must be >= 1")
    return np.triu(np.full((T, T), -np.inf), k=1)


# attention ---------------------------------------------------------------------------
def scaled_dot_attention(Q, K, V, bias=None) -> Tensor:
    """``softmax(Q K^T / sqrt(d_k) + bias) V`` built from primitive ops."""
    Q, K, V = (x if isinstance(x, Tensor) else Tensor.constant(x) for x in (Q, K, V))
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise DimensionError(f"attention shapes Q{Q.shape} K{K.shape} V{V.shape} disagree")
    scores = mul(matmul(Q, transpose(K)), 1.0 / np.sqrt(Q.shape[1]))
    return matmul(softmax_rows(scores, bias), V)


def attention(q: Tensor, k: Tensor, v: Tensor | None, bias, n_heads: int) -> Tensor:
    """Fused multi-head attention node backed by the compiled kernels.

    Heads occupy consecutive column blocks of ``q``/``k``/``v``. With
    ``v=None`` the columns of ``k`` hold keys then values side by side.
    """
    kd = k.data
    if v is None:
        half = kd.shape[1] // 2
        kk, vv = kd[:, :half], kd[:, half:]
    else:
        kk, vv = kd, v.data
    qd = q.data
    scale = 1.0 / np.sqrt(qd.shape[1] // n_heads)
    try:
        out, p = kernels.attention_forward(qd, kk, vv, bias, n_heads, scale)
    except FloatingPointError as exc:
        raise DegenerateRowError(str(exc)) from None

    def backward(g):
        dq, dk, dv = kernels.attention_backward(g, qd, kk, vv, p, n_heads, scale)
        if v is None:
            return dq, np.concatenate([dk, dv], axis=1)
        return dq, dk, dv

    parents = (q, k) if v is None else (q, k, v)
    return Tensor._from_op(out, parents, backward)


def multi_head_attention(x_q, x_kv, bias, params: ParamStore, prefix: str, head_count: int) -> Tensor:
    Wq, Wk, Wv, Wo = (params[f"{prefix}.{n}"] for n in ("Wq", "Wk", "Wv", "Wo"))
    if Wq.shape[1] % head_count or Wq.shape[1] != Wk.shape[1] or Wo.shape[0] != Wv.shape[1]:
        raise DimensionError(f"{prefix}: projection shapes inconsistent with {head_count} heads")
    q, k, v = matmul(x_q, Wq), matmul(x_kv, Wk), matmul(x_kv, Wv)
    return matmul(attention(q, k, v, bias, head_count), Wo)


def _ln(x, params, name):
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def decoder_layer(h: Tensor, audio: Tensor, params: ParamStore, layer_idx: int, config: DecoderConfig,
                  bias_fn=alignment_bias) -> Tensor:
    t, T = h.shape[0], audio.shape[0]
    if t > T:
        raise AlignmentError(f"{t} motion rows but only {T} audio frames")
    p = f"dec.{layer_idx}"
    a = multi_head_attention(h, h, causal_mask(t), params, f"{p}.self", config.n_heads)
    h1 = _ln(add(h, a), params, f"{p}.ln1")
    c = multi_head_attention(h1, audio, bias_fn(t, T), params, f"{p}.cross", config.n_heads)
    h2 = _ln(add(h1, c), params, f"{p}.ln2")
    f = linear(relu(linear(h2, params[f"{p}.ff1.W"], params[f"{p}.ff1.b"])), params[f"{p}.ff2.W"], params[f"{p}.ff2.b"])
    return _ln(add(h2, f), params, f"{p}.ln3")


def init_decoder_params(params: ParamStore, config: DecoderConfig, rng) -> None:
    d, hd = config.d_model, config.n_heads * config.d_head
    for layer in range(config.n_layers):
        p = f"dec.{layer}"
        for block in ("self", "cross"):
            params.add(f"{p}.{block}.Wq", xavier_uniform(rng, d, hd))
            params.add(f"{p}.{block}.Wk", xavier_uniform(rng, d, hd))
            params.add(f"{p}.{block}.Wv", xavier_uniform(rng, d, hd))
            params.add(f"{p}.{block}.Wo", xavier_uniform(rng, hd, d))
        for ln in ("ln1", "ln2", "ln3"):
            params.add(f"{p}.{ln}.g", np.ones(d))
            params.add(f"{p}.{ln}.b", np.zeros(d))
        params.add_linear(f"{p}.ff1", d, config.d_ff, rng)
        params.add_linear(f"{p}.ff2", config.d_ff, d, rng)
    params.add_linear("dec.out", d, d, rng)


def decoder_config_from_params(params: ParamStore) -> DecoderConfig:
    n_layers = 0
    while f"dec.{n_layers}.self.Wq" in params:
        n_layers += 1
    if n_layers == 0:
        raise KeyError("no decoder layers in parameter store")
    # heads are assumed to be d_model wide, as in the default 4 x 64 layout
    d, hd = params["dec.0.self.Wq"].shape
    d_ff = params["dec.0.ff1.W"].shape[1]
    n_heads = max(1, hd // d)
    return DecoderConfig(d_model=d, n_heads=n_heads, d_head=hd // n_heads, d_ff=d_ff, n_layers=n_layers)


# decoding ---------------------------------------------------------------------------------
def _audio_tensor(audio) -> Tensor:
    frames = getattr(audio, "frames", audio)
    return frames if isinstance(frames, Tensor) else Tensor.constant(np.asarray(frames, dtype=np.float64))


def decode_naive(audio, params: ParamStore, config: DecoderConfig, bias_fn=alignment_bias) -> Tensor:
    """Reference rollout: re-run the full prefix through every layer at every step."""
    a = _audio_tensor(audio)
    T = a.shape[0]
    if T < 1:
        raise SequenceLengthError("audio must have at least one frame")
    pe = positional_table(T, config.d_model)
    rows = [Tensor.constant(config.start_token)]
    outputs = []
    for t in range(T):
        h = add(stack_rows(rows), pe[: t + 1])
        for layer in range(config.n_layers):
            h = decoder_layer(h, a, params, layer, config, bias_fn)
        v = linear(row_slice(h, t, t + 1), params["dec.out.W"], params["dec.out.b"])
        outputs.append(v)
        rows.append(v)
    return stack_rows(outputs)


def _cache_append(prev: Tensor | None, row: Tensor, buf: np.ndarray, t: int) -> Tensor:
    buf[t] = row.data[0]
    data = buf[: t + 1]
    if prev is None:
        return Tensor._from_op(data, (row,), lambda g: (g,))
    return Tensor._from_op(data, (prev, row), lambda g: (g[:t], g[t:]))


def autoregressive_decode(audio, params: ParamStore, config: DecoderConfig, bias_fn=alignment_bias) -> Tensor:
    """Roll the decoder out for ``T`` steps from the zero start token.

    Returns a T x d_model tensor; the graph runs through every step so the
    result can be back-propagated (no teacher forcing).
    """
    a = _audio_tensor(audio)
    T = a.shape[0]
    if T < 1:
        raise SequenceLengthError("audio must have at least one frame")
    d, H = config.d_model, config.n_heads
    hd = H * config.d_head
    pe = positional_table(T, d)
    bias = bias_fn(T, T)

    layers = []
    for layer in range(config.n_layers):
        p = f"dec.{layer}"
        w_self = concat([params[f"{p}.self.{n}"] for n in ("Wq", "Wk", "Wv")], axis=1)
        w_audio = concat([params[f"{p}.cross.Wk"], params[f"{p}.cross.Wv"]], axis=1)
        kv_audio = matmul_rows(a, w_audio)  # row results independent of T (prefix consistency)
        layers.append(
            dict(
                w_self=w_self,
                wo_self=params[f"{p}.self.Wo"],
                wq_cross=params[f"{p}.cross.Wq"],
                wo_cross=params[f"{p}.cross.Wo"],
                kv_audio=kv_audio,
                ln=[(params[f"{p}.{n}.g"], params[f"{p}.{n}.b"]) for n in ("ln1", "ln2", "ln3")],
                ff=(params[f"{p}.ff1.W"], params[f"{p}.ff1.b"], params[f"{p}.ff2.W"], params[f"{p}.ff2.b"]),
                buf=np.empty((T, 2 * hd)),
                cache=None,
            )
        )
    w_out, b_out = params["dec.out.W"], params["dec.out.b"]

    x = Tensor.constant(config.start_token[None, :])
    outputs = []
    for t in range(T):
        h = add(x, pe[t : t + 1])
        for L in layers:
            qkv = matmul(h, L["w_self"])
            L["cache"] = _cache_append(L["cache"], col_slice(qkv, hd, 3 * hd), L["buf"], t)
            sa = matmul(attention(col_slice(qkv, 0, hd), L["cache"], None, None, H), L["wo_self"])
            (g1, b1), (g2, b2), (g3, b3) = L["ln"]
            h1 = layer_norm(add(h, sa), g1, b1)
            q = matmul(h1, L["wq_cross"])
            ca = matmul(attention(q, L["kv_audio"], None, bias[t : t + 1], H), L["wo_cross"])
            h2 = layer_norm(add(h1, ca), g2, b2)
            w1, c1, w2, c2 = L["ff"]
            f = linear(relu(linear(h2, w1, c1)), w2, c2)
            h = layer_norm(add(h2, f), g3, b3)
        x = linear(h, w_out, b_out)
        outputs.append(x)
    return stack_rows(outputs)
