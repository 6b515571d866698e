"""Whole-model glue: audio projection, viseme decoder and motion decoder in one parameter store."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import FeatureSequence, encode_audio, init_audio_params
from .mesh import TopologyError
from .motion import BASIS_W, identity_onehot, init_motion_params, motion_synthesis, style_from_onehot
from .numerics import CheckpointError, ParamStore, Tensor, make_rng, no_grad
from .viseme import DecoderConfig, autoregressive_decode, decoder_config_from_params, init_decoder_params

ADAPTED_STYLE = "motion.adapted_style"


@dataclass(frozen=True)
class ModelConfig:
    audio_dim: int
    n_vertices: int
    n_identities: int = 8
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    slope: float = 0.01
    fps: float = 30.0


def init_model(config: ModelConfig, seed: int) -> ParamStore:
    rng = make_rng(seed)
    params = ParamStore()
    init_audio_params(params, config.audio_dim, rng)
    init_decoder_params(params, config.decoder, rng)
    init_motion_params(params, config.n_vertices, rng, config.n_identities, config.decoder.d_model)
    return params


def config_from_params(params: ParamStore) -> ModelConfig:
    """Recover the architecture from parameter shapes (checkpoints carry no config)."""
    try:
        return ModelConfig(
            audio_dim=params["audio.proj.W"].shape[0],
            n_vertices=params[BASIS_W].shape[1] // 3,
            n_identities=params["motion.style.W"].shape[0],
            decoder=decoder_config_from_params(params),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing {exc}") from None


def check_compatible(params: ParamStore, n_vertices: int | None = None, audio_dim: int | None = None) -> ModelConfig:
    cfg = config_from_params(params)
    if n_vertices is not None and n_vertices != cfg.n_vertices:
        raise TopologyError(f"checkpoint predicts {cfg.n_vertices} vertices, template has {n_vertices}")
    if audio_dim is not None and audio_dim != cfg.audio_dim:
        raise CheckpointError(f"checkpoint expects {cfg.audio_dim}-dim audio features, got {audio_dim}")
    return cfg


def decode_visemes(features: FeatureSequence, n_frames: int, params: ParamStore, config: ModelConfig) -> Tensor:
    emb = encode_audio(features, n_frames, params, config.fps)
    return autoregressive_decode(emb.frames, params, config.decoder)


def identity_style(identity: int, params: ParamStore, config: ModelConfig) -> Tensor:
    return style_from_onehot(identity_onehot(identity, config.n_identities), params)


def forward(features: FeatureSequence, n_frames: int, style, params: ParamStore, config: ModelConfig) -> Tensor:
    """Displacements (T x V x 3) for one sequence; ``style`` is an identity index or a 64-vector."""
    vis = decode_visemes(features, n_frames, params, config)
    s = identity_style(style, params, config) if isinstance(style, (int, np.integer)) else style
    return motion_synthesis(vis, s, params, config.slope)


def n_frames_for(features: FeatureSequence, fps: float = 30.0) -> int:
    """Motion frames covering the span of a feature sequence (endpoint aligned)."""
    span = (len(features) - 1) / features.frame_rate
    return max(1, int(np.floor(span * fps + 0.5)) + 1)


def synthesize(features: FeatureSequence, params: ParamStore, style=None, n_frames: int | None = None) -> np.ndarray:
    """Inference helper: uses the adapted style if the checkpoint carries one, else identity 0."""
    cfg = config_from_params(params)
    if n_frames is None:
        n_frames = n_frames_for(features, cfg.fps)
    if style is None:
        style = params[ADAPTED_STYLE] if ADAPTED_STYLE in params else 0
    with no_grad():
        return forward(features, n_frames, style, params, cfg).data.copy()
