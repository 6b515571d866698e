"""Autoregressive training and two-stage style adaptation.

Training rolls the viseme decoder out over each whole sequence (no teacher
forcing), decodes motion with the sequence's identity style and steps Adam
on the combined loss. Adaptation freezes everything up to the viseme
features, which are decoded once and cached, then fits first the style
vector alone and afterwards the style vector together with the deformation
basis.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .audio import FeatureSequence
from .evaluation import metric_l2
from .mesh import MeshSequence, TemplateMesh, TopologyError, to_displacements
from .model import ADAPTED_STYLE, ModelConfig, config_from_params, decode_visemes, identity_style, n_frames_for
from .motion import BASIS_B, BASIS_W, motion_synthesis
from .numerics import AdamState, ParamStore, Tensor, adam_step, clip_grad_norm, make_rng, no_grad
from .supervision import LossWeights, loss_mse, loss_total, loss_vel


class ConfigurationError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"{what} became non-finite in epoch {epoch}")
        self.epoch = epoch


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 300
    lam: LossWeights = LossWeights()
    seed: int = 0
    clip: float | None = 1.0
    shuffle: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.clip is not None and not self.clip > 0:
            raise ConfigurationError("clip norm must be positive")


@dataclass
class TrainingSample:
    """One sequence ready for training: features, target displacements and closure weights."""

    name: str
    features: FeatureSequence
    target: np.ndarray  # T x V x 3 displacements
    weights: np.ndarray | None
    identity: int
    lip_region: list

    @property
    def n_frames(self) -> int:
        return self.target.shape[0]


@dataclass
class TrainResult:
    params: ParamStore
    history: list  # one dict per epoch
    best_epoch: int | None


HISTORY_FIELDS = ("epoch", "loss_total", "loss_mse", "loss_vel", "loss_lip")


def _check_samples(samples, cfg: ModelConfig):
    for s in samples:
        if s.weights is None:
            raise ConfigurationError(f"sequence {s.name} has no closure weights; run labeling first")
        if len(s.weights) != s.n_frames:
            raise ConfigurationError(f"sequence {s.name}: {len(s.weights)} weights for {s.n_frames} frames")
        if s.target.shape[1] != cfg.n_vertices:
            raise TopologyError(f"sequence {s.name} has {s.target.shape[1]} vertices, model {cfg.n_vertices}")
        if not 0 <= s.identity < cfg.n_identities:
            raise ConfigurationError(f"sequence {s.name}: identity {s.identity} outside the style table")


def sample_loss(sample: TrainingSample, params: ParamStore, cfg: ModelConfig, lam: LossWeights):
    vis = decode_visemes(sample.features, sample.n_frames, params, cfg)
    disp = motion_synthesis(vis, identity_style(sample.identity, params, cfg), params, cfg.slope)
    return loss_total(disp, sample.target, sample.weights, sample.lip_region, lam)


def validation_loss(samples, params: ParamStore, cfg: ModelConfig | None = None) -> float:
    """Mean reconstruction (MSE) loss over ``samples`` without building a graph."""
    cfg = cfg or config_from_params(params)
    with no_grad():
        vals = []
        for s in samples:
            vis = decode_visemes(s.features, s.n_frames, params, cfg)
            disp = motion_synthesis(vis, identity_style(s.identity, params, cfg), params, cfg.slope)
            vals.append(float(loss_mse(disp, s.target).data))
    return float(np.mean(vals))


def train(samples, params: ParamStore, config: TrainConfig, val_samples=(), progress=None) -> TrainResult:
    """Train on ``samples`` for ``config.epochs`` epochs, one sequence per Adam step.

    Returns the parameters of the epoch with the lowest validation loss
    (the final epoch when there is no validation set) and the per-epoch mean
    training losses.
    """
    samples, val_samples = list(samples), list(val_samples)
    if not samples:
        raise ConfigurationError("no training sequences")
    cfg = config_from_params(params)
    _check_samples(samples + val_samples, cfg)
    params.set_trainable(params.names())
    state = AdamState(lr=config.lr)
    rng = make_rng(config.seed)
    history = []
    best, best_val, best_epoch = None, math.inf, None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(samples)) if config.shuffle else np.arange(len(samples))
        sums = dict.fromkeys(HISTORY_FIELDS[1:], 0.0)
        for i in order:
            params.zero_grad()
            loss, parts = sample_loss(samples[i], params, cfg, config.lam)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(epoch)
            loss.backward()
            if config.clip is not None:
                norm = clip_grad_norm(params, config.clip)
                if not math.isfinite(norm):
                    raise DivergenceError(epoch, "gradient norm")
            adam_step(params, state)
            sums["loss_total"] += value
            for k in ("mse", "vel", "lip"):
                sums[f"loss_{k}"] += float(parts[k].data)
        row = {"epoch": epoch, **{k: v / len(samples) for k, v in sums.items()}}
        if val_samples:
            row["val_mse"] = validation_loss(val_samples, params, cfg)
            if not math.isfinite(row["val_mse"]):
                raise DivergenceError(epoch, "validation loss")
            if row["val_mse"] < best_val:
                best, best_val, best_epoch = params.copy(), row["val_mse"], epoch
        history.append(row)
        if progress is not None:
            progress(row)
    if best is None:
        best = params.copy()
        best_epoch = config.epochs if config.epochs else None
    return TrainResult(best, history, best_epoch)


# viseme cache ---------------------------------------------------------------------------------
def decoder_digest(params: ParamStore) -> str:
    """Hash of everything upstream of the viseme features."""
    return hashlib.sha256((params.digest("audio.") + params.digest("dec.")).encode()).hexdigest()


def _array_digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.asarray(a.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


@dataclass
class VisemeCache:
    visemes: list  # T_i x 64 arrays
    decoder_digest: str

    def __len__(self):
        return len(self.visemes)

    def __getitem__(self, i):
        return self.visemes[i]

    def content_digest(self) -> str:
        return _array_digest(self.visemes)

    def valid_for(self, params: ParamStore) -> bool:
        return self.decoder_digest == decoder_digest(params)

    def require(self, params: ParamStore) -> None:
        if not self.valid_for(params):
            raise StaleCacheError("viseme cache was computed with a different decoder checkpoint")


def precompute_visemes(audio, params: ParamStore, n_frames=None) -> VisemeCache:
    """Decode viseme features once per feature sequence.

    ``n_frames`` gives the motion length per item; by default it follows
    from each feature sequence's duration.
    """
    audio = list(audio)
    cfg = config_from_params(params)
    if n_frames is None:
        n_frames = [n_frames_for(f, cfg.fps) for f in audio]
    n_frames = list(n_frames)
    if len(n_frames) != len(audio):
        raise ConfigurationError("one frame count per feature sequence required")
    with no_grad():
        vis = [decode_visemes(f, n, params, cfg).data.copy() for f, n in zip(audio, n_frames)]
    return VisemeCache(vis, decoder_digest(params))


# adaptation ---------------------------------------------------------------------------------
@dataclass(frozen=True)
class AdaptConfig:
    stage1_epochs: int = 300
    stage2_epochs: int = 300
    lr: float = 1e-4
    lam: LossWeights = LossWeights()
    init_identity: int = 0
    clip: float | None = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigurationError("epochs must be non-negative")


def reference_targets(references, template: TemplateMesh | None = None) -> list:
    """Displacement arrays for reference sequences given as positions, displacements or arrays."""
    out = []
    for r in references:
        if isinstance(r, MeshSequence):
            if not r.is_displacement and template is None:
                raise ConfigurationError("position references need their template")
            out.append(to_displacements(r, template) if not r.is_displacement else r.frames)
        else:
            out.append(np.asarray(r, dtype=np.float64))
    return out


def _adapt_objective(targets, visemes, style, params, slope, lam: LossWeights):
    total = None
    for vis, tgt in zip(visemes, targets):
        disp = motion_synthesis(vis, style, params, slope)
        term = loss_mse(disp, tgt) * lam.mse + loss_vel(disp, tgt) * lam.vel
        total = term if total is None else total + term
    return total


def _run_stage(work: ParamStore, trainable, targets, visemes, config: AdaptConfig, epochs: int, slope: float) -> list:
    work.set_trainable(trainable)
    state = AdamState(lr=config.lr)
    curve = []
    for epoch in range(1, epochs + 1):
        acc = 0.0
        for vis, tgt in zip(visemes, targets):
            work.zero_grad()
            loss = _adapt_objective([tgt], [vis], work[ADAPTED_STYLE], work, slope, config.lam)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(epoch)
            loss.backward()
            if config.clip is not None:
                clip_grad_norm(work, config.clip, trainable)
            adam_step(work, state, trainable)
            acc += value
        curve.append(acc / len(targets))
    return curve


def _prepare(references, visemes: VisemeCache, params: ParamStore, template):
    targets = reference_targets(references, template)
    if not targets:
        raise ConfigurationError("adaptation needs at least one reference sequence")
    if len(visemes) != len(targets):
        raise ConfigurationError(f"{len(visemes)} cached viseme sequences for {len(targets)} references")
    visemes.require(params)
    cfg = config_from_params(params)
    for v, t in zip(visemes.visemes, targets):
        if v.shape[0] != t.shape[0]:
            raise ConfigurationError(f"viseme length {v.shape[0]} vs reference length {t.shape[0]}")
        if t.shape[1] != cfg.n_vertices:
            raise TopologyError(f"reference has {t.shape[1]} vertices, model {cfg.n_vertices}")
    return targets, cfg


def style_objective(references, visemes: VisemeCache, params: ParamStore, style, template=None,
                    lam: LossWeights = LossWeights()) -> float:
    targets, cfg = _prepare(references, visemes, params, template)
    s = style if isinstance(style, Tensor) else (
        identity_style(style, params, cfg) if isinstance(style, (int, np.integer)) else Tensor.constant(style))
    with no_grad():
        return float(_adapt_objective(targets, visemes.visemes, s, params, cfg.slope, lam).data)


def select_init_identity(references, visemes: VisemeCache, params: ParamStore, template=None, candidates=None,
                         lam: LossWeights = LossWeights()) -> int:
    """Training identity whose style best explains the references (ties: lowest index)."""
    cfg = config_from_params(params)
    candidates = range(cfg.n_identities) if candidates is None else candidates
    scores = [(style_objective(references, visemes, params, int(k), template, lam), int(k)) for k in candidates]
    return min(scores)[1]


@dataclass
class Stage1Result:
    params: ParamStore  # working copy holding the adapted style
    curve: list
    init_identity: int
    viseme_digest: str
    slope: float

    @property
    def style(self) -> np.ndarray:
        return self.params[ADAPTED_STYLE].data.copy()


@dataclass
class Stage2Result:
    params: ParamStore
    curve: list
    stage1: Stage1Result

    @property
    def style(self) -> np.ndarray:
        return self.params[ADAPTED_STYLE].data.copy()


def _frozen_check(visemes: VisemeCache, digest: str) -> None:
    if visemes.content_digest() != digest:
        raise StaleCacheError("cached viseme features changed during adaptation")


def adapt_style_stage1(references, visemes: VisemeCache, params: ParamStore, config: AdaptConfig = AdaptConfig(),
                       template: TemplateMesh | None = None) -> Stage1Result:
    """Fit only a free 64-dim style vector, starting from a training identity's embedding."""
    targets, cfg = _prepare(references, visemes, params, template)
    if not 0 <= config.init_identity < cfg.n_identities:
        raise ConfigurationError(f"init identity {config.init_identity} outside the style table")
    digest = visemes.content_digest()
    work = params.copy()
    init = params["motion.style.W"].data[config.init_identity].copy()
    if ADAPTED_STYLE in work:
        work[ADAPTED_STYLE].data = init
    else:
        work.add(ADAPTED_STYLE, init)
    curve = _run_stage(work, [ADAPTED_STYLE], targets, visemes.visemes, config, config.stage1_epochs, cfg.slope)
    _frozen_check(visemes, digest)
    return Stage1Result(work, curve, config.init_identity, digest, cfg.slope)


def adapt_basis_stage2(stage1: Stage1Result, references, visemes: VisemeCache, config: AdaptConfig = AdaptConfig(),
                       template: TemplateMesh | None = None) -> Stage2Result:
    """Refine the style vector jointly with the deformation basis, starting from stage 1."""
    if not isinstance(stage1, Stage1Result):
        raise TypeError("stage 2 needs the result of adapt_style_stage1")
    if visemes.content_digest() != stage1.viseme_digest:
        raise StaleCacheError("stage 2 must use the viseme cache of stage 1")
    targets, _ = _prepare(references, visemes, stage1.params, template)
    work = stage1.params.copy()
    curve = _run_stage(work, [ADAPTED_STYLE, BASIS_W, BASIS_B], targets, visemes.visemes, config,
                       config.stage2_epochs, stage1.slope)
    _frozen_check(visemes, stage1.viseme_digest)
    return Stage2Result(work, curve, stage1)


@dataclass
class AdaptationReport:
    stage1_curve: list
    stage2_curve: list
    init_identity: int
    style: list
    l2_lip: dict = field(default_factory=dict)  # init / stage1 / stage2

    @property
    def deltas(self) -> dict:
        return {
            "stage1": self.l2_lip["stage1"] - self.l2_lip["init"],
            "stage2": self.l2_lip["stage2"] - self.l2_lip["stage1"],
        }

    def as_dict(self) -> dict:
        return {
            "init_identity": self.init_identity,
            "stage1_curve": self.stage1_curve,
            "stage2_curve": self.stage2_curve,
            "style": self.style,
            "l2_lip": self.l2_lip,
            "l2_lip_delta": self.deltas,
        }


def heldout_l2_lip(visemes: VisemeCache, targets, params: ParamStore, style, lip_region) -> float:
    """Mean L2 over lip vertices of predictions from cached visemes, averaged over sequences."""
    cfg = config_from_params(params)
    s = style if isinstance(style, Tensor) else Tensor.constant(np.asarray(style, dtype=np.float64))
    with no_grad():
        vals = [metric_l2(motion_synthesis(v, s, params, cfg.slope).data, t, lip_region)
                for v, t in zip(visemes.visemes, targets)]
    return float(np.mean(vals))


def adapt(references, visemes: VisemeCache, params: ParamStore, template: TemplateMesh, config: AdaptConfig = AdaptConfig(),
          eval_references=None, eval_visemes: VisemeCache | None = None):
    """Both stages plus L2_lip bookkeeping; returns (adapted params, report).

    Metrics are measured on ``eval_references`` when given, otherwise on the
    adaptation references themselves.
    """
    template.require_lips()
    s1 = adapt_style_stage1(references, visemes, params, config, template)
    s2 = adapt_basis_stage2(s1, references, visemes, config, template)
    if eval_references is None:
        ev_vis, ev_tgt = visemes, reference_targets(references, template)
    else:
        ev_vis, ev_tgt = eval_visemes, reference_targets(eval_references, template)
        if ev_vis is None or len(ev_vis) != len(ev_tgt):
            raise ConfigurationError("evaluation references need their own viseme cache")
        ev_vis.require(params)
    lips = template.lip_region
    init_style = params["motion.style.W"].data[config.init_identity]
    l2 = {
        "init": heldout_l2_lip(ev_vis, ev_tgt, params, init_style, lips),
        "stage1": heldout_l2_lip(ev_vis, ev_tgt, s1.params, s1.style, lips),
        "stage2": heldout_l2_lip(ev_vis, ev_tgt, s2.params, s2.style, lips),
    }
    report = AdaptationReport(s1.curve, s2.curve, config.init_identity, s2.style.tolist(), l2)
    return s2.params, report
