"""Training losses and automatic bilabial lip-closure labeling.

All losses are plain sums of squared per-vertex errors (no averaging), so
their magnitudes scale with sequence length and vertex count.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import LipMetadataError, MeshSequence, TemplateMesh
from .numerics import DimensionError, Tensor, add, index, mul, row_slice, square, sub, sum_squares, total

BILABIALS = frozenset({"m", "b", "p"})


class DegenerateLossWarning(UserWarning):
    pass


class TimingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    vel: float = 10.0
    lip: float = 5.0

    def __post_init__(self):
        if min(self.mse, self.vel, self.lip) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class Phone:
    label: str
    start: float
    end: float


class PhonemeTiming(list):
    """Sorted list of :class:`Phone` segments."""

    def __init__(self, phones=()):
        phones = [p if isinstance(p, Phone) else Phone(str(p[0]), float(p[1]), float(p[2])) for p in phones]
        for p in phones:
            if not p.start < p.end:
                raise ValueError(f"phone {p.label!r} has start {p.start} >= end {p.end}")
        if any(a.start > b.start for a, b in zip(phones, phones[1:])):
            raise ValueError("phone timings must be sorted by start time")
        super().__init__(phones)


def is_bilabial(label: str) -> bool:
    return label.strip().lower() in BILABIALS


# losses ---------------------------------------------------------------------------------
def _as_pred(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, MeshSequence):
        return Tensor.constant(x.frames)
    return Tensor.constant(np.asarray(x, dtype=np.float64))


def _as_gt(x) -> np.ndarray:
    if isinstance(x, MeshSequence):
        return x.frames
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _check_basis(pred, gt):
    if isinstance(pred, MeshSequence) and isinstance(gt, MeshSequence) and pred.is_displacement != gt.is_displacement:
        raise ValueError("prediction and ground truth must both be positions or both displacements")


def loss_mse(pred, gt) -> Tensor:
    _check_basis(pred, gt)
    p, g = _as_pred(pred), _as_gt(gt)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} vs ground truth {g.shape}")
    return sum_squares(sub(p, g))


def loss_vel(pred, gt) -> Tensor:
    _check_basis(pred, gt)
    p, g = _as_pred(pred), _as_gt(gt)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} vs ground truth {g.shape}")
    T = p.shape[0]
    if T < 2:
        warnings.warn("velocity loss needs at least two frames; returning 0", DegenerateLossWarning, stacklevel=2)
        return Tensor.constant(np.array(0.0))
    dp = sub(row_slice(p, 1, T), row_slice(p, 0, T - 1))
    return sum_squares(sub(dp, g[1:] - g[:-1]))


def loss_lip(pred, gt, weights, lip_region) -> Tensor:
    _check_basis(pred, gt)
    p, g = _as_pred(pred), _as_gt(gt)
    w = np.asarray(weights, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} vs ground truth {g.shape}")
    if w.shape != (p.shape[0],):
        raise DimensionError(f"{w.size} closure weights for {p.shape[0]} frames")
    lips = np.asarray(sorted(lip_region), dtype=np.int64)
    if lips.size == 0:
        raise LipMetadataError("lip loss needs a non-empty lip region")
    err = sub(index(p, (slice(None), lips)), g[:, lips])
    return total(mul(square(err), w[:, None, None]))


def loss_total(pred, gt, weights, lip_region, lam: LossWeights = LossWeights()):
    """Weighted sum ``mse + vel + lip``; returns (total, {name: component})."""
    parts = {
        "mse": loss_mse(pred, gt),
        "vel": loss_vel(pred, gt),
        "lip": loss_lip(pred, gt, weights, lip_region),
    }
    combined = add(add(mul(parts["mse"], lam.mse), mul(parts["vel"], lam.vel)), mul(parts["lip"], lam.lip))
    return combined, parts


# labeling ---------------------------------------------------------------------------------
def lip_distance(frame, tmpl: TemplateMesh) -> float:
    """Mean Euclidean distance over paired upper/lower lip vertices of one V x 3 frame."""
    if not tmpl.lip_upper:
        raise LipMetadataError("template has no paired lip vertices")
    f = np.asarray(frame, dtype=np.float64)
    diff = f[tmpl.lip_upper] - f[tmpl.lip_lower]
    return float(np.mean(np.sqrt((diff * diff).sum(axis=-1))))


def lip_distance_curve(frames, tmpl: TemplateMesh) -> np.ndarray:
    """Per-frame lip distance of a T x V x 3 position array."""
    if not tmpl.lip_upper:
        raise LipMetadataError("template has no paired lip vertices")
    f = frames.frames if isinstance(frames, MeshSequence) else np.asarray(frames, dtype=np.float64)
    diff = f[:, tmpl.lip_upper] - f[:, tmpl.lip_lower]
    return np.sqrt((diff * diff).sum(axis=-1)).mean(axis=1)


def time_to_frame(seconds: float, fps: float) -> int:
    """Round half up, so a phone starting exactly between frames maps to the later one."""
    return int(math.floor(seconds * fps + 0.5))


def default_search_window(fps: float) -> int:
    return max(1, time_to_frame(0.25, fps))


def detect_closures(curve, timings, fps: float, search_window: int | None = None) -> list:
    """Frame of minimal lip distance in ``[onset - window, onset]`` for every bilabial.

    Ties resolve to the earliest frame. Bilabials starting past the end of
    the curve are skipped with a :class:`TimingWarning`.
    """
    curve = np.asarray(curve, dtype=np.float64)
    if search_window is None:
        search_window = default_search_window(fps)
    if search_window < 1:
        raise ValueError("search window must be at least one frame")
    found = []
    for ph in timings:
        if not is_bilabial(ph.label):
            continue
        onset = time_to_frame(ph.start, fps)
        if onset >= curve.size:
            warnings.warn(f"bilabial {ph.label!r} at {ph.start:.3f}s is beyond the sequence end", TimingWarning, stacklevel=2)
            continue
        lo = max(0, onset - search_window)
        frame = lo + int(np.argmin(curve[lo : onset + 1]))
        if frame not in found:
            found.append(frame)
    return sorted(found)


def gaussian_weights(closures, T: int, radius: int = 2, sigma: float = 1.0, binary: bool = False) -> np.ndarray:
    """Per-frame lip-loss weights: a Gaussian bump (or a box with ``binary``) around each closure.

    Overlapping windows combine by pointwise maximum.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    w = np.zeros(T)
    for c in closures:
        if not 0 <= c < T:
            raise ValueError(f"closure frame {c} outside [0, {T})")
        for k in range(-radius, radius + 1):
            f = c + k
            if 0 <= f < T:
                val = 1.0 if binary else math.exp(-(k * k) / (2.0 * sigma * sigma))
                w[f] = max(w[f], val)
    return w


def label_sequence(seq: MeshSequence, tmpl: TemplateMesh, timings, search_window=None, radius=2, sigma=1.0,
                   binary=False):
    """Full labeling pipeline: lip-distance curve -> closures -> weights."""
    frames = seq.frames + tmpl.vertices[None] if seq.is_displacement else seq.frames
    curve = lip_distance_curve(frames, tmpl)
    closures = detect_closures(curve, timings, seq.fps, search_window)
    return closures, gaussian_weights(closures, seq.n_frames, radius, sigma, binary)


# files -----------------------------------------------------------------------------------
def save_timings(timings, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in timings:
            fh.write(f"{p.label}\t{float(p.start)!r}\t{float(p.end)!r}\n")


def load_timings(path) -> PhonemeTiming:
    phones = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected label<TAB>start<TAB>end")
            phones.append(Phone(parts[0], float(parts[1]), float(parts[2])))
    return PhonemeTiming(phones)


def save_weights(w, path) -> None:
    Path(path).write_text("".join(f"{float(x)!r}\n" for x in w))


def load_weights(path) -> np.ndarray:
    text = Path(path).read_text().split()
    return np.array([float(x) for x in text])
