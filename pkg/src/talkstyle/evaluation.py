"""Vertex-error metrics: mean L2, DTW similarity and the Lip-sync score."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .mesh import MeshSequence, TemplateMesh


@dataclass(frozen=True)
class MetricReport:
    l2_face: float
    l2_lip: float
    f_dtw: float
    lip_dtw: float
    lip_sync: float
    n_sequences: int

    FIELDS = ("l2_face", "l2_lip", "f_dtw", "lip_dtw", "lip_sync", "n_sequences")

    def __post_init__(self):
        for name in self.FIELDS[:-1]:
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"metric {name}={v} must be finite and non-negative")

    def as_dict(self) -> dict:
        return asdict(self)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        w.writerow([repr(float(getattr(self, f))) for f in self.FIELDS[:-1]] + [self.n_sequences])
        return buf.getvalue()

    def table(self) -> str:
        rows = [(f, f"{getattr(self, f):.6f}") for f in self.FIELDS[:-1]]
        rows.append(("sequences", str(self.n_sequences)))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def _frames(x) -> np.ndarray:
    if isinstance(x, MeshSequence):
        return x.frames
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:  # scalar curves or single-vertex tracks: T x D -> T x 1 x D
        a = a[:, None, :]
    elif a.ndim == 1:
        a = a[:, None, None]
    return a


def _subset(subset, n_vertices):
    if subset is None:
        return np.arange(n_vertices)
    idx = np.asarray(sorted(set(int(i) for i in subset)), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("vertex subset is empty")
    if idx[0] < 0 or idx[-1] >= n_vertices:
        raise IndexError(f"vertex subset exceeds {n_vertices} vertices")
    return idx


def _vertex_errors(pred, gt, subset):
    p, g = _frames(pred), _frames(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    idx = _subset(subset, p.shape[1])
    d = p[:, idx] - g[:, idx]
    return np.sqrt((d * d).sum(axis=-1))  # T x |subset|


def metric_l2(pred, gt, subset=None) -> float:
    """Mean over frames and subset vertices of the per-vertex Euclidean error."""
    return float(_vertex_errors(pred, gt, subset).mean())


def lip_sync(pred, gt, lip_region) -> float:
    """Mean over frames of the largest lip-vertex error."""
    return float(_vertex_errors(pred, gt, lip_region).max(axis=1).mean())


def frame_costs(a, b, subset=None) -> np.ndarray:
    """|a| x |b| matrix of mean per-vertex distances between frames."""
    fa, fb = _frames(a), _frames(b)
    if fa.shape[0] == 0 or fb.shape[0] == 0:
        raise ValueError("DTW needs non-empty sequences")
    if fa.shape[1:] != fb.shape[1:]:
        raise ValueError(f"frame shape mismatch: {fa.shape[1:]} vs {fb.shape[1:]}")
    idx = _subset(subset, fa.shape[1])
    xa, xb = fa[:, idx], fb[:, idx]
    d = xa[:, None] - xb[None]
    return np.sqrt((d * d).sum(axis=-1)).mean(axis=-1)


def dtw_distance(a, b, subset=None) -> float:
    """Minimal cumulative frame cost over monotone unit-step alignments, divided by the path length.

    Among equal-cost alignments the shortest one is used.
    """
    cost, length = kernels.dtw_accumulate(frame_costs(a, b, subset))
    return float(cost / length)


def evaluate(preds, gts, templates) -> MetricReport:
    """Per-sequence metrics averaged over sequence pairs.

    ``templates`` is one :class:`TemplateMesh` shared by all pairs or one per pair.
    """
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts) or not preds:
        raise ValueError(f"cannot pair {len(preds)} predictions with {len(gts)} ground truths")
    if isinstance(templates, TemplateMesh):
        templates = [templates] * len(preds)
    templates = list(templates)
    if len(templates) != len(preds):
        raise ValueError("one template per sequence pair required")
    rows = []
    for p, g, t in zip(preds, gts, templates):
        t.require_lips()
        lips = t.lip_region
        rows.append((
            metric_l2(p, g),
            metric_l2(p, g, lips),
            dtw_distance(p, g),
            dtw_distance(p, g, lips),
            lip_sync(p, g, lips),
        ))
    m = np.mean(np.array(rows), axis=0)
    return MetricReport(*(float(x) for x in m), n_sequences=len(rows))
