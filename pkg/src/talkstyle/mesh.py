"""Mesh sequences, templates and the ``.msq`` container."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MSQ_MAGIC = b"MSQ1"
MSQ_VERSION = 1
_HEADER = struct.Struct("<4sIIIfB")


class MeshFormatError(ValueError):
    pass


class TopologyError(ValueError):
    pass


class LipMetadataError(ValueError):
    pass


@dataclass
class MeshSequence:
    frames: np.ndarray  # T x V x 3
    fps: float = 30.0
    is_displacement: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise MeshFormatError(f"mesh frames must be T x V x 3, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise MeshFormatError("mesh frames contain non-finite values")
        if self.fps <= 0:
            raise MeshFormatError("fps must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class TemplateMesh:
    vertices: np.ndarray  # V x 3
    lip_upper: list = field(default_factory=list)
    lip_lower: list = field(default_factory=list)
    lip_region: list = field(default_factory=list)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        n = self.vertices.shape[0]
        self.lip_upper = [int(i) for i in self.lip_upper]
        self.lip_lower = [int(i) for i in self.lip_lower]
        self.lip_region = [int(i) for i in self.lip_region]
        if len(self.lip_upper) != len(self.lip_lower):
            raise LipMetadataError("lip_upper and lip_lower must pair up")
        for i in self.lip_upper + self.lip_lower + self.lip_region:
            if not 0 <= i < n:
                raise LipMetadataError(f"lip index {i} out of range for {n} vertices")
        if not set(self.lip_upper) | set(self.lip_lower) <= set(self.lip_region):
            raise LipMetadataError("lip_region must contain every paired lip vertex")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def require_lips(self) -> None:
        if not self.lip_upper:
            raise LipMetadataError("template has no paired lip vertices")

    def metadata(self) -> dict:
        return {"lip_upper": self.lip_upper, "lip_lower": self.lip_lower, "lip_region": self.lip_region}


def apply_template(displacements, tmpl: TemplateMesh, fps: float = 30.0) -> MeshSequence:
    d = np.asarray(displacements, dtype=np.float64)
    if d.ndim != 3 or d.shape[1:] != tmpl.vertices.shape:
        raise TopologyError(f"displacements {d.shape} do not match template with {tmpl.n_vertices} vertices")
    return MeshSequence(d + tmpl.vertices[None], fps, False)


def to_displacements(seq: MeshSequence, tmpl: TemplateMesh) -> np.ndarray:
    if seq.is_displacement:
        return seq.frames
    if seq.frames.shape[1:] != tmpl.vertices.shape:
        raise TopologyError(f"sequence has {seq.n_vertices} vertices, template {tmpl.n_vertices}")
    return seq.frames - tmpl.vertices[None]


# .msq ----------------------------------------------------------------------------
def msq_bytes(seq: MeshSequence) -> bytes:
    t, v, _ = seq.frames.shape
    head = _HEADER.pack(MSQ_MAGIC, MSQ_VERSION, v, t, seq.fps, int(bool(seq.is_displacement)))
    return head + np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()


def parse_msq(buf: bytes) -> MeshSequence:
    if len(buf) < _HEADER.size:
        raise OSError("mesh file truncated inside header")
    magic, version, v, t, fps, disp = _HEADER.unpack_from(buf, 0)
    if magic != MSQ_MAGIC:
        raise MeshFormatError("not a mesh sequence: bad magic")
    if version != MSQ_VERSION:
        raise MeshFormatError(f"unsupported mesh sequence version {version}")
    if t == 0 or v == 0:
        raise MeshFormatError("mesh sequence declares zero frames or vertices")
    need = _HEADER.size + 12 * t * v
    if len(buf) < need:
        raise OSError(f"mesh payload short: need {need} bytes, have {len(buf)}")
    if len(buf) > need:
        raise MeshFormatError("trailing bytes after mesh payload")
    frames = np.frombuffer(buf, dtype="<f4", count=3 * t * v, offset=_HEADER.size).reshape(t, v, 3)
    return MeshSequence(frames.astype(np.float64), float(fps), bool(disp))


def save_msq(seq: MeshSequence, path) -> None:
    with open(path, "wb") as fh:
        fh.write(msq_bytes(seq))


def load_msq(path) -> MeshSequence:
    with open(path, "rb") as fh:
        return parse_msq(fh.read())


def template_sidecar(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def save_template(tmpl: TemplateMesh, path) -> None:
    save_msq(MeshSequence(tmpl.vertices[None], 30.0, False), path)
    with open(template_sidecar(path), "w") as fh:
        json.dump(tmpl.metadata(), fh)


def load_template(path, meta_path=None) -> TemplateMesh:
    seq = load_msq(path)
    if seq.n_frames != 1:
        raise MeshFormatError(f"template must have exactly one frame, found {seq.n_frames}")
    meta_path = Path(meta_path) if meta_path else template_sidecar(path)
    if not meta_path.exists():
        raise LipMetadataError(f"lip metadata sidecar {meta_path} not found")
    with open(meta_path) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise LipMetadataError(f"{meta_path}: {exc}") from exc
    missing = {"lip_upper", "lip_lower", "lip_region"} - set(meta)
    if missing:
        raise LipMetadataError(f"{meta_path}: missing keys {sorted(missing)}")
    return TemplateMesh(seq.frames[0], meta["lip_upper"], meta["lip_lower"], meta["lip_region"])
