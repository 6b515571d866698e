"""Named parameter storage, seeded initialisation and ``.ckpt`` files."""
from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict

import numpy as np

from .tensor import Tensor

CKPT_MAGIC = b"IMCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream keyed by an explicit 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class ParamStore:
    """Insertion-ordered mapping of unique names to trainable tensors."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(values, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_linear(self, prefix: str, fan_in: int, fan_out: int, rng, bias: bool = True) -> None:
        self.add(f"{prefix}.W", xavier_uniform(rng, fan_in, fan_out))
        if bias:
            self.add(f"{prefix}.b", np.zeros(fan_out))

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"parameter {name!r} not in store") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def set_trainable(self, names) -> None:
        """Only ``names`` keep ``requires_grad``; everything else is frozen."""
        keep = set(names)
        unknown = keep - set(self._params)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        for n, p in self._params.items():
            p.requires_grad = n in keep

    def trainable(self) -> list:
        return [n for n, p in self._params.items() if p.requires_grad]

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, p in self._params.items():
            t = out.add(n, p.data.copy())
            t.requires_grad = p.requires_grad
        return out

    def load_values(self, other: "ParamStore") -> None:
        for n, p in other.items():
            self[n].data = p.data.copy()

    def state(self) -> dict:
        return {n: p.data.copy() for n, p in self._params.items()}

    def digest(self, prefix: str = "") -> str:
        """SHA-256 over names, shapes and float64 bytes of matching parameters."""
        h = hashlib.sha256()
        for n, p in self._params.items():
            if not n.startswith(prefix):
                continue
            h.update(n.encode())
            h.update(np.asarray(p.data.shape, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def round_to_float32(self) -> None:
        for p in self._params.values():
            p.data = p.data.astype(np.float32).astype(np.float64)


def checkpoint_bytes(params: ParamStore) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        shape = p.data.shape
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def parse_checkpoint(buf: bytes) -> ParamStore:
    view = memoryview(buf)
    if bytes(view[:4]) != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        store = ParamStore()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            if pos + 4 * size > len(view):
                raise OSError(f"checkpoint truncated inside tensor {name!r}")
            data = np.frombuffer(view, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            store.add(name, data.astype(np.float64))
    except struct.error as exc:
        raise OSError(f"checkpoint truncated: {exc}") from exc
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return store


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
