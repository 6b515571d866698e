"""Hot numerical kernels: compiled Cython core with a NumPy fallback.

The compiled extension is used when it was built (``pip install -e .``).
Callers must go through this module's attributes (``kernels.attention_forward``)
so that :func:`set_backend` takes effect everywhere.
"""
from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_NAMES = (
    "layer_norm_forward",
    "layer_norm_backward",
    "attention_forward",
    "attention_backward",
    "dtw_accumulate",
)

BACKEND = None


def available_backends() -> list:
    return ["python"] + (["cython"] if _ckernels is not None else [])


def set_backend(name: str) -> None:
    global BACKEND
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        impl = _ckernels
    elif name == "python":
        impl = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(impl, fn)
    BACKEND = name


set_backend("cython" if _ckernels is not None else "python")
