from __future__ import annotations

import numpy as np


class DeterminismError(RuntimeError):
    pass


def _scalar(out) -> float:
    return float(np.asarray(out.data if hasattr(out, "data") else out).reshape(()))


def finite_diff_check(f, params, h: float = 1e-5, names=None, max_entries=None, rng=None) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``f(params)`` must return a scalar Tensor. Error per entry is
    ``|analytic - numeric| / max(1, |numeric|)``. ``max_entries`` subsamples
    entries per parameter (with ``rng``) to bound cost on big tensors.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    if names is None:
        names = params.trainable()
    params.zero_grad()
    out = f(params)
    base = _scalar(out)
    out.backward()
    if _scalar(f(params)) != base:
        raise DeterminismError("objective returned different values for identical parameters")
    analytic = {n: (params[n].grad.copy() if params[n].grad is not None else np.zeros_like(params[n].data)) for n in names}
    params.zero_grad()

    worst = 0.0
    for n in names:
        p = params[n]
        flat_count = p.data.size
        idx = np.arange(flat_count)
        if max_entries is not None and flat_count > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat_count, size=max_entries, replace=False)
        orig = p.data.copy()
        for i in idx:
            bumped = orig.copy().reshape(-1)
            bumped[i] += h
            p.data = bumped.reshape(orig.shape)
            fp = _scalar(f(params))
            bumped[i] -= 2.0 * h
            p.data = bumped.reshape(orig.shape)
            fm = _scalar(f(params))
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[n].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        p.data = orig
    params.zero_grad()
    return worst
