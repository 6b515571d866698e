"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Also times one training step of the full model under each backend.
"""
import argparse
import timeit

import numpy as np

from talkstyle import kernels, oracle
from talkstyle.kernels import _pykernels
from talkstyle.model import ModelConfig, init_model
from talkstyle.optimization import TrainingSample, sample_loss
from talkstyle.supervision import LossWeights, gaussian_weights

try:
    from talkstyle.kernels import _ckernels
except ImportError:
    _ckernels = None


def kernel_cases(rng):
    T, H, d = 60, 4, 64
    q, k, v = (rng.normal(size=(T, H * d)) for _ in range(3))
    bias = np.triu(np.full((T, T), -np.inf), k=1)
    x = rng.normal(size=(T, 64))
    gamma, beta = rng.normal(size=64), rng.normal(size=64)
    g = rng.normal(size=(T, H * d))
    q1 = q[-1:]
    return {
        # autoregressive decoding queries one row at a time
        "attention_forward (1x60, 4 heads)": lambda m: m.attention_forward(q1, k, v, None, H, 0.125),
        "attention_forward (60x60, 4 heads)": lambda m: m.attention_forward(q, k, v, bias, H, 0.125),
        "attention_backward (60x60, 4 heads)": lambda m: m.attention_backward(
            g, q, k, v, m.attention_forward(q, k, v, bias, H, 0.125)[1], H, 0.125),
        "layer_norm_forward (60x64)": lambda m: m.layer_norm_forward(x, gamma, beta, 1e-5),
        "dtw_accumulate (90x90)": lambda m: m.dtw_accumulate(np.abs(rng.normal(size=(90, 90)))),
    }


def training_step():
    seq = oracle.speaker_sequence(oracle.gen_speaker(1), 0)
    params = init_model(ModelConfig(oracle.AUDIO_DIM, oracle.N_VERTICES), 0)
    cfg = ModelConfig(oracle.AUDIO_DIM, oracle.N_VERTICES)
    tmpl = seq.template
    T = seq.mesh.n_frames
    sample = TrainingSample("bench", seq.features, seq.mesh.frames - tmpl.vertices, gaussian_weights(seq.closure_frames, T),
                            0, tmpl.lip_region)

    def step():
        loss, _ = sample_loss(sample, params, cfg, LossWeights())
        params.zero_grad()
        loss.backward()

    return step


def best_of(fn, repeat):
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels is not None else [])
    if _ckernels is None:
        print("compiled extension not built; timing the fallback only")

    print(f"{'kernel':40s}" + "".join(f"{name:>12s}" for name, _ in impls) + ("     speedup" if len(impls) > 1 else ""))
    for label, fn in kernel_cases(np.random.default_rng(0)).items():
        times = [best_of(lambda m=m: fn(m), args.repeat) for _, m in impls]
        row = f"{label:40s}" + "".join(f"{t * 1e6:10.1f}us" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)

    step = training_step()
    times = []
    for name, _ in impls:
        kernels.set_backend(name)
        times.append(best_of(step, max(1, args.repeat // 2)))
    row = f"{'training step (forward + backward)':40s}" + "".join(f"{t * 1e3:10.1f}ms" for t in times)
    if len(times) > 1:
        row += f"{times[0] / times[1]:11.1f}x"
    print(row)


if __name__ == "__main__":
    main()
