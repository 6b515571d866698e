"""Audio side of the pipeline: WAV/feature IO, a log-mel frontend, resampling
to the motion frame rate and the learned 64-d projection.

Framing convention for :func:`filterbank_features`: windows start at sample
0 and advance by ``hop``; only windows lying fully inside the signal are kept
(no padding), so ``T_a = 1 + (N - win) // hop``. One second at 16 kHz with
25 ms / 20 ms gives 49 frames.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, ParamStore, Tensor, linear

EMBED_DIM = 64
LOG_FLOOR = 1e-10
FTR_MAGIC = b"FTR1"
FTR_VERSION = 1


class AudioFormatError(ValueError):
    pass


class AudioLengthError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioFormatError("waveform must be a non-empty mono signal")
        if self.sample_rate <= 0:
            raise AudioFormatError("sample rate must be positive")
        if np.max(np.abs(self.samples)) > 1.0:
            raise AudioFormatError("samples must lie in [-1, 1]")


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise AudioFormatError("feature sequence needs at least one frame (T_a x D_a)")
        if not np.all(np.isfinite(self.frames)):
            raise AudioFormatError("feature values must be finite")

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class AudioEmbedding:
    frames: Tensor
    fps: float = 30.0

    def __len__(self):
        return self.frames.shape[0]


# WAV ---------------------------------------------------------------------------
def load_waveform(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise AudioFormatError(f"{path}: expected mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2 or wf.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: only PCM16 WAV is supported")
            n = wf.getnframes()
            raw = wf.readframes(n)
            rate = wf.getframerate()
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise OSError(f"{path}: truncated WAV header") from exc
    if len(raw) != 2 * n:
        raise OSError(f"{path}: truncated, header promises {n} samples, found {len(raw) // 2}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def save_waveform(w: Waveform, path) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(w.sample_rate))
        wf.writeframes(pcm.tobytes())


# filterbank ----------------------------------------------------------------------
def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, sample_rate: int) -> np.ndarray:
    """``n_mels + 2`` band edge frequencies (Hz), evenly spaced on the mel scale."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))


def mel_filters(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    edges = mel_band_edges(n_mels, sample_rate)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_mels, freqs.size))
    for k in range(n_mels):
        lo, mid, hi = edges[k], edges[k + 1], edges[k + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[k] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def filterbank_features(w: Waveform, n_mels: int = 40, win: float = 0.025, hop: float = 0.020) -> FeatureSequence:
    """Log triangular-mel energies of Hann-windowed magnitude spectra at ``1/hop`` Hz.

    Windows start at multiples of the hop and must fit entirely inside the
    signal (no padding), so there are ``1 + (N - win) // hop`` frames: one
    second at 16 kHz gives 49.
    """
    sr = w.sample_rate
    win_n = int(round(win * sr))
    hop_n = int(round(hop * sr))
    n = w.samples.size
    if n < win_n:
        raise AudioLengthError(f"waveform has {n} samples, shorter than one {win_n}-sample window")
    n_frames = 1 + (n - win_n) // hop_n
    n_fft = 1 << (win_n - 1).bit_length()
    starts = np.arange(n_frames) * hop_n
    frames = w.samples[starts[:, None] + np.arange(win_n)[None, :]] * np.hanning(win_n)
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    energy = mag @ mel_filters(n_mels, n_fft, sr).T
    return FeatureSequence(np.log(np.maximum(energy, LOG_FLOOR)), 1.0 / hop)


# resampling -------------------------------------------------------------------------
def resample_positions(src_len: int, target_len: int) -> np.ndarray:
    if target_len == 1:
        return np.zeros(1)
    return np.arange(target_len) * ((src_len - 1) / (target_len - 1))


def resample_linear(f, target_len: int) -> np.ndarray:
    """Linearly interpolate rows so the first/last output rows hit the first/last input rows."""
    frames = f.frames if isinstance(f, FeatureSequence) else np.asarray(f, dtype=np.float64)
    if target_len < 1:
        raise ValueError("target length must be >= 1")
    src_len = frames.shape[0]
    if target_len == src_len:
        return frames.copy()
    pos = resample_positions(src_len, target_len)
    lo = np.minimum(np.floor(pos).astype(np.int64), src_len - 1)
    hi = np.minimum(lo + 1, src_len - 1)
    frac = (pos - lo)[:, None]
    a = frames[lo]
    return a + (frames[hi] - a) * frac


# projection -------------------------------------------------------------------------------
def init_audio_params(params: ParamStore, audio_dim: int, rng) -> None:
    params.add_linear("audio.proj", audio_dim, EMBED_DIM, rng)


def project_audio(resampled, params: ParamStore, fps: float = 30.0) -> AudioEmbedding:
    W = params["audio.proj.W"]
    x = resampled if isinstance(resampled, Tensor) else Tensor.constant(np.asarray(resampled, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"audio features {x.shape} do not match projection {W.shape}")
    return AudioEmbedding(linear(x, W, params["audio.proj.b"]), fps)


def encode_audio(features: FeatureSequence, n_frames: int, params: ParamStore, fps: float = 30.0) -> AudioEmbedding:
    return project_audio(resample_linear(features, n_frames), params, fps)


# .ftr files -------------------------------------------------------------------------------
def feature_bytes(f: FeatureSequence) -> bytes:
    t, d = f.frames.shape
    header = FTR_MAGIC + struct.pack("<IIIf", FTR_VERSION, t, d, f.frame_rate)
    return header + np.ascontiguousarray(f.frames, dtype="<f4").tobytes()


def save_features(f: FeatureSequence, path) -> None:
    with open(path, "wb") as fh:
        fh.write(feature_bytes(f))


def parse_features(buf: bytes) -> FeatureSequence:
    if len(buf) < 20 or buf[:4] != FTR_MAGIC:
        raise AudioFormatError("not a feature file: bad magic")
    version, t, d, rate = struct.unpack_from("<IIIf", buf, 4)
    if version != FTR_VERSION:
        raise AudioFormatError(f"unsupported feature file version {version}")
    if t == 0 or d == 0:
        raise AudioFormatError("feature file declares an empty matrix")
    need = 20 + 4 * t * d
    if len(buf) < need:
        raise OSError(f"feature payload short: need {need} bytes, have {len(buf)}")
    if len(buf) > need:
        raise AudioFormatError("trailing bytes after feature payload")
    data = np.frombuffer(buf, dtype="<f4", count=t * d, offset=20).reshape(t, d)
    return FeatureSequence(data.astype(np.float64), float(rate))


def load_features(path) -> FeatureSequence:
    with open(path, "rb") as fh:
        return parse_features(fh.read())
