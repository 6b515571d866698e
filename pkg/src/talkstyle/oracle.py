"""Procedural multi-speaker articulatory corpus with known ground truth.

Geometry: a 42-vertex face in millimetres (x to the speaker's left, y up,
z forward) with five upper/lower lip pairs and two mouth corners.

Motion: four articulatory channels (jaw-open, lip-round, lip-press, smile),
each a fixed per-vertex displacement field. Every phoneme sets a target
activation vector; the activation trajectory is a first-order exponential
lag (time constant ``tau``) of the targets, started at the first target so
that constant input gives a static mesh. Speaker gains scale the channels
and the asymmetry coefficient multiplies lip-vertex displacements by
``1 + a`` on the left and ``1 - a`` on the right.

Bilabials: the closure gesture (lip-press target, no jaw) occupies the
``CLOSURE_FRAMES`` frames right before the acoustic onset, so the lips close
before the consonant is heard; the acoustic segment itself carries a small
release pose. The press target overshoots contact; a smooth contact model
(``0.5 * (g + sqrt(g^2 + 4c^2))`` applied to each lip pair's virtual gap)
keeps the lips from crossing and the closure frame a strict minimum of the
lip-distance curve. The construction-time closure frame of a bilabial with
onset ``s`` is therefore ``s - 1``.

Audio surrogate: 40 features per frame at 50 Hz, four 10-way one-hot blocks
encoding the phoneme heard now and 1, 2, 3 motion frames ahead, plus small
seeded Gaussian noise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import FeatureSequence, save_features
from .mesh import MeshSequence, TemplateMesh, save_msq, save_template
from .numerics import make_rng
from .supervision import Phone, PhonemeTiming, is_bilabial, save_timings

PHONEMES = ("a", "e", "i", "o", "u", "m", "b", "p", "s", "t")
VOWELS = ("a", "e", "i", "o", "u")
CONSONANTS = ("m", "b", "p", "s", "t")
CHANNELS = ("jaw", "round", "press", "smile")
FPS = 30.0
FEATURE_RATE = 50.0
LOOKAHEAD = (0, 1, 2, 3)
AUDIO_DIM = len(PHONEMES) * len(LOOKAHEAD)
CLOSURE_FRAMES = 3
DEFAULT_PHONE_FRAMES = 5
CONTACT_SOFTNESS = 0.1  # mm
FEATURE_NOISE = 0.05

# (jaw, round, press, smile) targets
TARGETS = {
    "a": (1.0, 0.0, 0.0, 0.1),
    "e": (0.6, 0.0, 0.0, 0.5),
    "i": (0.3, 0.0, 0.0, 1.0),
    "o": (0.7, 0.8, 0.0, 0.0),
    "u": (0.3, 1.0, 0.0, 0.0),
    "m": (0.10, 0.0, 0.0, 0.0),
    "b": (0.15, 0.0, 0.0, 0.0),
    "p": (0.20, 0.0, 0.0, 0.1),
    "s": (0.15, 0.0, 0.0, 0.4),
    "t": (0.20, 0.0, 0.0, 0.2),
}
CLOSURE_TARGET = (0.0, 0.0, 1.0, 0.0)

GAIN_RANGE = (0.5, 2.0)
ASYM_RANGE = (-0.5, 0.5)
TAU_RANGE = (0.030, 0.120)  # seconds


@dataclass(frozen=True)
class SyntheticSpeaker:
    seed: int
    gains: tuple  # jaw, round, press, smile
    asymmetry: float
    tau: float  # seconds

    def as_vector(self) -> np.ndarray:
        return np.array([*self.gains, self.asymmetry, self.tau])


def gen_speaker(seed: int) -> SyntheticSpeaker:
    rng = make_rng(seed)
    gains = tuple(float(g) for g in rng.uniform(*GAIN_RANGE, size=len(CHANNELS)))
    asym = float(rng.uniform(*ASYM_RANGE))
    tau = float(rng.uniform(*TAU_RANGE))
    return SyntheticSpeaker(int(seed), gains, asym, tau)


# geometry ------------------------------------------------------------------------------
def _build_face():
    pts, groups = [], {}

    def put(name, rows):
        groups[name] = list(range(len(pts), len(pts) + len(rows)))
        pts.extend(rows)

    lip_x = (-20.0, -10.0, 0.0, 10.0, 20.0)
    put("upper", [(x, 0.5, 10.0 - abs(x) * 0.15) for x in lip_x])
    put("lower", [(x, -0.5, 10.0 - abs(x) * 0.15) for x in lip_x])
    put("corners", [(-26.0, 0.0, 6.0), (26.0, 0.0, 6.0)])
    put("chin", [(x, y, 5.0 - abs(x) * 0.1) for y in (-20.0, -35.0) for x in (-30.0, -15.0, 0.0, 15.0, 30.0)])
    put("cheeks", [(x, y, -5.0) for y in (0.0, 15.0) for x in (-50.0, -40.0, 40.0, 50.0)])
    put("nose", [(0.0, 25.0, 20.0), (-8.0, 20.0, 15.0), (8.0, 20.0, 15.0), (0.0, 35.0, 18.0)])
    put("brow", [(x, y, 0.0) for y in (50.0, 70.0) for x in (-30.0, -10.0, 10.0, 30.0)])
    return np.array(pts), groups


FACE, GROUPS = _build_face()
N_VERTICES = FACE.shape[0]
LIP_UPPER = GROUPS["upper"]
LIP_LOWER = GROUPS["lower"]
LIP_REGION = sorted(GROUPS["upper"] + GROUPS["lower"] + GROUPS["corners"])


def _channel_fields() -> np.ndarray:
    F = np.zeros((len(CHANNELS), N_VERTICES, 3))
    x = FACE[:, 0]
    jaw, rnd, press, smile = F
    # jaw: lower lip and chin drop, corners follow partially
    jaw[GROUPS["lower"]] = (0.0, -8.0, 0.0)
    jaw[GROUPS["upper"]] = (0.0, -0.5, 0.0)
    jaw[GROUPS["corners"]] = (0.0, -3.0, -0.5)
    for i in GROUPS["chin"]:
        jaw[i] = (0.0, -9.0 if FACE[i, 1] < -30 else -8.5, -1.5)
    for i in GROUPS["cheeks"]:
        jaw[i] = (0.0, -1.5 if FACE[i, 1] == 0.0 else -0.5, 0.0)
    # round: lips pull to the midline and protrude
    for i in GROUPS["upper"] + GROUPS["lower"]:
        rnd[i] = (-0.35 * x[i], 0.0, 4.0)
    for i in GROUPS["corners"]:
        rnd[i] = (-0.3 * x[i], 0.0, 3.0)
    # press: virtual overshoot past contact (resolved by the contact model)
    press[GROUPS["upper"]] = (0.0, -35.0, -1.0)
    press[GROUPS["lower"]] = (0.0, 35.0, -1.0)
    press[GROUPS["corners"]] = (0.0, 0.0, -0.5)
    # smile: corners out and up, lips stretch, cheeks rise
    for i in GROUPS["corners"]:
        smile[i] = (np.sign(x[i]) * 6.0, 4.0, -2.0)
    for i in GROUPS["upper"] + GROUPS["lower"]:
        smile[i] = (0.15 * x[i], 1.0, -1.0)
    for i in GROUPS["cheeks"]:
        smile[i] = (np.sign(x[i]) * 1.0, 2.0, 0.5)
    return F


FIELDS = _channel_fields()


def _contact(gap):
    c = CONTACT_SOFTNESS
    return 0.5 * (gap + np.sqrt(gap * gap + 4.0 * c * c))


def _resolve_contact(pos: np.ndarray) -> np.ndarray:
    """Replace each lip pair's virtual vertical gap by the soft-contact gap."""
    out = pos.copy()
    up, lo = pos[..., LIP_UPPER, 1], pos[..., LIP_LOWER, 1]
    mid = 0.5 * (up + lo)
    gap = _contact(up - lo)
    out[..., LIP_UPPER, 1] = mid + 0.5 * gap
    out[..., LIP_LOWER, 1] = mid - 0.5 * gap
    return out


def template_mesh() -> TemplateMesh:
    return TemplateMesh(_resolve_contact(FACE), LIP_UPPER, LIP_LOWER, LIP_REGION)


def _skew(asymmetry: float) -> np.ndarray:
    s = np.ones(N_VERTICES)
    lips = np.asarray(LIP_REGION)
    side = np.sign(FACE[lips, 0])
    s[lips] = 1.0 + asymmetry * side
    return s


# sequences ----------------------------------------------------------------------------------
@dataclass
class SyntheticSequence:
    phonemes: list
    timings: PhonemeTiming
    mesh: MeshSequence  # positions
    features: FeatureSequence
    template: TemplateMesh
    closure_frames: list
    activations: np.ndarray  # T x 4


def _segments(phonemes, frames_per_phone):
    onsets = np.arange(len(phonemes)) * frames_per_phone
    return onsets, len(phonemes) * frames_per_phone


def articulatory_targets(phonemes, frames_per_phone: int) -> tuple:
    """Per-frame target activations (T x 4) and construction-time closure frames."""
    onsets, T = _segments(phonemes, frames_per_phone)
    targets = np.zeros((T, len(CHANNELS)))
    for ph, s in zip(phonemes, onsets):
        targets[s : s + frames_per_phone] = TARGETS[ph]
    closures = []
    for ph, s in zip(phonemes, onsets):
        if is_bilabial(ph):
            targets[max(0, s - CLOSURE_FRAMES) : s] = CLOSURE_TARGET
            closures.append(int(s) - 1)
    return targets, closures


def exponential_lag(targets: np.ndarray, tau: float, fps: float = FPS) -> np.ndarray:
    alpha = 1.0 - np.exp(-1.0 / (tau * fps))
    out = np.empty_like(targets)
    state = targets[0].copy()
    for t in range(targets.shape[0]):
        state = state + alpha * (targets[t] - state)
        out[t] = state
    return out


def pose_sequence(activations: np.ndarray, spk: SyntheticSpeaker) -> np.ndarray:
    """Vertex positions (T x V x 3) for an activation trajectory."""
    gains = np.asarray(spk.gains)
    disp = np.einsum("tc,cvk->tvk", activations * gains, FIELDS) * _skew(spk.asymmetry)[None, :, None]
    return _resolve_contact(FACE[None] + disp)


def audio_surrogate(phonemes, frames_per_phone: int, rng, fps: float = FPS) -> FeatureSequence:
    onsets, T = _segments(phonemes, frames_per_phone)
    n_feat = max(2, int(round((T - 1) * FEATURE_RATE / fps)) + 1)
    # feature frame j sits at motion-frame position j (T-1)/(n_feat-1): matches resample_linear
    pos = np.arange(n_feat) * ((T - 1) / (n_feat - 1))
    ids = np.array([PHONEMES.index(p) for p in phonemes])
    feats = np.zeros((n_feat, AUDIO_DIM))
    for block, ahead in enumerate(LOOKAHEAD):
        frame = np.minimum(np.floor(pos + ahead + 1e-9).astype(int), T - 1)
        phone_idx = ids[frame // frames_per_phone]
        feats[np.arange(n_feat), block * len(PHONEMES) + phone_idx] = 1.0
    feats += FEATURE_NOISE * rng.standard_normal(feats.shape)
    return FeatureSequence(feats, FEATURE_RATE)


def synth_sequence(spk: SyntheticSpeaker, phonemes, duration_per_phoneme: float = DEFAULT_PHONE_FRAMES / FPS,
                   noise_seed: int = 0) -> SyntheticSequence:
    phonemes = [str(p).lower() for p in phonemes]
    if not phonemes:
        raise ValueError("need at least one phoneme")
    unknown = sorted(set(phonemes) - set(PHONEMES))
    if unknown:
        raise ValueError(f"unknown phoneme labels {unknown}; alphabet is {PHONEMES}")
    if is_bilabial(phonemes[0]):
        raise ValueError("a bilabial needs a preceding phoneme to host its closure gesture")
    fpp = int(round(duration_per_phoneme * FPS))
    if fpp <= CLOSURE_FRAMES:
        raise ValueError(f"phones must last more than {CLOSURE_FRAMES} frames")
    targets, closures = articulatory_targets(phonemes, fpp)
    act = exponential_lag(targets, spk.tau)
    mesh = MeshSequence(pose_sequence(act, spk), FPS, False)
    onsets, _ = _segments(phonemes, fpp)
    timings = PhonemeTiming(Phone(p, s / FPS, (s + fpp) / FPS) for p, s in zip(phonemes, onsets))
    feats = audio_surrogate(phonemes, fpp, make_rng(noise_seed))
    return SyntheticSequence(phonemes, timings, mesh, feats, template_mesh(), closures, act)


def random_phonemes(rng, n_syllables: int) -> list:
    """Vowel-initial, vowel-final consonant/vowel alternation: V (C V)*."""
    out = [str(rng.choice(VOWELS))]
    for _ in range(n_syllables):
        out.append(str(rng.choice(CONSONANTS)))
        out.append(str(rng.choice(VOWELS)))
    return out


def speaker_sequence(spk: SyntheticSpeaker, index: int, corpus_seed: int = 0, min_syllables: int = 7,
                     max_syllables: int = 9) -> SyntheticSequence:
    """The ``index``-th sequence of a speaker (deterministic in speaker seed, index, corpus seed)."""
    rng = make_rng(hash_seed(corpus_seed, spk.seed, index))
    phones = random_phonemes(rng, int(rng.integers(min_syllables, max_syllables + 1)))
    return synth_sequence(spk, phones, noise_seed=int(rng.integers(2**63)))


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, np.uint32).view(np.uint64)[0])


# corpus export --------------------------------------------------------------------------------
def corpus_speakers(n_speakers: int, seed: int) -> list:
    return [gen_speaker(hash_seed(seed, 1000 + k)) for k in range(n_speakers)]


def split_plan(n_speakers: int, n_sequences: int, heldout: int | None = None) -> dict:
    """Split name per (speaker, sequence).

    The last ``heldout`` speakers (default ``n_speakers // 4``) are reserved
    for adaptation: their first ``n - 2`` sequences (at least one) are
    ``adapt`` references, the rest ``heldout_test``. Training speakers keep
    their last sequence for ``test`` and the one before it for ``val``.
    """
    if heldout is None:
        heldout = n_speakers // 4
    plan = {}
    for k in range(n_speakers):
        held = k >= n_speakers - heldout
        for i in range(n_sequences):
            if held:
                n_ref = max(1, n_sequences - 2)
                plan[(k, i)] = "adapt" if i < n_ref else "heldout_test"
            elif n_sequences >= 3 and i == n_sequences - 1:
                plan[(k, i)] = "test"
            elif n_sequences >= 3 and i == n_sequences - 2:
                plan[(k, i)] = "val"
            else:
                plan[(k, i)] = "train"
    return plan


def export_corpus(speakers: int, sequences_per: int, out_dir, seed: int = 0, heldout: int | None = None) -> Path:
    """Write the corpus files and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tmpl = template_mesh()
    save_template(tmpl, out / "template.msq")
    spks = corpus_speakers(speakers, seed)
    plan = split_plan(speakers, sequences_per, heldout)
    n_train_ids = sum(1 for k in range(speakers) if plan[(k, 0)] not in ("adapt", "heldout_test"))
    entries, speaker_rows = [], []
    for k, spk in enumerate(spks):
        training = k < n_train_ids
        speaker_rows.append({
            "name": f"spk{k:02d}",
            "seed": spk.seed,
            "identity": k if training else None,
            **{f"gain_{c}": g for c, g in zip(CHANNELS, spk.gains)},
            "asymmetry": spk.asymmetry,
            "tau": spk.tau,
        })
        for i in range(sequences_per):
            seq = speaker_sequence(spk, i, seed)
            stem = f"spk{k:02d}_seq{i:02d}"
            save_msq(seq.mesh, out / f"{stem}.msq")
            save_features(seq.features, out / f"{stem}.ftr")
            save_timings(seq.timings, out / f"{stem}.tim")
            entries.append({
                "id": stem,
                "speaker": f"spk{k:02d}",
                "identity": k if training else None,
                "split": plan[(k, i)],
                "mesh": f"{stem}.msq",
                "features": f"{stem}.ftr",
                "timings": f"{stem}.tim",
                "template": "template.msq",
                "closure_frames": seq.closure_frames,
                "n_frames": seq.mesh.n_frames,
            })
    manifest = {
        "format": "talkstyle-corpus",
        "version": 1,
        "seed": seed,
        "fps": FPS,
        "audio_dim": AUDIO_DIM,
        "n_vertices": N_VERTICES,
        "speakers": speaker_rows,
        "sequences": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path
