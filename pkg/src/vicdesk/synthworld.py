"""Seeded synthetic voice world.

A fixed linear-then-tanh generator turns a speaker latent, an 11-dim
impression vector and a content sequence into feature frames. Because the
generator is known, every utterance carries its true impression vector, and
:func:`oracle_estimate` can read the impression back out of rendered frames
exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nnet import save_checkpoint, stream

N_VI = 11
FEAT_DIM = 32
ID_DIM = 8
CONTENT_DIM = 4
N_PHONES = 16
RATE_DIM = 10  # index of K) Slow-Fast
VI_LABELS = [
    "A) Low-High", "B) Masculine-Feminine", "C) Clear-Hoarse", "D) Calm-Restless",
    "E) Powerful-Weak", "F) Youthful-Aged", "G) Thick-Thin", "H) Firm-Relaxed",
    "I) Dark-Bright", "J) Cold-Warm", "K) Slow-Fast",
]
VI_LETTERS = "ABCDEFGHIJK"

# Target pre-tanh variance contributed by each source, per feature entry.
_ID_VAR = 0.04
_VI_VAR = 0.08
_CONTENT_VAR = 0.18


def phi(v):
    """Map the 1..7 perceptual scale onto roughly [-1, 1]."""
    return (np.asarray(v, dtype=np.float64) - 4.0) / 3.0


def phi_inv(u):
    return 4.0 + 3.0 * np.asarray(u, dtype=np.float64)


@dataclass
class WorldParams:
    seed: int
    W_id: np.ndarray
    W_v: np.ndarray
    W_c: np.ndarray
    phones: np.ndarray  # content embedding bank, N_PHONES x CONTENT_DIM
    T0: int = 20
    rate_coeff: float = 0.08
    expressive_sd: float = 0.5

    def __post_init__(self):
        for a in (self.W_id, self.W_v, self.W_c, self.phones):
            a.setflags(write=False)


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    z_id: np.ndarray
    base_vi: np.ndarray


@dataclass(frozen=True)
class UtteranceSpec:
    speaker_id: int
    utterance_id: int
    v_true: np.ndarray
    content_seed: int


@dataclass
class Utterance:
    spec: UtteranceSpec
    feats: np.ndarray  # T x FEAT_DIM

    @property
    def speaker_id(self):
        return self.spec.speaker_id

    @property
    def T(self):
        return self.feats.shape[0]


@dataclass
class Corpus:
    world: WorldParams
    items: list[Utterance]
    train_speakers: list[int]
    heldout_speakers: list[int]
    by_speaker: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.by_speaker = {}
        for i, u in enumerate(self.items):
            self.by_speaker.setdefault(u.speaker_id, []).append(i)

    def indices(self, speakers) -> list[int]:
        return [i for s in speakers for i in self.by_speaker.get(s, [])]

    @property
    def train_indices(self):
        return self.indices(self.train_speakers)

    @property
    def heldout_indices(self):
        return self.indices(self.heldout_speakers)


def new_world(seed: int, T0: int = 20, rate_coeff: float = 0.08,
              expressive_sd: float = 0.5) -> WorldParams:
    rng = stream(seed, "world")
    # phi(base_vi) is uniform on [-0.5, 0.5] (variance 1/12) plus expressive spread
    vi_var = 1.0 / 12.0 + (expressive_sd / 3.0) ** 2
    W_id = rng.normal(0.0, math.sqrt(_ID_VAR / ID_DIM), size=(FEAT_DIM, ID_DIM))
    W_v = rng.normal(0.0, math.sqrt(_VI_VAR / (N_VI * vi_var)), size=(FEAT_DIM, N_VI))
    W_c = rng.normal(0.0, math.sqrt(_CONTENT_VAR / CONTENT_DIM), size=(FEAT_DIM, CONTENT_DIM))
    phones = rng.normal(0.0, 1.0, size=(N_PHONES, CONTENT_DIM))
    return WorldParams(seed, W_id, W_v, W_c, phones, T0, rate_coeff, expressive_sd)


def speaker(world: WorldParams, speaker_id: int) -> SpeakerProfile:
    rng = stream(world.seed, "speaker", speaker_id)
    z = rng.normal(0.0, 1.0, size=ID_DIM)
    base = rng.uniform(2.5, 5.5, size=N_VI)
    return SpeakerProfile(speaker_id, z, base)


def sample_utterance(world: WorldParams, speaker_id: int, utterance_id: int) -> UtteranceSpec:
    prof = speaker(world, speaker_id)
    rng = stream(world.seed, "utterance", speaker_id, utterance_id)
    noise = rng.normal(0.0, 1.0, size=N_VI) * world.expressive_sd
    v = np.clip(prof.base_vi + noise, 1.0, 7.0)
    content_seed = int(rng.integers(0, 2**31 - 1))
    return UtteranceSpec(speaker_id, utterance_id, v, content_seed)


def frame_count(world: WorldParams, v_rate: float) -> int:
    """Frames for a given Slow-Fast value; faster speech gives fewer frames."""
    return int(math.floor(world.T0 * (1.0 - world.rate_coeff * (v_rate - 4.0)) + 0.5))


def content_frames(world: WorldParams, content_seed: int, T: int) -> np.ndarray:
    """First ``T`` content embeddings of the sequence named by ``content_seed``.

    The phone sequence is a prefix-stable draw, so asking for more frames
    extends rather than reshuffles it.
    """
    rng = stream(world.seed, "content", content_seed)
    ids = rng.integers(0, N_PHONES, size=4 * world.T0 + 8)
    if T > ids.size:
        ids = np.resize(ids, T)
    return world.phones[ids[:T]]


def render_frames(world: WorldParams, z_id, v, content: np.ndarray) -> np.ndarray:
    glob = world.W_id @ np.asarray(z_id) + world.W_v @ phi(v)
    return np.tanh(glob[None, :] + content @ world.W_c.T)


def render(world: WorldParams, spec: UtteranceSpec) -> np.ndarray:
    prof = speaker(world, spec.speaker_id)
    T = frame_count(world, spec.v_true[RATE_DIM])
    return render_frames(world, prof.z_id, spec.v_true, content_frames(world, spec.content_seed, T))


def build_corpus(world: WorldParams, n_speakers: int = 50, n_utts_per_speaker: int = 20,
                 holdout_frac: float = 0.1) -> Corpus:
    if n_speakers < 1 or n_utts_per_speaker < 1:
        raise ValueError("corpus needs at least one speaker and one utterance")
    items = []
    for s in range(n_speakers):
        for u in range(n_utts_per_speaker):
            spec = sample_utterance(world, s, u)
            items.append(Utterance(spec, render(world, spec)))
    n_hold = int(round(n_speakers * holdout_frac))
    if n_speakers - n_hold < 1:
        n_hold = n_speakers - 1
    order = stream(world.seed, "holdout").permutation(n_speakers)
    held = sorted(int(s) for s in order[:n_hold])
    train = [s for s in range(n_speakers) if s not in set(held)]
    return Corpus(world, items, train, held)


def oracle_estimate(world: WorldParams, feats: np.ndarray) -> np.ndarray:
    """Recover the impression vector from rendered frames by least squares.

    The time-mean of ``arctanh(frames)`` is ``W_id z + W_v phi(v) + W_c cbar``;
    with 32 equations and 23 unknowns the solution is exact on noiseless
    renders. Frames outside (-1, 1) are clipped slightly inside first.
    """
    f = np.clip(np.asarray(feats, dtype=np.float64), -1 + 1e-12, 1 - 1e-12)
    pre = np.arctanh(f).mean(axis=0)
    A = np.hstack([world.W_id, world.W_v, world.W_c])
    sol, *_ = np.linalg.lstsq(A, pre, rcond=None)
    return phi_inv(sol[ID_DIM:ID_DIM + N_VI])


def feature_std(corpus: Corpus) -> float:
    return float(np.concatenate([u.feats for u in corpus.items]).std())


def export_corpus(corpus: Corpus, out_dir, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    arrays = {}
    for u in corpus.items:
        key = f"s{u.spec.speaker_id:04d}_u{u.spec.utterance_id:04d}"
        arrays[key] = u.feats
        rows.append({
            "key": key,
            "speaker_id": u.spec.speaker_id,
            "utterance_id": u.spec.utterance_id,
            "content_seed": u.spec.content_seed,
            "v_true": [round(float(x), 12) for x in u.spec.v_true],
            "T": u.T,
            "split": "heldout" if u.spec.speaker_id in corpus.heldout_speakers else "train",
        })
    save_checkpoint(out / "features.vick", arrays, meta)
    manifest = {"world_seed": corpus.world.seed, "items": rows}
    manifest.update(meta or {})
    path = out / "corpus.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path
