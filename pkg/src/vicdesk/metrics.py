"""Controllability and leakage metrics.

All squared errors are averaged over the 11 impression dimensions and then
over trials (``MSE_CONVENTION``). Synthesis is injected as a closure

    synth(item, v_target, content_seed, trial) -> feature sequence

so the metrics never see model internals. ``trial`` is a stable integer for
the condition being evaluated; closures that need randomness derive their
stream from it, which keeps results independent of evaluation order.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import synthworld as sw
from .backbone import pool
from .errors import DataError, NumericError, ReportError, UsageError
from .nnet import AdamW, Linear, Module, mse_loss, stream, tanh_backward

MSE_CONVENTION = "mean over 11 VI dimensions, then mean over trials"
OFFSETS = tuple(range(-3, 4))


@dataclass(frozen=True)
class EvalItem:
    key: str
    speaker_id: int
    feats: np.ndarray
    content_seed: int


def eval_items(corpus: sw.Corpus, idx) -> list[EvalItem]:
    out = []
    for i in idx:
        u = corpus.items[i]
        out.append(EvalItem(f"s{u.spec.speaker_id}_u{u.spec.utterance_id}", u.speaker_id,
                            u.feats, u.spec.content_seed))
    return out


def _per_trial_sq(vie, synth, items, targets, trial_base=0):
    errs = []
    for t, (item, v) in enumerate(zip(items, targets)):
        out = synth(item, v, item.content_seed, trial_base + t)
        errs.append(np.mean((np.asarray(v) - vie(out)) ** 2))
    return np.array(errs)


def vi_mse(vie: Callable, synth: Callable, items: Sequence[EvalItem]) -> float:
    """Control error when each reference is asked for its own estimated VI."""
    if not items:
        raise UsageError("empty evaluation set")
    targets = [vie(it.feats) for it in items]
    return float(np.mean(_per_trial_sq(vie, synth, items, targets)))


def cross_speaker_pairing(items: Sequence[EvalItem], seed: int) -> np.ndarray:
    """Random permutation ``p`` with ``speaker(items[p[i]]) != speaker(items[i])``.

    Built by a random derangement over speakers and a random matching between
    each speaker and its image, so every utterance is used as a target
    source exactly once when speaker groups are equal in size. Unequal
    groups fall back to independent draws from other speakers.
    """
    spk = np.array([it.speaker_id for it in items])
    speakers = sorted(set(spk.tolist()))
    if len(speakers) < 2:
        raise DataError("cross-speaker pairing needs at least two speakers")
    rng = stream(seed, "pairing")
    groups = {s: np.flatnonzero(spk == s) for s in speakers}
    sizes = {len(g) for g in groups.values()}
    out = np.empty(len(items), dtype=int)
    if len(sizes) == 1:
        while True:
            perm = rng.permutation(len(speakers))
            if all(perm[i] != i for i in range(len(speakers))):
                break
        for i, s in enumerate(speakers):
            src = groups[s]
            dst = groups[speakers[perm[i]]]
            out[src] = rng.permutation(dst)
    else:
        for i in range(len(items)):
            others = np.flatnonzero(spk != spk[i])
            out[i] = others[rng.integers(0, others.size)]
    return out


def rvi_mse(vie: Callable, synth: Callable, items: Sequence[EvalItem], pairing_seed: int = 0,
            pairing: Sequence[int] | None = None) -> float:
    """Control error when each reference is asked for another speaker's VI."""
    if not items:
        raise UsageError("empty evaluation set")
    if pairing is None:
        pairing = cross_speaker_pairing(items, pairing_seed)
    targets = [vie(items[j].feats) for j in pairing]
    return float(np.mean(_per_trial_sq(vie, synth, items, targets)))


def leakage_gap(vi: float, rvi: float) -> float:
    if not (math.isfinite(vi) and math.isfinite(rvi)):
        raise NumericError("leakage gap of non-finite metrics")
    return rvi - vi


@dataclass
class LeakageReport:
    variant: str
    vi_mse: float
    rvi_mse: float
    delta_v: float
    n_trials: int
    seed: int

    @classmethod
    def compute(cls, variant, vi, rvi, n_trials, seed):
        return cls(variant, vi, rvi, leakage_gap(vi, rvi), n_trials, seed)


# --- modulation -------------------------------------------------------------

def ols(x, y) -> tuple[float, float]:
    """Least-squares slope and intercept of ``y`` on ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise NumericError("slope undefined: targets have no spread")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    return slope, float(ym - slope * xm)


@dataclass
class SlopeTable:
    slopes: np.ndarray
    intercepts: np.ndarray
    n_points: int

    @property
    def average(self) -> float:
        return float(np.mean(self.slopes))

    def rows(self):
        for d in range(sw.N_VI):
            yield sw.VI_LETTERS[d], sw.VI_LABELS[d], float(self.slopes[d]), float(self.intercepts[d])


def modulation_experiment(vie: Callable, synth: Callable, anchors: Sequence[EvalItem],
                          offsets: Sequence[float] = OFFSETS, n_sentences: int = 5,
                          seed: int = 0, anchor_vi: Sequence | None = None,
                          record: list | None = None) -> SlopeTable:
    """Sweep each VI dimension of an anchor vector and fit predicted vs commanded.

    The anchor is the estimator's reading of each anchor item unless
    ``anchor_vi`` supplies explicit vectors. Commanded targets are clipped to
    [1, 7] before synthesis, while the regression uses the unclipped
    ``anchor + offset``. If ``record`` is a list, one
    ``(dim, anchor_key, offset, sentence, commanded, predicted)`` tuple is
    appended per synthesis.
    """
    if n_sentences < 2:
        raise UsageError("modulation needs at least two sentences per condition")
    if not anchors:
        raise UsageError("no anchor items")
    srng = stream(seed, "sentences")
    sentence_seeds = [int(s) for s in srng.integers(0, 2**31 - 1, size=n_sentences)]
    base = [np.asarray(a, dtype=np.float64) for a in anchor_vi] if anchor_vi is not None \
        else [vie(a.feats) for a in anchors]
    slopes, inters = np.zeros(sw.N_VI), np.zeros(sw.N_VI)
    n = 0
    for d in range(sw.N_VI):
        xs, ys = [], []
        for a, (item, anchor) in enumerate(zip(anchors, base)):
            for k, o in enumerate(offsets):
                commanded = anchor.copy()
                commanded[d] += o
                target = np.clip(commanded, 1.0, 7.0)
                for j, cs in enumerate(sentence_seeds):
                    trial = ((d * len(anchors) + a) * len(offsets) + k) * n_sentences + j
                    out = synth(item, target, cs, trial)
                    pred = vie(out)[d]
                    xs.append(commanded[d])
                    ys.append(pred)
                    if record is not None:
                        record.append((d, item.key, o, j, float(commanded[d]), float(pred)))
        slopes[d], inters[d] = ols(xs, ys)
        n = len(xs)
    return SlopeTable(slopes, inters, n)


# --- speaker similarity -----------------------------------------------------

class SpeakerProbe(Module):
    """Two-layer MLP regressing the speaker latent from mean-pooled frames."""

    def __init__(self, rng, hidden=32):
        self.l1 = Linear(sw.FEAT_DIM, hidden, rng)
        self.l2 = Linear(hidden, sw.ID_DIM, rng)

    def forward(self, pooled):
        h = np.tanh(self.l1(pooled))
        return self.l2(h), (pooled, h)

    def backward(self, cache, gz):
        pooled, h = cache
        return self.l1.backward(pooled, tanh_backward(h, self.l2.backward(h, gz)))

    def embed(self, feats) -> np.ndarray:
        return self.forward(pool(feats))[0]


def train_probe(corpus: sw.Corpus, seed: int = 0, steps: int = 1500, batch: int = 64,
                lr: float = 3e-3) -> SpeakerProbe:
    idx = np.array(corpus.train_indices)
    pooled = np.stack([corpus.items[i].feats.mean(axis=0) for i in idx])
    z = np.stack([sw.speaker(corpus.world, corpus.items[i].speaker_id).z_id for i in idx])
    probe = SpeakerProbe(stream(seed, "init", "speaker-probe"))
    opt = AdamW(lr=lr)
    rng = stream(seed, "sampling", "speaker-probe")
    for _ in range(steps):
        pick = rng.choice(idx.size, size=min(batch, idx.size), replace=False)
        probe.zero_grad()
        pred, cache = probe.forward(pooled[pick])
        _, g = mse_loss(pred, z[pick])
        probe.backward(cache, g)
        opt.step(probe.params(), probe.grads())
    probe.frozen = True
    return probe


def cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("cosine similarity of a zero-norm embedding")
    return float(np.dot(a, b) / (na * nb))


def secs(probe: SpeakerProbe, a, b) -> float:
    return cosine(probe.embed(a), probe.embed(b))


def mean_secs(probe: SpeakerProbe, synth: Callable, vie: Callable,
              items: Sequence[EvalItem]) -> float:
    """Mean similarity between each reference and its own-VI resynthesis."""
    vals = []
    for t, item in enumerate(items):
        out = synth(item, vie(item.feats), item.content_seed, t)
        vals.append(secs(probe, item.feats, out))
    return float(np.mean(vals))


# --- reports ----------------------------------------------------------------

@dataclass
class ReportRow:
    variant: str
    vi_mse: float
    rvi_mse: float
    delta_v: float
    secs: float
    slope_avg: float
    seed: int
    n_trials: int


REPORT_COLUMNS = [f.name for f in fields(ReportRow)]
VARIANTS = ("base", "sep", "rfg")


@dataclass
class RunReport:
    rows: list[ReportRow]
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k in sorted(self.meta):
            buf.write(f"# {k}: {self.meta[k]}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.variant, _fmt(r.vi_mse), _fmt(r.rvi_mse), _fmt(r.delta_v),
                        _fmt(r.secs), _fmt(r.slope_avg), r.seed, r.n_trials])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RunReport":
        meta, body = {}, []
        for line in text.splitlines():
            if line.startswith("# "):
                k, _, v = line[2:].partition(": ")
                meta[k] = v
            elif line:
                body.append(line)
        reader = csv.DictReader(body)
        if reader.fieldnames != REPORT_COLUMNS:
            raise ReportError(f"unexpected report columns: {reader.fieldnames}")
        rows = [ReportRow(r["variant"], float(r["vi_mse"]), float(r["rvi_mse"]),
                          float(r["delta_v"]), float(r["secs"]), float(r["slope_avg"]),
                          int(r["seed"]), int(r["n_trials"])) for r in reader]
        return cls(rows, meta)


def _fmt(x: float) -> str:
    return repr(float(x))


def build_report(leakage: dict[str, LeakageReport], secs_by_variant: dict[str, float],
                 slopes: dict[str, SlopeTable], variants=VARIANTS, meta: dict | None = None) -> RunReport:
    rows = []
    for v in variants:
        if v not in leakage or v not in secs_by_variant or v not in slopes:
            raise ReportError(f"missing metrics for variant {v!r}")
        lk = leakage[v]
        rows.append(ReportRow(v, lk.vi_mse, lk.rvi_mse, lk.rvi_mse - lk.vi_mse,
                              secs_by_variant[v], slopes[v].average, lk.seed, lk.n_trials))
    m = {"mse_convention": MSE_CONVENTION}
    m.update(meta or {})
    return RunReport(rows, m)


def slope_csv(slopes: dict[str, SlopeTable], meta: dict | None = None) -> str:
    buf = io.StringIO()
    for k in sorted(meta or {}):
        buf.write(f"# {k}: {meta[k]}\n")
    w = csv.writer(buf, lineterminator="\n")
    names = list(slopes)
    w.writerow(["dim", "label"] + names)
    for d in range(sw.N_VI):
        w.writerow([sw.VI_LETTERS[d], sw.VI_LABELS[d]] + [_fmt(slopes[n].slopes[d]) for n in names])
    w.writerow(["Avg", "average"] + [_fmt(slopes[n].average) for n in names])
    return buf.getvalue()
