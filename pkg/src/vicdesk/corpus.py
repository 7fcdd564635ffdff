"""Annotation analytics and label-propagation toolkit.

File formats (all tab-separated with a header row):

* annotations: ``item_id  annotator_id  scale  rating`` (blank rating = missing;
  scale is a letter A-K)
* rates: ``item_id  word_count  duration_s``
* descriptors: ``item_id  speaker_id  <numeric columns...>`` plus a JSON sidecar
  ``{"pitch": [start, stop], "energy": [...], "embedding": [...]}`` giving
  half-open spans over the numeric columns.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, NumericError, ParseError, UsageError, ValidationError
from .synthworld import N_VI, VI_LABELS, VI_LETTERS

log = logging.getLogger(__name__)

SCALES = tuple(VI_LETTERS)


class UndefinedAgreement(DataError):
    pass


@dataclass
class AnnotationTable:
    items: list[str]
    annotators: list[str]
    scales: tuple[str, ...] = SCALES
    ratings: dict[tuple[str, str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        for key, r in self.ratings.items():
            if not 1 <= r <= 7:
                raise ValidationError(f"rating {r} for {key} outside [1, 7]")

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, str, float | None]]):
        items, annotators, ratings = [], [], {}
        for item, ann, scale, r in records:
            if item not in items:
                items.append(item)
            if ann not in annotators:
                annotators.append(ann)
            if r is not None:
                ratings[(item, ann, scale)] = float(r)
        return cls(items, annotators, SCALES, ratings)

    def matrix(self, scale: str) -> np.ndarray:
        """items x annotators ratings for one scale, NaN where missing."""
        m = np.full((len(self.items), len(self.annotators)), np.nan)
        ii = {it: k for k, it in enumerate(self.items)}
        aa = {a: k for k, a in enumerate(self.annotators)}
        for (item, ann, sc), r in self.ratings.items():
            if sc == scale:
                m[ii[item], aa[ann]] = r
        return m

    def has_scale(self, scale: str) -> bool:
        return any(sc == scale for (_, _, sc) in self.ratings)


def _coincidences(units: Sequence[Sequence[float]]):
    """Coincidence matrix over the distinct values of pairable units."""
    pairable = [u for u in units if len(u) >= 2]
    values = sorted({v for u in pairable for v in u})
    pos = {v: k for k, v in enumerate(values)}
    o = np.zeros((len(values), len(values)))
    for u in pairable:
        counts = Counter(u)
        m = len(u)
        for c, nc in counts.items():
            for k, nk in counts.items():
                pairs = nc * (nk - 1) if c == k else nc * nk
                o[pos[c], pos[k]] += pairs / (m - 1)
    return np.array(values), o


def alpha_from_units(units: Sequence[Sequence[float]], metric: str = "interval") -> float:
    if metric != "interval":
        raise UsageError(f"unsupported metric {metric!r}")
    values, o = _coincidences(units)
    if o.sum() == 0:
        raise UndefinedAgreement("no unit carries two or more ratings")
    delta = (values[:, None] - values[None, :]) ** 2
    n_c = o.sum(axis=1)
    n = n_c.sum()
    d_o = float((o * delta).sum() / n)
    d_e = float((np.outer(n_c, n_c) * delta).sum() / (n * (n - 1)))
    if d_e == 0:
        raise UndefinedAgreement("all pairable ratings are identical; expected disagreement is zero")
    return 1.0 - d_o / d_e


def krippendorff_alpha(table: AnnotationTable, scale: str, metric: str = "interval") -> float:
    """Interval Krippendorff's alpha for one scale (coincidence-matrix form)."""
    if len(table.annotators) < 2:
        raise UndefinedAgreement("agreement needs at least two annotators")
    m = table.matrix(scale)
    units = [row[~np.isnan(row)].tolist() for row in m]
    return alpha_from_units(units, metric)


def alpha_table(table: AnnotationTable) -> dict[str, float | None]:
    """Alpha per scale; None where the scale is absent or agreement undefined."""
    out = {}
    for sc in table.scales:
        if not table.has_scale(sc):
            out[sc] = None
            continue
        try:
            out[sc] = krippendorff_alpha(table, sc)
        except UndefinedAgreement:
            out[sc] = None
    return out


def item_means(table: AnnotationTable) -> np.ndarray:
    cols = []
    for sc in table.scales:
        m = table.matrix(sc)
        present = ~np.isnan(m)
        if not present.any(axis=1).all():
            missing = [table.items[i] for i in np.flatnonzero(~present.any(axis=1))]
            raise DataError(f"scale {sc}: no ratings for items {missing[:5]}")
        cols.append(np.nanmean(m, axis=1))
    return np.column_stack(cols)


def correlation_matrix(table: AnnotationTable) -> np.ndarray:
    """Pearson correlation between per-item mean ratings of each scale pair.

    Rows/columns of zero-variance scales are NaN (undefined), including their
    diagonal entry.
    """
    means = item_means(table)
    centered = means - means.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    k = means.shape[1]
    r = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(i, k):
            if norms[i] == 0 or norms[j] == 0:
                continue
            if i == j:
                r[i, i] = 1.0
                continue
            v = float(centered[:, i] @ centered[:, j] / (norms[i] * norms[j]))
            r[i, j] = r[j, i] = min(1.0, max(-1.0, v))
    return r


# --- Slow-Fast --------------------------------------------------------------

@dataclass(frozen=True)
class RateRecord:
    item_id: str
    word_count: int
    duration: float

    def __post_init__(self):
        if self.duration <= 0:
            raise ValidationError(f"{self.item_id}: duration must be positive")
        if self.word_count < 0:
            raise ValidationError(f"{self.item_id}: negative word count")


def slow_fast_scale(records: Sequence[RateRecord]) -> dict[str, float]:
    """Min-max map of words per second onto [1, 7] across the dataset."""
    if len(records) < 2:
        raise DataError("Slow-Fast rescaling needs at least two items")
    rates = np.array([r.word_count / r.duration for r in records])
    lo, hi = rates.min(), rates.max()
    if hi == lo:
        raise DataError("degenerate range: every item has the same speaking rate")
    vals = 1.0 + 6.0 * (rates - lo) / (hi - lo)
    out = {r.item_id: float(v) for r, v in zip(records, vals)}
    out[records[int(np.argmin(rates))].item_id] = 1.0
    out[records[int(np.argmax(rates))].item_id] = 7.0
    return out


# --- similarity-based augmentation ------------------------------------------

@dataclass(frozen=True)
class UttDescriptor:
    item_id: str
    speaker_id: str
    pitch: np.ndarray
    energy: np.ndarray
    embedding: np.ndarray


@dataclass
class Selection:
    anchor_id: str
    ranked: list[tuple[str, float]]
    short_pool: bool = False
    skipped: list[str] = field(default_factory=list)

    @property
    def item_ids(self) -> list[str]:
        return [i for i, _ in self.ranked]


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    if sd == 0:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def similarity_scores(anchor: UttDescriptor, cands: Sequence[UttDescriptor],
                      weights=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Weighted mean of z-normalised pitch, energy and embedding similarities."""
    pitch = np.array([-np.abs(c.pitch - anchor.pitch).sum() for c in cands])
    energy = np.array([-np.abs(c.energy - anchor.energy).sum() for c in cands])
    na = np.linalg.norm(anchor.embedding)
    emb = np.array([c.embedding @ anchor.embedding / (np.linalg.norm(c.embedding) * na) for c in cands])
    w = np.asarray(weights, dtype=np.float64)
    stacked = np.stack([_zscore(pitch), _zscore(energy), _zscore(emb)])
    return (w[:, None] * stacked).sum(axis=0) / w.sum()


def similarity_select(anchor: UttDescriptor, pool: Sequence[UttDescriptor], k: int = 100,
                      weights=(1.0, 1.0, 1.0)) -> Selection:
    """Top-k utterances of the anchor's speaker by averaged similarity.

    Candidates from other speakers are ignored. Candidates with a zero-norm
    embedding are skipped with a warning. Ties break by item id.
    """
    if np.linalg.norm(anchor.embedding) == 0:
        raise NumericError(f"anchor {anchor.item_id} has a zero-norm embedding")
    same = [c for c in pool if c.speaker_id == anchor.speaker_id]
    shapes = {(c.pitch.shape, c.energy.shape, c.embedding.shape) for c in same}
    shapes.add((anchor.pitch.shape, anchor.energy.shape, anchor.embedding.shape))
    if len(shapes) > 1:
        raise DataError("descriptor vectors differ in length across the pool")
    skipped = [c.item_id for c in same if np.linalg.norm(c.embedding) == 0]
    for s in skipped:
        log.warning("skipping %s: zero-norm embedding", s)
    cands = [c for c in same if np.linalg.norm(c.embedding) != 0]
    short = len(cands) < k
    if not cands or k <= 0:
        return Selection(anchor.item_id, [], short, skipped)
    scores = similarity_scores(anchor, cands, weights)
    order = sorted(range(len(cands)), key=lambda i: (-scores[i], cands[i].item_id))
    ranked = [(cands[i].item_id, float(scores[i])) for i in order[:k]]
    return Selection(anchor.item_id, ranked, short, skipped)


@dataclass(frozen=True)
class LabeledItem:
    item_id: str
    label: tuple[float, ...]
    provenance: str


def propagate_labels(selection: Selection, anchor_label) -> list[LabeledItem]:
    """Copy the anchor's manual VI vector onto every selected item."""
    if anchor_label is None:
        raise UsageError(f"anchor {selection.anchor_id} has no manual label")
    label = tuple(float(x) for x in anchor_label)
    if len(label) != N_VI:
        raise UsageError(f"label must have {N_VI} entries")
    return [LabeledItem(i, label, selection.anchor_id) for i in selection.item_ids]


# --- file formats ------------------------------------------------------------

def _rows(path, expected: list[str]):
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file", 1, path)
    header = lines[0].split("\t")
    if header[:len(expected)] != expected:
        raise ParseError(f"expected header {expected}, got {header}", 1, path)
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        yield n, header, line.split("\t")


def read_annotations(path) -> AnnotationTable:
    recs = []
    for n, _, cells in _rows(path, ["item_id", "annotator_id", "scale", "rating"]):
        if len(cells) == 3:
            cells.append("")
        if len(cells) != 4:
            raise ParseError(f"expected 4 fields, got {len(cells)}", n, path)
        item, ann, scale, raw = (c.strip() for c in cells)
        if scale not in SCALES:
            raise ParseError(f"unknown scale {scale!r}", n, path)
        if raw == "":
            recs.append((item, ann, scale, None))
            continue
        try:
            r = float(raw)
        except ValueError:
            raise ParseError(f"rating {raw!r} is not a number", n, path) from None
        if not 1 <= r <= 7:
            raise ValidationError(f"{path}:{n}: rating {r} outside [1, 7]")
        recs.append((item, ann, scale, r))
    return AnnotationTable.from_records(recs)


def read_rates(path) -> list[RateRecord]:
    out = []
    for n, _, cells in _rows(path, ["item_id", "word_count", "duration_s"]):
        if len(cells) != 3:
            raise ParseError(f"expected 3 fields, got {len(cells)}", n, path)
        try:
            wc, dur = int(cells[1]), float(cells[2])
        except ValueError:
            raise ParseError("word_count must be an integer and duration_s a number", n, path) from None
        try:
            out.append(RateRecord(cells[0].strip(), wc, dur))
        except ValidationError as e:
            raise ValidationError(f"{path}:{n}: {e}") from None
    return out


def read_descriptors(path, sidecar=None) -> list[UttDescriptor]:
    path = Path(path)
    sidecar = Path(sidecar) if sidecar else path.with_suffix(path.suffix + ".json")
    spans = json.loads(sidecar.read_text())
    for key in ("pitch", "energy", "embedding"):
        if key not in spans:
            raise ParseError(f"sidecar lacks span for {key!r}", None, sidecar)
    out = []
    for n, _, cells in _rows(path, ["item_id", "speaker_id"]):
        try:
            nums = np.array([float(c) for c in cells[2:]])
        except ValueError:
            raise ParseError("non-numeric descriptor column", n, path) from None
        vec = {}
        for key in ("pitch", "energy", "embedding"):
            a, b = spans[key]
            if b > nums.size:
                raise ParseError(f"{key} span {a}:{b} exceeds {nums.size} columns", n, path)
            vec[key] = nums[a:b]
        out.append(UttDescriptor(cells[0].strip(), cells[1].strip(), **vec))
    return out


def _header(meta: dict | None) -> str:
    return "".join(f"# {k}: {meta[k]}\n" for k in sorted(meta or {}))


def _num(x) -> str:
    return "-" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def alpha_csv(alphas: dict[str, float | None], meta: dict | None = None) -> str:
    buf = io.StringIO()
    buf.write(_header(meta))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scale", "label", "alpha"])
    defined = []
    for k, sc in enumerate(SCALES):
        a = alphas.get(sc)
        w.writerow([sc, VI_LABELS[k], _num(a)])
        if a is not None:
            defined.append(a)
    w.writerow(["AVERAGE", "average", _num(float(np.mean(defined)) if defined else None)])
    return buf.getvalue()


def correlation_csv(r: np.ndarray, meta: dict | None = None) -> str:
    buf = io.StringIO()
    buf.write(_header(meta))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(SCALES))
    for i, sc in enumerate(SCALES):
        w.writerow([sc] + [_num(x) for x in r[i]])
    return buf.getvalue()


def speed_csv(values: dict[str, float], meta: dict | None = None) -> str:
    buf = io.StringIO()
    buf.write(_header(meta))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["item_id", "slow_fast"])
    for item in sorted(values):
        w.writerow([item, _num(values[item])])
    return buf.getvalue()


def label_manifest_csv(labeled: Sequence[LabeledItem], flags: dict | None = None,
                       meta: dict | None = None) -> str:
    buf = io.StringIO()
    m = dict(meta or {})
    m.update(flags or {})
    buf.write(_header(m))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["item_id", "provenance"] + list(SCALES))
    for li in labeled:
        w.writerow([li.item_id, li.provenance] + [_num(x) for x in li.label])
    return buf.getvalue()
