"""Impression control modules, the impression estimator, and synthesis.

Three variants share one control-module architecture and differ only in what
feeds the reference path:

* ``base`` - the encoded target utterance itself,
* ``sep``  - another utterance of the same speaker,
* ``rfg``  - standard Gaussian noise (no reference at all); the rate head is
  fine-tuned jointly.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import synthworld as sw
from .backbone import Backbone, Encoder, freeze, pool
from .errors import DataError, ShapeError, TrainingError, UsageError
from .nnet import (AdamW, Grl, Linear, Module, dropout_backward, dropout_forward,
                   mse_loss, stream)


class Variant(str, Enum):
    BASE = "base"
    SEP = "sep"
    RFG = "rfg"


@dataclass
class ControlConfig:
    proj_dim: int = 8
    noise_dim: int = 8
    dropout: float = 0.1
    lambda_adv: float = 3.0
    grl_lambda: float = 1.0
    steps: int = 600
    batch: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.0


@dataclass
class VieConfig:
    steps: int = 1500
    batch: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.0


class ControlModule(Module):
    def __init__(self, rng, in_dim=16, x_dim=16, proj_dim=8, dropout=0.1):
        self.proj_v = Linear(sw.N_VI, proj_dim, rng)
        self.proj_x = Linear(in_dim, proj_dim, rng)
        self.out = Linear(2 * proj_dim, x_dim, rng)
        self.dropout = dropout

    def forward(self, v, ref, training=False, rng=None):
        v = np.asarray(v, dtype=np.float64)
        ref = np.asarray(ref, dtype=np.float64)
        if v.shape[-1] != sw.N_VI:
            raise ShapeError(f"impression vector must have {sw.N_VI} entries, got {v.shape[-1]}")
        if ref.shape[-1] != self.proj_x.n_in:
            raise ShapeError(f"reference path expects dim {self.proj_x.n_in}, got {ref.shape[-1]}")
        u = sw.phi(v)
        hv = self.proj_v(u)
        dropped, mask = dropout_forward(ref, self.dropout, training, rng)
        hx = self.proj_x(dropped)
        cat = np.concatenate([hv, hx], axis=-1)
        return self.out(cat), (u, dropped, mask, hx, cat)

    def backward(self, cache, gx_prime, g_hx_extra=None):
        u, dropped, mask, hx, cat = cache
        gcat = self.out.backward(cat, gx_prime)
        k = self.proj_v.n_out
        self.proj_v.backward(u, gcat[..., :k])
        ghx = gcat[..., k:]
        if g_hx_extra is not None:
            ghx = ghx + g_hx_extra
        return dropout_backward(mask, self.proj_x.backward(dropped, ghx))

    def __call__(self, v, ref):
        return self.forward(v, ref)[0]


def cm_forward(cm: ControlModule, v, x_or_noise, training=False, rng=None) -> np.ndarray:
    return cm.forward(v, x_or_noise, training, rng)[0]


class AdvHead(Module):
    """Reversed-gradient regressor from the projected reference path to VI."""

    def __init__(self, rng, proj_dim=8, grl_lambda=1.0):
        self.grl = Grl(grl_lambda)
        self.lin = Linear(proj_dim, sw.N_VI, rng)

    def forward(self, hx):
        return self.lin(self.grl.forward(hx))

    def backward(self, hx, gpred):
        return self.grl.backward(self.lin.backward(hx, gpred))


class Vie(Module):
    """Encoder followed by a linear map to the 11 impression scales."""

    def __init__(self, encoder: Encoder, rng=None):
        self.encoder = encoder
        self.head = Linear(encoder.x_dim, sw.N_VI, rng)
        self.head.b[:] = 4.0

    def forward(self, pooled):
        x, c = self.encoder.forward(pooled)
        return self.head(x), (x, c)

    def backward(self, cache, gv):
        x, c = cache
        return self.encoder.backward(c, self.head.backward(x, gv))

    def predict(self, feats) -> np.ndarray:
        return self.forward(pool(feats))[0]

    def predict_pooled(self, pooled) -> np.ndarray:
        return self.forward(pooled)[0]

    __call__ = predict


def train_vie(corpus: sw.Corpus, labels: dict[int, np.ndarray], backbone: Backbone,
              cfg: VieConfig | None = None, seed: int = 0):
    """Fit the estimator on labelled training items; returns ``(vie, curve)``.

    The encoder starts from a copy of the backbone encoder, which is left
    untouched.
    """
    cfg = cfg or VieConfig()
    idx = np.array([i for i in corpus.train_indices if i in labels])
    if idx.size == 0:
        raise DataError("no labelled training items")
    pooled = np.stack([corpus.items[i].feats.mean(axis=0) for i in idx])
    target = np.stack([labels[i] for i in idx])
    vie = Vie(copy.deepcopy(backbone.encoder), stream(seed, "init", "vie"))
    vie.frozen = False
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = stream(seed, "sampling", "vie")
    curve = []
    for step in range(cfg.steps):
        pick = rng.choice(idx.size, size=min(cfg.batch, idx.size), replace=False)
        vie.zero_grad()
        pred, cache = vie.forward(pooled[pick])
        loss, g = mse_loss(pred, target[pick])
        if not np.isfinite(loss):
            raise TrainingError("estimator training diverged", step)
        vie.backward(cache, g)
        opt.step(vie.params(), vie.grads())
        if step % 50 == 0 or step == cfg.steps - 1:
            curve.append((step, loss))
    freeze(vie)
    return vie, curve


def vie_mse(vie: Vie, corpus: sw.Corpus, idx, labels=None) -> float:
    pooled = np.stack([corpus.items[i].feats.mean(axis=0) for i in idx])
    target = np.stack([corpus.items[i].spec.v_true if labels is None else labels[i] for i in idx])
    return float(np.mean((vie.predict_pooled(pooled) - target) ** 2))


@dataclass
class ControlledModel:
    """A fine-tuned variant: control module plus whatever it trained alongside."""

    variant: Variant
    cm: ControlModule
    adv: AdvHead | None = None
    rate_head: Linear | None = None
    log: list = field(default_factory=list)

    @property
    def trainable(self) -> list[str]:
        names = ["cm"]
        if self.adv is not None:
            names.append("adv")
        if self.rate_head is not None:
            names.append("rate_head")
        return names

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"cm.{k}": v.copy() for k, v in self.cm.params().items()}
        if self.adv is not None:
            out.update({f"adv.{k}": v.copy() for k, v in self.adv.params().items()})
        if self.rate_head is not None:
            out.update({f"rate_head.{k}": v.copy() for k, v in self.rate_head.params().items()})
        return out

    @classmethod
    def from_state(cls, variant, state: dict, cfg: ControlConfig | None = None):
        cfg = cfg or ControlConfig()
        variant = Variant(variant)
        in_dim = state["cm.proj_x.W"].shape[1]
        cm = ControlModule(None, in_dim, state["cm.out.W"].shape[0], state["cm.proj_v.W"].shape[0], cfg.dropout)
        cm.load_state_dict({k[3:]: v for k, v in state.items() if k.startswith("cm.")})
        adv = rate = None
        if "adv.lin.W" in state:
            adv = AdvHead(None, cm.proj_x.n_out, cfg.grl_lambda)
            adv.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("adv.")})
        if "rate_head.W" in state:
            rate = Linear(state["rate_head.W"].shape[1], 1)
            rate.load_state_dict({k[10:]: v for k, v in state.items() if k.startswith("rate_head.")})
        return cls(variant, cm, adv, rate)


def sample_sep_reference(corpus: sw.Corpus, target: int, rng) -> int:
    """Uniform draw of another utterance by the same speaker."""
    pool_ = corpus.by_speaker[corpus.items[target].speaker_id]
    if len(pool_) < 2:
        raise DataError(
            f"speaker {corpus.items[target].speaker_id} has a single utterance; "
            "separate-reference training needs at least two")
    k = int(rng.integers(0, len(pool_) - 1))
    choice = pool_[k]
    return pool_[-1] if choice == target else choice


def finetune(variant, backbone: Backbone, vie: Vie, corpus: sw.Corpus,
             cfg: ControlConfig | None = None, seed: int = 0) -> ControlledModel:
    """Train a control module against the frozen backbone.

    Targets come from the frozen estimator, never from oracle labels. Only
    the control module (plus adversarial head, plus a private copy of the
    rate head for ``rfg``) receives updates.
    """
    from .backbone import make_batch

    cfg = cfg or ControlConfig()
    variant = Variant(variant)
    train = np.array(corpus.train_indices)
    if variant is Variant.SEP:
        for s in corpus.train_speakers:
            if len(corpus.by_speaker[s]) < 2:
                raise DataError(f"speaker {s} has a single utterance; sep needs two")

    init = stream(seed, "init", "cm", variant.value)
    in_dim = cfg.noise_dim if variant is Variant.RFG else backbone.encoder.x_dim
    cm = ControlModule(init, in_dim, backbone.encoder.x_dim, cfg.proj_dim, cfg.dropout)
    adv = None if variant is Variant.RFG else AdvHead(init, cfg.proj_dim, cfg.grl_lambda)
    rate_head = copy.deepcopy(backbone.decoder.rate_head) if variant is Variant.RFG else None
    model = ControlledModel(variant, cm, adv, rate_head)

    # Frozen per-item quantities.
    pooled_all = np.stack([u.feats.mean(axis=0) for u in corpus.items])
    x_all = backbone.encoder(pooled_all)
    v_all = vie.predict_pooled(pooled_all)

    params = {}
    for name in model.trainable:
        mod = getattr(model, name)
        params.update({f"{name}.{k}": (p, g) for k, (p, g) in mod.named().items()})
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng_batch = stream(seed, "sampling", "finetune", variant.value)
    rng_ref = stream(seed, "sampling", "sep-ref", variant.value)
    rng_drop = stream(seed, "dropout", "finetune", variant.value)
    rng_noise = stream(seed, "noise", "finetune", variant.value)

    stl, dec = backbone.stl, backbone.decoder
    for step in range(cfg.steps + 1):
        idx = rng_batch.choice(train, size=min(cfg.batch, train.size), replace=False)
        batch = make_batch(corpus, idx)
        v = v_all[idx]
        if variant is Variant.BASE:
            ref_idx = idx
            ref = x_all[idx]
        elif variant is Variant.SEP:
            ref_idx = np.array([sample_sep_reference(corpus, int(i), rng_ref) for i in idx])
            ref = x_all[ref_idx]
        else:
            ref_idx = None
            ref = rng_noise.normal(0.0, 1.0, size=(idx.size, cfg.noise_dim))

        training = step < cfg.steps
        for _, g in params.values():
            g.fill(0.0)
        xp, c_cm = cm.forward(v, ref, training=True, rng=rng_drop)
        g_emb, c_stl = stl.forward(xp)
        y, c_dec = dec.forward(g_emb, batch.content, batch.seg)
        recon, gy = mse_loss(y, batch.frames)
        adv_loss = rate_loss = 0.0
        g_hx = None
        if adv is not None:
            hx = c_cm[3]
            pred = adv.forward(hx)
            adv_loss, gpred = mse_loss(pred, sw.phi(v_all[ref_idx]))
            if training:
                g_hx = adv.backward(hx, cfg.lambda_adv * gpred)
        if rate_head is not None:
            rpred = rate_head(g_emb)[:, 0]
            rate_loss, grate = mse_loss(rpred, batch.log_T)
        total = recon + cfg.lambda_adv * adv_loss + rate_loss
        if not np.isfinite(total):
            raise TrainingError(f"{variant.value} fine-tuning diverged", step)
        if step % 25 == 0 or step == cfg.steps:
            model.log.append((step, recon, adv_loss, rate_loss))
        if not training:
            break
        gg = _frozen_backward(dec, c_dec, gy)
        if rate_head is not None:
            gg = gg + rate_head.backward(g_emb, grate[:, None])
        gxp = _stl_input_grad(stl, c_stl, gg)
        cm.backward(c_cm, gxp, g_hx)
        opt.step({k: p for k, (p, _) in params.items()}, {k: g for k, (_, g) in params.items()})
    freeze(cm)
    return model


def _frozen_backward(dec, cache, gy):
    # Backprop through frozen decoder without touching its gradient buffers.
    from .nnet import tanh_backward
    inp, h, y, seg, B = cache
    gh = tanh_backward(y, gy) @ dec.l2.W
    ginp = tanh_backward(h, gh) @ dec.l1.W
    k = dec.rate_head.n_in
    gg = np.zeros((B, k))
    np.add.at(gg, seg, ginp[:, :k])
    return gg


def _stl_input_grad(bank, cache, gg):
    from .nnet import softmax_backward
    x, a = cache
    gs = softmax_backward(a, gg @ bank.values.T) / bank.temperature
    return gs @ bank.keys


def synthesize(model: ControlledModel, backbone: Backbone, world: sw.WorldParams,
               reference, v_target, content_seed: int, noise_rng=None) -> np.ndarray:
    """Render a feature sequence for ``v_target``.

    ``reference`` must be a feature sequence for base/sep and ``None`` for
    rfg, whose noise comes from ``noise_rng``.
    """
    if model.variant is Variant.RFG:
        if reference is not None:
            raise UsageError("reference-free variant does not accept a reference")
        if noise_rng is None:
            raise UsageError("reference-free synthesis needs a noise stream")
        ref = noise_rng.normal(0.0, 1.0, size=model.cm.proj_x.n_in)
    else:
        if reference is None:
            raise UsageError(f"{model.variant.value} synthesis requires a reference")
        ref = backbone.encode(reference)
    g = backbone.stl(model.cm(v_target, ref))
    rate = model.rate_head if model.rate_head is not None else backbone.decoder.rate_head
    T = int(min(max(round(float(np.exp(rate(g)[0]))), 1), 4 * world.T0))
    content = sw.content_frames(world, content_seed, T)
    return backbone.decode(g, content)


def path_vi_probe(model: ControlledModel, backbone: Backbone, vie: Vie, corpus: sw.Corpus,
                  seed: int = 0, steps: int = 400, lr: float = 1e-2) -> float:
    """Held-out MSE of a fresh linear VI regressor on the projected reference path.

    The regressor starts from the same initialisation for every model with
    the same seed, is trained on training speakers with the path frozen and
    dropout inactive, and is scored on held-out speakers.
    """
    if model.adv is None:
        raise UsageError("variant has no reference path")
    def features(idx):
        pooled = np.stack([corpus.items[i].feats.mean(axis=0) for i in idx])
        return model.cm.proj_x(backbone.encoder(pooled)), sw.phi(vie.predict_pooled(pooled))
    h_tr, y_tr = features(corpus.train_indices)
    h_te, y_te = features(corpus.heldout_indices)
    head = Linear(h_tr.shape[1], sw.N_VI, stream(seed, "init", "path-probe"))
    opt = AdamW(lr=lr)
    for _ in range(steps):
        head.zero_grad()
        _, g = mse_loss(head(h_tr), y_tr)
        head.backward(h_tr, g)
        opt.step(head.params(), head.grads())
    return float(np.mean((head(h_te) - y_te) ** 2))


def synth_closure(model: ControlledModel, backbone: Backbone, world: sw.WorldParams,
                  seed: int, kind: str = "eval"):
    """Adapter to the ``synth(item, v, content_seed, trial)`` metric interface.

    Reference-free noise for a trial comes from its own stream keyed by
    ``(seed, kind, trial)``.
    """
    def synth(item, v_target, content_seed, trial):
        if model.variant is Variant.RFG:
            return synthesize(model, backbone, world, None, v_target, content_seed,
                              stream(seed, "eval-noise", kind, trial))
        return synthesize(model, backbone, world, item.feats, v_target, content_seed)
    return synth


def adv_head_mse(model: ControlledModel, backbone: Backbone, vie: Vie, corpus: sw.Corpus,
                 idx=None) -> float:
    """MSE (phi units) of the model's own adversarial head on the reference path.

    Evaluated with dropout inactive on ``idx`` (held-out items by default).
    """
    if model.adv is None:
        raise UsageError("variant has no adversarial head")
    idx = corpus.heldout_indices if idx is None else idx
    pooled = np.stack([corpus.items[i].feats.mean(axis=0) for i in idx])
    hx = model.cm.proj_x(backbone.encoder(pooled))
    return float(np.mean((model.adv.forward(hx) - sw.phi(vie.predict_pooled(pooled))) ** 2))
