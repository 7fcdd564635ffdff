"""Trainable stand-in for the acoustic backbone and its speaker encoder.

Pipeline: mean-pooled features -> encoder MLP -> x -> style-token attention
-> g -> per-frame decoder conditioned on (g, content). A linear rate head
predicts the log frame count from g.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import synthworld as sw
from .errors import ShapeError, TrainingError, UsageError
from .nnet import (AdamW, Linear, Module, mse_loss, softmax, softmax_backward,
                   stream, tanh_backward)


@dataclass
class BackboneConfig:
    x_dim: int = 16
    enc_hidden: int = 32
    n_tokens: int = 8
    dec_hidden: int = 64
    steps: int = 2000
    batch: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.0
    rate_weight: float = 1.0


class Encoder(Module):
    """Pooling MLP: mean frame (32) -> tanh hidden -> x."""

    def __init__(self, rng, feat_dim=sw.FEAT_DIM, hidden=32, x_dim=16):
        self.l1 = Linear(feat_dim, hidden, rng)
        self.l2 = Linear(hidden, x_dim, rng)

    @property
    def x_dim(self):
        return self.l2.n_out

    def forward(self, pooled):
        h = np.tanh(self.l1(pooled))
        return self.l2(h), (pooled, h)

    def backward(self, cache, gx):
        pooled, h = cache
        gh = self.l2.backward(h, gx)
        return self.l1.backward(pooled, tanh_backward(h, gh))

    def __call__(self, pooled):
        return self.forward(pooled)[0]


class StyleTokens(Module):
    """Single-head attention over a learned bank of key/value tokens."""

    def __init__(self, rng, n_tokens=8, dim=16):
        if rng is None:
            self.keys = np.zeros((n_tokens, dim))
            self.values = np.zeros((n_tokens, dim))
        else:
            self.keys = rng.normal(0.0, 1.0, size=(n_tokens, dim))
            self.values = rng.normal(0.0, 0.5, size=(n_tokens, dim))
        self.g_keys = np.zeros_like(self.keys)
        self.g_values = np.zeros_like(self.values)
        self.temperature = math.sqrt(dim)

    def own_params(self):
        return {"keys": (self.keys, self.g_keys), "values": (self.values, self.g_values)}

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.keys.shape[1]:
            raise ShapeError(f"style tokens expect dim {self.keys.shape[1]}, got {x.shape[-1]}")
        a = softmax(x @ self.keys.T / self.temperature)
        return a @ self.values, (x, a)

    def backward(self, cache, gg):
        x, a = cache
        x2, a2, gg2 = np.atleast_2d(x), np.atleast_2d(a), np.atleast_2d(gg)
        self.g_values += a2.T @ gg2
        gs = softmax_backward(a2, gg2 @ self.values.T) / self.temperature
        self.g_keys += gs.T @ x2
        gx = gs @ self.keys
        return gx if np.ndim(x) > 1 else gx[0]

    def __call__(self, x):
        return self.forward(x)[0]


class Decoder(Module):
    """Frame decoder on concat[g, content] plus the log-frame-count rate head."""

    def __init__(self, rng, g_dim=16, content_dim=sw.CONTENT_DIM, hidden=64,
                 feat_dim=sw.FEAT_DIM, T0=20):
        self.l1 = Linear(g_dim + content_dim, hidden, rng)
        self.l2 = Linear(hidden, feat_dim, rng)
        self.rate_head = Linear(g_dim, 1, rng, scale=0.01 if rng is not None else None)
        self.rate_head.b[:] = math.log(T0)
        self.T0 = T0

    def forward(self, g, content, seg):
        """``g`` is B x g_dim, ``content`` N x c_dim, ``seg`` maps frames to rows of g."""
        inp = np.hstack([g[seg], content])
        h = np.tanh(self.l1(inp))
        y = np.tanh(self.l2(h))
        return y, (inp, h, y, seg, g.shape[0])

    def backward(self, cache, gy):
        inp, h, y, seg, B = cache
        gh = self.l2.backward(h, tanh_backward(y, gy))
        ginp = self.l1.backward(inp, tanh_backward(h, gh))
        g_dim = self.rate_head.n_in
        gg = np.zeros((B, g_dim))
        np.add.at(gg, seg, ginp[:, :g_dim])
        return gg

    def rate(self, g):
        return self.rate_head(g)[..., 0]

    def rate_backward(self, g, grate):
        return self.rate_head.backward(g, np.asarray(grate)[..., None])

    def frame_count(self, g) -> int:
        return int(min(max(round(math.exp(float(self.rate(g)))), 1), 4 * self.T0))


class Backbone(Module):
    def __init__(self, seed: int, cfg: BackboneConfig | None = None, T0: int = 20):
        cfg = cfg or BackboneConfig()
        self.cfg = cfg
        self.seed = seed
        rng = stream(seed, "init", "backbone")
        self.encoder = Encoder(rng, hidden=cfg.enc_hidden, x_dim=cfg.x_dim)
        self.stl = StyleTokens(rng, cfg.n_tokens, cfg.x_dim)
        self.decoder = Decoder(rng, g_dim=cfg.x_dim, hidden=cfg.dec_hidden, T0=T0)

    def encode(self, feats) -> np.ndarray:
        return encode(self.encoder, feats)

    def embed(self, feats) -> np.ndarray:
        return self.stl(self.encode(feats))

    def decode(self, g, content, n_frames=None) -> np.ndarray:
        return decode(self.decoder, g, content, n_frames)


def pool(feats) -> np.ndarray:
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise UsageError("feature sequence must be a non-empty T x D matrix")
    return f.mean(axis=0)


def encode(enc: Encoder, feats) -> np.ndarray:
    return enc(pool(feats))


def stl(bank: StyleTokens, x) -> np.ndarray:
    return bank(x)


def decode(dec: Decoder, g, content, n_frames=None) -> np.ndarray:
    """Decode one utterance.

    ``content`` is either a frame matrix or a callable ``T -> frames``; with
    a callable the frame count comes from the rate head.
    """
    g = np.asarray(g, dtype=np.float64)
    if callable(content):
        T = dec.frame_count(g) if n_frames is None else n_frames
        content = content(T)
    content = np.asarray(content, dtype=np.float64)
    y, _ = dec.forward(g[None, :], content, np.zeros(content.shape[0], dtype=int))
    return y


# --- batching ---------------------------------------------------------------

@dataclass
class Batch:
    pooled: np.ndarray   # B x D
    frames: np.ndarray   # N x D
    content: np.ndarray  # N x c
    seg: np.ndarray      # N
    log_T: np.ndarray    # B


def make_batch(corpus: sw.Corpus, idx) -> Batch:
    items = [corpus.items[i] for i in idx]
    pooled = np.stack([u.feats.mean(axis=0) for u in items])
    frames = np.concatenate([u.feats for u in items])
    content = np.concatenate([sw.content_frames(corpus.world, u.spec.content_seed, u.T) for u in items])
    seg = np.repeat(np.arange(len(items)), [u.T for u in items])
    log_T = np.log([u.T for u in items])
    return Batch(pooled, frames, content, seg, log_T)


def backbone_loss(bb: Backbone, b: Batch, rate_weight=1.0, backward=True):
    """Reconstruction MSE + rate MSE on one batch, optionally backpropagated."""
    x, c_enc = bb.encoder.forward(b.pooled)
    g, c_stl = bb.stl.forward(x)
    y, c_dec = bb.decoder.forward(g, b.content, b.seg)
    recon, gy = mse_loss(y, b.frames)
    rate_pred = bb.decoder.rate(g)
    rate, grate = mse_loss(rate_pred, b.log_T)
    if backward:
        gg = bb.decoder.backward(c_dec, gy)
        gg += bb.decoder.rate_backward(g, rate_weight * grate)
        gx = bb.stl.backward(c_stl, gg)
        bb.encoder.backward(c_enc, gx)
    return recon, rate


def pretrain(corpus: sw.Corpus, cfg: BackboneConfig | None = None, seed: int = 0,
             log_every: int = 50):
    """Fit the backbone on training speakers by reconstruction.

    Returns ``(backbone, curve)`` where curve rows are (step, recon, rate).
    Parameters are flagged frozen on return.
    """
    cfg = cfg or BackboneConfig()
    bb = Backbone(seed, cfg, corpus.world.T0)
    train = np.array(corpus.train_indices)
    rng = stream(seed, "sampling", "pretrain")
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    curve = []
    for step in range(cfg.steps + 1):
        idx = rng.choice(train, size=min(cfg.batch, train.size), replace=False)
        batch = make_batch(corpus, idx)
        bb.zero_grad()
        recon, rate = backbone_loss(bb, batch, cfg.rate_weight, backward=step < cfg.steps)
        if not (np.isfinite(recon) and np.isfinite(rate)):
            raise TrainingError("backbone pretraining diverged", step)
        if step % log_every == 0 or step == cfg.steps:
            curve.append((step, recon, rate))
        if step < cfg.steps:
            opt.step(bb.params(), bb.grads())
    freeze(bb)
    return bb, curve


def freeze(module: Module) -> None:
    module.frozen = True
    for child in module.children().values():
        freeze(child)


def reconstruction_mse(bb: Backbone, corpus: sw.Corpus, idx) -> float:
    b = make_batch(corpus, idx)
    bb.zero_grad()
    recon, _ = backbone_loss(bb, b, backward=False)
    return recon


def rate_mae(bb: Backbone, corpus: sw.Corpus, idx) -> float:
    b = make_batch(corpus, idx)
    g = bb.stl(bb.encoder(b.pooled))
    return float(np.mean(np.abs(bb.decoder.rate(g) - b.log_T)))
