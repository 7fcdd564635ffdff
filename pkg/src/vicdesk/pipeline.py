"""Staged experiment pipeline with on-disk artifacts between stages.

Layout under the output directory::

    manifest.json              run manifest (config, hashes, timings)
    corpus/                    exported synthetic corpus
    backbone.vick              pretrained backbone (+ .json manifest)
    pretrain_curve.csv
    vie.vick, vie_curve.csv
    variants/<v>.vick          fine-tuned control modules
    variants/finetune_<v>.csv
    probe.vick                 speaker probe used for SECS
    report.csv slopes.csv modulation_long.csv proxy.csv grl.csv

Every stage rebuilds the synthetic world from the config (it is cheap and
deterministic) and loads upstream artifacts from disk.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import platform
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import backbone as bbm
from . import control as ctl
from . import metrics as mt
from . import synthworld as sw
from .config import RunConfig
from .errors import DependencyError
from .nnet import checksum, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class Run:
    def __init__(self, cfg: RunConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self._world = None
        self._corpus = None

    @property
    def seed(self) -> int:
        return self.cfg.seed

    @property
    def meta(self) -> dict:
        return {"config_hash": self.cfg.hash(), "seed": self.seed}

    @property
    def world(self) -> sw.WorldParams:
        if self._world is None:
            w = self.cfg.world
            self._world = sw.new_world(self.seed, w.T0, w.rate_coeff, w.expressive_sd)
        return self._world

    @property
    def corpus(self) -> sw.Corpus:
        if self._corpus is None:
            c = self.cfg.corpus
            self._corpus = sw.build_corpus(self.world, c.n_speakers, c.n_utts, c.holdout_frac)
        return self._corpus

    # --- artifact access ----------------------------------------------------

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def _require(self, rel: str, stage: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise DependencyError(f"missing {rel}; run the '{stage}' stage first")
        return p

    def load_backbone(self) -> bbm.Backbone:
        state, _ = load_checkpoint(self._require("backbone.vick", "pretrain"))
        bb = bbm.Backbone(self.seed, self.cfg.backbone, self.cfg.world.T0)
        bb.load_state_dict(state)
        bbm.freeze(bb)
        return bb

    def load_vie(self, bb: bbm.Backbone) -> ctl.Vie:
        state, _ = load_checkpoint(self._require("vie.vick", "train-vie"))
        vie = ctl.Vie(bbm.Encoder(None, hidden=self.cfg.backbone.enc_hidden, x_dim=bb.encoder.x_dim))
        vie.load_state_dict(state)
        bbm.freeze(vie)
        return vie

    def load_variant(self, variant: str) -> ctl.ControlledModel:
        state, _ = load_checkpoint(self._require(f"variants/{variant}.vick", f"finetune --variant {variant}"))
        return ctl.ControlledModel.from_state(variant, state, self.cfg.control)

    # --- manifest -----------------------------------------------------------

    def record(self, stage: str, seconds: float, outputs: list[Path], **extra) -> None:
        mpath = self.path("manifest.json")
        m = json.loads(mpath.read_text()) if mpath.exists() else {}
        m.update({
            "config_hash": self.cfg.hash(),
            "seed": self.seed,
            "config": self.cfg.to_dict(),
            "versions": {"vicdesk": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "hardware": {"machine": platform.machine(), "processor": platform.processor(),
                         "system": platform.system()},
        })
        st = m.setdefault("stages", {})
        st[stage] = {"wall_clock_s": round(seconds, 3),
                     "outputs": [str(p.relative_to(self.out)) for p in outputs], **extra}
        mpath.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")

    def write_csv(self, rel: str, header: list[str], rows, extra_meta: dict | None = None) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        meta = dict(self.meta)
        meta.update(extra_meta or {})
        for k in sorted(meta):
            buf.write(f"# {k}: {meta[k]}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
        p.write_text(buf.getvalue())
        return p

    def write_text(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        return p


# --- stages -------------------------------------------------------------------

def stage_pretrain(run: Run) -> Path:
    t0 = time.perf_counter()
    corpus = run.corpus
    corpus_path = sw.export_corpus(corpus, run.path("corpus"), run.meta)
    bb, curve = bbm.pretrain(corpus, run.cfg.backbone, run.seed)
    ck = save_checkpoint(run.path("backbone.vick"), bb.state_dict(),
                         {**run.meta, "stage": "pretrain", "frozen": True})
    cv = run.write_csv("pretrain_curve.csv", ["step", "recon_loss", "rate_loss"], curve)
    held = corpus.heldout_indices
    stats = {"heldout_recon_mse": bbm.reconstruction_mse(bb, corpus, held),
             "heldout_rate_mae": bbm.rate_mae(bb, corpus, held)}
    run.record("pretrain", time.perf_counter() - t0, [ck, cv, corpus_path],
               checksum=checksum(bb.params()), **stats)
    log.info("pretrain done: %s", stats)
    return ck


def oracle_labels(corpus: sw.Corpus) -> dict[int, np.ndarray]:
    return {i: corpus.items[i].spec.v_true for i in corpus.train_indices}


def stage_train_vie(run: Run) -> Path:
    t0 = time.perf_counter()
    bb = run.load_backbone()
    corpus = run.corpus
    vie, curve = ctl.train_vie(corpus, oracle_labels(corpus), bb, run.cfg.vie, run.seed)
    ck = save_checkpoint(run.path("vie.vick"), vie.state_dict(), {**run.meta, "stage": "train-vie"})
    cv = run.write_csv("vie_curve.csv", ["step", "mse"], curve)
    held = ctl.vie_mse(vie, corpus, corpus.heldout_indices)
    run.record("train-vie", time.perf_counter() - t0, [ck, cv], heldout_mse=held)
    return ck


def stage_finetune(run: Run, variant: str) -> Path:
    t0 = time.perf_counter()
    bb = run.load_backbone()
    vie = run.load_vie(bb)
    before = checksum(bb.params())
    model = ctl.finetune(variant, bb, vie, run.corpus, run.cfg.control, run.seed)
    after = checksum(bb.params())
    if before != after:
        raise AssertionError("backbone parameters changed during fine-tuning")
    ck = save_checkpoint(run.path("variants", f"{variant}.vick"), model.state_dict(),
                         {**run.meta, "stage": "finetune", "variant": variant,
                          "trainable": model.trainable})
    cv = run.write_csv(f"variants/finetune_{variant}.csv", ["step", "recon", "adv", "rate"], model.log,
                       {"variant": variant})
    run.record(f"finetune:{variant}", time.perf_counter() - t0, [ck, cv],
               trainable=model.trainable, backbone_checksum=after)
    return ck


def anchors_for(items: list[mt.EvalItem]) -> list[mt.EvalItem]:
    seen, out = set(), []
    for it in items:
        if it.speaker_id not in seen:
            seen.add(it.speaker_id)
            out.append(it)
    return out


def _modulation(run, vie, bb, world, models, items):
    slopes, long_rows = {}, []
    anchors = anchors_for(items)
    for v, model in models.items():
        rec = []
        synth = ctl.synth_closure(model, bb, world, run.seed, "modulation")
        slopes[v] = mt.modulation_experiment(vie, synth, anchors, n_sentences=run.cfg.eval.n_sentences,
                                             seed=run.seed, record=rec)
        long_rows += [(v, sw.VI_LETTERS[d], key, o, j, c, p) for d, key, o, j, c, p in rec]
    return slopes, long_rows


def _write_slopes(run, slopes, long_rows):
    p1 = run.write_text("slopes.csv", mt.slope_csv(slopes, run.meta))
    p2 = run.write_csv("modulation_long.csv",
                       ["variant", "dim", "anchor", "offset", "sentence", "commanded", "predicted"],
                       long_rows)
    return [p1, p2]


def stage_eval(run: Run) -> Path:
    t0 = time.perf_counter()
    bb = run.load_backbone()
    vie = run.load_vie(bb)
    models = {v: run.load_variant(v) for v in run.cfg.variants}
    world, corpus = run.world, run.corpus
    items = mt.eval_items(corpus, corpus.heldout_indices)
    pc = run.cfg.probe
    probe = mt.train_probe(corpus, run.seed, pc.steps, pc.batch, pc.lr)
    probe_ck = save_checkpoint(run.path("probe.vick"), probe.state_dict(), {**run.meta, "stage": "eval"})

    leakage, secs, proxy = {}, {}, []
    for v, model in models.items():
        synth = ctl.synth_closure(model, bb, world, run.seed, "leakage")
        vi = mt.vi_mse(vie, synth, items)
        rvi = mt.rvi_mse(vie, synth, items, pairing_seed=run.seed)
        leakage[v] = mt.LeakageReport.compute(v, vi, rvi, len(items), run.seed)
        secs[v] = mt.mean_secs(probe, synth, vie, items)
        proxy.append((v, reconstruction_proxy(vie, synth, items)))
    slopes, long_rows = _modulation(run, vie, bb, world, models, items)

    report = mt.build_report(leakage, secs, slopes, run.cfg.variants, run.meta)
    rp = run.write_text("report.csv", report.to_csv())
    outs = [probe_ck, rp] + _write_slopes(run, slopes, long_rows)
    outs.append(run.write_csv("proxy.csv", ["variant", "recon_mse_intelligibility_proxy"], proxy,
                              {"note": "reconstruction MSE of own-VI resynthesis; a proxy, not CER/WER"}))
    if "base" in models:
        g = grl_efficacy(run, bb, vie, models["base"])
        outs.append(run.write_csv(
            "grl.csv", ["reversed_mse", "control_mse", "margin", "probe_reversed_mse", "probe_control_mse"],
            [(g["head_rev"], g["head_ctrl"], g["head_rev"] - g["head_ctrl"], g["probe_rev"], g["probe_ctrl"])],
            {"note": "adversarial-head VI MSE on held-out reference path; probe columns are a fresh post-hoc linear probe"}))
    run.record("eval", time.perf_counter() - t0, outs)
    return rp


def stage_modulate(run: Run) -> Path:
    t0 = time.perf_counter()
    bb = run.load_backbone()
    vie = run.load_vie(bb)
    models = {v: run.load_variant(v) for v in run.cfg.variants}
    items = mt.eval_items(run.corpus, run.corpus.heldout_indices)
    slopes, long_rows = _modulation(run, vie, bb, run.world, models, items)
    outs = _write_slopes(run, slopes, long_rows)
    run.record("modulate", time.perf_counter() - t0, outs)
    return outs[0]


def grl_efficacy(run: Run, bb, vie, reversed_model) -> dict[str, float]:
    """Adversarial-head MSE for the reversed base model and a matched unreversed control.

    The control is fine-tuned with the same seed (so the same head init) but
    GRL lambda 0. Fresh post-hoc probe MSEs are reported alongside.
    """
    ctrl_cfg = replace(run.cfg.control, grl_lambda=0.0)
    control = ctl.finetune("base", bb, vie, run.corpus, ctrl_cfg, run.seed)
    steps = run.cfg.eval.grl_probe_steps
    return {
        "head_rev": ctl.adv_head_mse(reversed_model, bb, vie, run.corpus),
        "head_ctrl": ctl.adv_head_mse(control, bb, vie, run.corpus),
        "probe_rev": ctl.path_vi_probe(reversed_model, bb, vie, run.corpus, run.seed, steps),
        "probe_ctrl": ctl.path_vi_probe(control, bb, vie, run.corpus, run.seed, steps),
    }


def reconstruction_proxy(vie, synth, items) -> float:
    errs = []
    for t, it in enumerate(items):
        out = synth(it, vie(it.feats), it.content_seed, t)
        n = min(out.shape[0], it.feats.shape[0])
        errs.append(np.mean((out[:n] - it.feats[:n]) ** 2))
    return float(np.mean(errs))


def reproduce(run: Run) -> Path:
    stage_pretrain(run)
    stage_train_vie(run)
    for v in run.cfg.variants:
        stage_finetune(run, v)
    return stage_eval(run)
