"""Command-line runner.

Exit codes: 0 success, 1 unexpected failure (including I/O), 2 usage,
3 data/validation, 4 numeric/divergence, 5 missing dependency stage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import corpus as cp
from . import pipeline as pl
from .errors import UsageError, VicError

log = logging.getLogger("vicdesk")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML/JSON key-value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vicdesk", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    for name, help_ in [("pretrain", "build the synthetic corpus and pretrain the backbone"),
                        ("train-vie", "train the voice impression estimator"),
                        ("eval", "leakage, SECS and modulation metrics for all variants"),
                        ("modulate", "modulation slopes only"),
                        ("reproduce", "run every stage for every variant"),
                        ("show-config", "print the resolved config and its hash")]:
        _common(sub.add_parser(name, help=help_))

    ft = sub.add_parser("finetune", help="fine-tune one control-module variant")
    _common(ft)
    ft.add_argument("--variant", required=True, choices=["base", "sep", "rfg"])

    co = sub.add_parser("corpus", help="annotation analytics")
    csub = co.add_subparsers(dest="corpus_cmd", required=True)
    a = csub.add_parser("alpha", help="Krippendorff's alpha per scale")
    a.add_argument("--annotations", type=Path, required=True)
    c = csub.add_parser("corr", help="inter-scale correlation matrix")
    c.add_argument("--annotations", type=Path, required=True)
    s = csub.add_parser("speed", help="objective Slow-Fast scale from word rates")
    s.add_argument("--rates", type=Path, required=True)
    g = csub.add_parser("augment", help="similarity-based label propagation")
    g.add_argument("--descriptors", type=Path, required=True)
    g.add_argument("--sidecar", type=Path)
    g.add_argument("--labels", type=Path, required=True,
                   help="TSV: item_id then one column per scale A-K")
    g.add_argument("--k", type=int, default=100)
    for p in (a, c, s, g):
        _common(p)
    return ap


def resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config is not None else cfgmod.desk()
    return cfg.with_seed(args.seed)


def read_labels(path: Path) -> dict[str, list[float]]:
    from .errors import ParseError
    out = {}
    lines = path.read_text().splitlines()
    if not lines or lines[0].split("\t")[:1] != ["item_id"]:
        raise ParseError("expected header starting with item_id", 1, path)
    header = lines[0].split("\t")
    cols = [header.index(sc) if sc in header else None for sc in cp.SCALES]
    if None in cols:
        raise ParseError("label header must name all scales A-K", 1, path)
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        try:
            out[cells[0]] = [float(cells[k]) for k in cols]
        except (ValueError, IndexError):
            raise ParseError("malformed label row", n, path) from None
    return out


def run_corpus(args, cfg) -> list[Path]:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed}
    if args.corpus_cmd == "alpha":
        table = cp.read_annotations(args.annotations)
        meta["metric"] = "interval"
        p = out / "alpha.csv"
        p.write_text(cp.alpha_csv(cp.alpha_table(table), meta))
    elif args.corpus_cmd == "corr":
        table = cp.read_annotations(args.annotations)
        p = out / "correlation.csv"
        p.write_text(cp.correlation_csv(cp.correlation_matrix(table), meta))
    elif args.corpus_cmd == "speed":
        meta["rescaling"] = "min-max words/second onto [1, 7]"
        p = out / "slow_fast.csv"
        p.write_text(cp.speed_csv(cp.slow_fast_scale(cp.read_rates(args.rates)), meta))
    else:
        descs = cp.read_descriptors(args.descriptors, args.sidecar)
        by_id = {d.item_id: d for d in descs}
        labels = read_labels(args.labels)
        rows, flags = [], {}
        for anchor_id in sorted(labels):
            if anchor_id not in by_id:
                raise UsageError(f"labelled anchor {anchor_id} missing from descriptors")
            sel = cp.similarity_select(by_id[anchor_id], descs, args.k)
            rows += cp.propagate_labels(sel, labels[anchor_id])
            flags[f"short_pool[{anchor_id}]"] = f"{sel.short_pool} ({len(sel.ranked)} of k={args.k})"
        p = out / "labels.csv"
        p.write_text(cp.label_manifest_csv(rows, flags, meta))
    return [p]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.cmd == "show-config":
            sys.stdout.write(cfgmod.dump(cfg))
            print(f"# config_hash: {cfg.hash()}")
            return 0
        if args.cmd == "corpus":
            paths = run_corpus(args, cfg)
        else:
            run = pl.Run(cfg, args.out)
            if args.cmd == "pretrain":
                paths = [pl.stage_pretrain(run)]
            elif args.cmd == "train-vie":
                paths = [pl.stage_train_vie(run)]
            elif args.cmd == "finetune":
                paths = [pl.stage_finetune(run, args.variant)]
            elif args.cmd == "eval":
                paths = [pl.stage_eval(run)]
            elif args.cmd == "modulate":
                paths = [pl.stage_modulate(run)]
            else:
                paths = [pl.reproduce(run)]
    except VicError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
