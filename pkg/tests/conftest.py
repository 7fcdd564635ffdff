import time

import pytest

from vicdesk import config as cfgmod
from vicdesk import pipeline as pl

SEEDS = (0, 1, 2)


class Trained:
    """Loaded artifacts of one full pipeline run."""

    def __init__(self, run: pl.Run, seconds: float):
        self.run = run
        self.seconds = seconds
        self.world = run.world
        self.corpus = run.corpus
        self.bb = run.load_backbone()
        self.vie = run.load_vie(self.bb)
        self.models = {v: run.load_variant(v) for v in run.cfg.variants}

    @property
    def out(self):
        return self.run.out


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Full default pipeline for seeds 0, 1, 2 (run once per session)."""
    out = {}
    for seed in SEEDS:
        run = pl.Run(cfgmod.desk().with_seed(seed), tmp_path_factory.mktemp(f"seed{seed}"))
        t0 = time.perf_counter()
        pl.reproduce(run)
        out[seed] = Trained(run, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="session")
def trained0(trained):
    return trained[0]
