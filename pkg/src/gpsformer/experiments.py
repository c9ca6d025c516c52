"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite.

Each function generates its own synthetic data under ``root`` (reusing it when
the manifest already exists) and returns a plain dict of results.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DatasetManifest, EpisodeSpec, generate_synthetic
from .gpm import GPMConfig
from .model import GPSFormerConfig, build_model
from .train import TrainConfig, evaluate, fewshot_eval, train

log = logging.getLogger(__name__)


def dataset(root, classes, per_class, points, seed=0, noise=0.005, train_fraction=0.8):
    path = Path(root) / "manifest.json"
    if path.exists():
        m = DatasetManifest.load(path)
        if m.num_classes == classes and len(m.samples) == classes * per_class:
            return m
    return generate_synthetic(root, classes=classes, per_class=per_class, points_per_cloud=points,
                              noise_sigma=noise, seed=seed, train_fraction=train_fraction)


# ------------------------------------------------------------ classification

@dataclass
class DeskSetup:
    classes: int = 4
    per_class: int = 250          # 800 train / 200 test at the default split
    points: int = 256
    stage_point_counts: list = field(default_factory=lambda: [64, 32, 16])
    variant: str = "elite"
    epochs: int = 12
    batch_size: int = 32
    lr: float = 0.002
    seed: int = 0
    votes: int = 10

    def model_config(self, **kw):
        return GPSFormerConfig(variant=self.variant, num_classes=self.classes, num_points=self.points,
                               stage_point_counts=list(self.stage_point_counts), seed=self.seed, **kw)

    def train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, optimizer="adam", lr_init=self.lr,
                           lr_min=self.lr / 100, seed=self.seed)


def desk_classification(root, setup: DeskSetup | None = None):
    """Train on the 4-class task, then score the best checkpoint with and without voting."""
    from .checkpoint import load_checkpoint
    setup = setup or DeskSetup()
    root = Path(root)
    manifest = dataset(root / "data", setup.classes, setup.per_class, setup.points)
    t0 = time.perf_counter()
    result = train(build_model(setup.model_config()), manifest, setup.train_config(), out_dir=root / "run")
    wall = time.perf_counter() - t0
    best, _, _ = load_checkpoint(result.best_checkpoint)
    single = evaluate(best, manifest, "test", vote_count=1)
    voted = evaluate(best, manifest, "test", vote_count=setup.votes)
    return {"train_seconds": wall, "history": result.history, "best": result.best,
            "oa_vote1": single.oa, f"oa_vote{setup.votes}": voted.oa, "macc_vote1": single.macc,
            "n_train": len(manifest.indices("train")), "n_test": len(manifest.indices("test"))}


# ------------------------------------------------------------------ few-shot

@dataclass
class FewShotSetup:
    n_way: int = 5
    m_shot: int = 10
    queries: int = 20
    trials: int = 10
    per_class: int = 40
    points: int = 256
    epochs: int = 30
    batch_size: int = 10
    lr: float = 0.003
    seed: int = 0


def desk_fewshot(root, setup: FewShotSetup | None = None):
    setup = setup or FewShotSetup()
    manifest = dataset(Path(root) / "data", 5, setup.per_class, setup.points, train_fraction=1.0)
    base = GPSFormerConfig(variant="elite", num_classes=setup.n_way, num_points=setup.points,
                           stage_point_counts=[64, 32, 16])
    cfg = TrainConfig(epochs=setup.epochs, batch_size=setup.batch_size, optimizer="adam", lr_init=setup.lr,
                      lr_min=setup.lr / 100)
    t0 = time.perf_counter()
    out = fewshot_eval(lambda n, s: build_model(replace(base, num_classes=n, seed=s)), manifest,
                       EpisodeSpec(setup.n_way, setup.m_shot, setup.queries, setup.seed), cfg, trials=setup.trials)
    out["seconds"] = time.perf_counter() - t0
    return out


# ------------------------------------------------------------------ ablation

ABLATIONS = {
    "adg+rca+mha": GPMConfig(True, True, True),
    "adg": GPMConfig(True, False, False),
    "rca": GPMConfig(False, True, False),
    "mha": GPMConfig(False, False, True),
}


def ablation_setup(seed):
    """Reduced budget of the desk task: fewer clouds and points, fewer epochs."""
    return DeskSetup(per_class=80, points=128, epochs=12, batch_size=16, lr=0.003, seed=seed, votes=1)


def desk_ablation(root, seeds=(0, 1, 2), names=tuple(ABLATIONS)):
    root = Path(root)
    scores = {name: [] for name in names}
    for seed in seeds:
        setup = ablation_setup(seed)
        manifest = dataset(root / "data", setup.classes, setup.per_class, setup.points)
        for name in names:
            model = build_model(setup.model_config(gpm=replace(ABLATIONS[name])))
            train(model, manifest, setup.train_config())
            oa = evaluate(model, manifest, "test").oa
            log.info("ablation %s seed %d OA %.4f", name, seed, oa)
            scores[name].append(oa)
    return {"seeds": list(seeds), "oa": scores, "mean": {k: float(np.mean(v)) for k, v in scores.items()}}
