"""Compare high-order basis modes (abf, rbf, s0/s1 with learnable exponent) on the reduced desk task.

    python scripts/basis_sweep.py --root runs/basis --seeds 0
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from gpsformer.experiments import ablation_setup, dataset
from gpsformer.lsf import LSFConfig
from gpsformer.model import build_model
from gpsformer.train import evaluate, train

MODES = ("abf", "rbf", "s0_learnable", "s1_learnable")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", default="runs/basis")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    scores = {m: [] for m in MODES}
    for seed in args.seeds:
        setup = ablation_setup(seed)
        manifest = dataset(Path(args.root) / "data", setup.classes, setup.per_class, setup.points)
        for mode in MODES:
            model = build_model(setup.model_config(lsf=LSFConfig(basis_mode=mode)))
            train(model, manifest, setup.train_config())
            scores[mode].append(evaluate(model, manifest, "test").oa)
    Path(args.root, "result.json").write_text(json.dumps(scores, indent=1))
    for mode, v in scores.items():
        print(f"{mode:>13s}  OA {100 * np.mean(v):5.1f}")


if __name__ == "__main__":
    main()
