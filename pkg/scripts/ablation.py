"""Global perception ablation: each component alone versus the full pipeline.

    python scripts/ablation.py --root runs/ablation --seeds 0 1 2
"""

import argparse
import json
import logging
from pathlib import Path

from gpsformer.experiments import ABLATIONS, desk_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", default="runs/ablation")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--configs", nargs="+", default=list(ABLATIONS), choices=list(ABLATIONS))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = desk_ablation(args.root, tuple(args.seeds), tuple(args.configs))
    Path(args.root).mkdir(parents=True, exist_ok=True)
    (Path(args.root) / "result.json").write_text(json.dumps(res, indent=1))
    for name, mean in res["mean"].items():
        print(f"{name:>12s}  OA {100 * mean:5.1f}  per seed {[round(100 * v, 1) for v in res['oa'][name]]}")


if __name__ == "__main__":
    main()
