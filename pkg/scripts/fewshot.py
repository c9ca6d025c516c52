"""5-way 10-shot episodes on the 5-primitive synthetic set.

    python scripts/fewshot.py --root runs/fewshot --trials 10
"""

import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path

from gpsformer.experiments import FewShotSetup, desk_fewshot


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", default="runs/fewshot")
    for name, value in asdict(FewShotSetup()).items():
        p.add_argument(f"--{name.replace('_', '-')}", type=type(value), default=value)
    args = vars(p.parse_args())
    root = Path(args.pop("root"))
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = desk_fewshot(root, FewShotSetup(**args))
    root.mkdir(parents=True, exist_ok=True)
    (root / "result.json").write_text(json.dumps(res, indent=1))
    print(f"{res['n_way']}-way {res['m_shot']}-shot: {100 * res['mean']:.1f} +- {100 * res['std']:.1f}")


if __name__ == "__main__":
    main()
