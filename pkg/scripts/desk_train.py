"""Train the elite classifier on the 4-class synthetic task and report voting.

    python scripts/desk_train.py --root runs/desk --epochs 12
"""

import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path

from gpsformer.experiments import DeskSetup, desk_classification


def main():
    defaults = DeskSetup()
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", default="runs/desk")
    for name, value in asdict(defaults).items():
        if not isinstance(value, list):
            p.add_argument(f"--{name.replace('_', '-')}", type=type(value), default=value)
    args = vars(p.parse_args())
    root = Path(args.pop("root"))
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = desk_classification(root, DeskSetup(**args))
    (root / "result.json").write_text(json.dumps(res, indent=1))
    print(json.dumps({k: v for k, v in res.items() if k != "history"}, indent=1))


if __name__ == "__main__":
    main()
