"""Train and evaluate one case study, then print the accuracy table as a grid.

    python scripts/run_case_study.py configs/toy_digits_general.json --out runs/toy
"""
import argparse
import dataclasses
import logging

import numpy as np

from rome import attacks as atk
from rome import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("--out")
    ap.add_argument("--case", choices=ex.CASES)
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ex.ExperimentConfig.load(args.config)
    changes = {k: v for k, v in (("output_dir", args.out), ("case", args.case), ("seed", args.seed))
               if v is not None}
    cfg = dataclasses.replace(cfg, **changes)
    table, ws, extras = ex.run_case_study(cfg, cfg.output_dir)

    points = table.psr_points()
    print("model  " + " ".join(f"{p if isinstance(p, str) else f'{p:g} dB':>8}" for p in points))
    for m in table.models():
        print(f"{m:<6} " + " ".join(f"{table.get(m, p):8.3f}" for p in points))

    conf = ex.level_confusion(ws, atk.apg_attack(ws.attacker), np.random.default_rng(cfg.seed))
    print("\ndetector confusion under the evaluation jammer (rows: true level)")
    print(conf)
    print("\neye-diagram properties:",
          {k: v.get("pass") for k, v in extras["eye_properties"].items() if isinstance(v, dict)})
    print(f"outputs written to {cfg.output_dir}")


if __name__ == "__main__":
    main()
