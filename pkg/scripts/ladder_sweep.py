"""Retrain the base-classifier ladder of a trained run under different settings.

Keeps the encoder, G0 and the jamming generator from ``--out`` and sweeps the
number of inner PGD steps used for adversarial training, printing each
ladder's accuracy under the generator at the clean point and every boundary.
Useful for seeing how the clean/robust trade-off moves with the strength of
the inner attack.

    python scripts/ladder_sweep.py configs/toy_digits_general.json --out runs/toy_general --steps 1 3 5
"""
import argparse
import time

import numpy as np

from rome import attacks as atk
from rome import defense as dfn
from rome import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("--out")
    ap.add_argument("--steps", type=int, nargs="+", default=[1, 3, 5])
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--independent", action="store_true",
                    help="start every classifier from G0 instead of from its predecessor")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    cfg = ex.ExperimentConfig.load(args.config)
    ws = ex.load_workspace(cfg, args.out or cfg.output_dir)
    channel = cfg.channel.model()
    b = ws.grid_levels.boundaries
    radii = (0.0,) + tuple(b)
    print("steps model " + " ".join(f"{e:7.3f}" for e in radii))
    for steps in args.steps:
        rng = np.random.default_rng(args.seed)
        t = time.time()
        ladder = dfn.acquire_base_classifiers(
            ws.ladder[0], atk.pgd_attack(steps), ws.grid_levels, ws.x_train, ws.train.labels,
            channel, rng, epochs=args.epochs or cfg.train.at_epochs, chain=not args.independent,
            batch_size=cfg.train.at_batch_size, lr=cfg.train.at_lr)
        for i, g in enumerate(ladder):
            acc = [dfn.evaluate_accuracy(g, atk.apg_attack(ws.apg), e, ws.x_test, ws.test.labels,
                                         channel, np.random.default_rng(0)) for e in radii]
            print(f"{steps:5d} G{i:<4d} " + " ".join(f"{a:7.3f}" for a in acc))
        print(f"      ({time.time() - t:.0f}s)")


if __name__ == "__main__":
    main()
