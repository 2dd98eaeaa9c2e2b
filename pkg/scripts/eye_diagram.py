"""Eye diagram of a trained detector, with an optional plot.

Reads checkpoints written by ``python -m rome train`` and sweeps the jamming
radius over a fine grid.

    python scripts/eye_diagram.py configs/toy_digits_levels.json --out runs/toy_levels --plot eye.png
"""
import argparse
import json
from pathlib import Path

import numpy as np

from rome import attacks as atk
from rome import channel as ch
from rome import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("--out", help="directory holding checkpoints/ (defaults to the config's output_dir)")
    ap.add_argument("--points", type=int, default=40)
    ap.add_argument("--plot", help="write a PNG (needs matplotlib)")
    args = ap.parse_args()

    cfg = ex.ExperimentConfig.load(args.config)
    out = Path(args.out or cfg.output_dir)
    ws = ex.load_workspace(cfg, out)
    b = ws.levels.boundaries
    eps = np.concatenate([[0.0], np.geomspace(b[0] / 3, b[-1] * 1.3, args.points)])
    eye = ex.eye_diagram(ws.stack, atk.apg_attack(ws.attacker), eps, ws.x_test, ws.test.labels,
                         cfg.channel.model(), np.random.default_rng(cfg.seed), samples=cfg.eye_samples)
    (out / "eye_fine.csv").write_text(eye.to_csv(cfg.model.P))
    try:
        report = ex.check_eye_properties(eye, ws.levels)
    except ValueError as exc:
        report = {"error": str(exc)}
    print(json.dumps(report, indent=2))

    if args.plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        psr = ch.epsilon_to_psr(np.maximum(eps[1:], 1e-12), cfg.model.P)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for k in range(eye.pd.shape[1]):
            ax.plot(psr, eye.pd[1:, k], label=f"L{k}")
        for v in cfg.psr_db:
            ax.axvline(v, color="grey", lw=0.5, ls="--")
        ax.set_xlabel("PSR (dB)")
        ax.set_ylabel("mean detector output")
        ax.legend()
        fig.tight_layout()
        fig.savefig(args.plot, dpi=120)
        print(f"plot written to {args.plot}")


if __name__ == "__main__":
    main()
