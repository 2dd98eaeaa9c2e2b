"""Command-line entry point: ``python -m rome <verb> --config cfg.json --out dir``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex

VERBS = ("train", "attack-eval", "verify", "eye", "case-study")


def build_parser():
    ap = argparse.ArgumentParser(prog="rome", description=__doc__)
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", required=True, help="experiment config JSON")
    ap.add_argument("--out", help="output directory (defaults to the config's output_dir)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--case", choices=ex.CASES, help="override the config case")
    ap.add_argument("--attack", help="attack spec for attack-eval, inline JSON or a file path")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def load_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.case is not None:
        changes["case"] = args.case
    if args.out is not None:
        changes["output_dir"] = args.out
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _require_checkpoints(out: Path):
    if not (out / "checkpoints" / "bundle" / "manifest.json").exists():
        raise SystemExit(f"no trained checkpoints under {out}; run `train` first")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args)
    except (ex.ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rngs = ex._rngs(cfg.seed)
    try:
        if args.verb == "case-study":
            table, _, extras = ex.run_case_study(cfg, out)
            print(table.to_csv(), end="")
            return 0
        if args.verb == "train":
            ws = ex.train_pipeline(cfg, rngs)
            ex.save_workspace(ws, out)
            print(json.dumps(ex.config_echo(ws)["resolved"], indent=2))
            return 0
        _require_checkpoints(out)
        ws = ex.load_workspace(cfg, out, rngs)
        if args.verb == "attack-eval":
            spec = ex.AttackSpec.parse(args.attack) if args.attack else ex.AttackSpec()
            table = ex.evaluate_table(ws, rngs["eval"], attack=spec.build(ws), psr_grid=spec.psr_db)
            table.write(out / "metrics.csv")
            print(table.to_csv(), end="")
        elif args.verb == "verify":
            rows = ex.verification_rows(ws, rngs["verify"])
            text = ex.verification_csv(rows, cfg.dataset.classes)
            (out / "verify.csv").write_text(text)
            print(text, end="")
        elif args.verb == "eye":
            eye, report = ex.run_eye(ws, rngs["eye"])
            (out / "eye.csv").write_text(eye.to_csv(cfg.model.P))
            (out / "eye_properties.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
            print(eye.to_csv(cfg.model.P), end="")
    except ex.StageError as exc:
        print(f"stage failure {exc}", file=sys.stderr)
        return 1
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
