"""Command-line entry point: ``run``, ``ate``, ``bandwidth`` and ``vocab-train``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import EXIT_CONFIG, EXIT_OK, ConfigError, RunConfig, bandwidth_report, compute_ate, run
from .place import train_vocabulary
from .sim import ScenarioError, builtin_scenario, generate_truth, load_scenario


def _scenario(arg):
    """A file path, or the name of a built-in scenario."""
    p = Path(arg)
    return load_scenario(p) if p.exists() else builtin_scenario(arg)


def _read_positions(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    t = np.array([float(r["t"]) for r in rows])
    p = np.array([[float(r["px"]), float(r["py"]), float(r["pz"])] for r in rows])
    return t, p


def cmd_run(args):
    cfg = RunConfig(
        _scenario(args.scenario),
        mode=args.mode,
        matching="oracle-id" if args.oracle_matching else "descriptor",
        out_dir=args.out,
        seed=args.seed,
        enable_slam_slam=not args.no_slam_slam,
        enable_collab_msckf=not args.no_collab_msckf,
        alignment=args.align,
    )
    rep = run(cfg)
    print(rep.to_json())
    return rep.exit_code


def cmd_ate(args):
    te, pe = _read_positions(args.estimate)
    tt, pt = _read_positions(args.truth)
    rmse, err = compute_ate(te, pe, tt, pt, args.align)
    print(json.dumps({"ate_rmse": rmse, "ate_mean": float(err.mean()), "ate_std": float(err.std())}))
    return EXIT_OK


def cmd_bandwidth(args):
    a = json.loads(Path(args.protocol).read_text())
    b = json.loads(Path(args.naive).read_text())
    print(json.dumps(bandwidth_report(a, b), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_vocab(args):
    scen = _scenario(args.scenario)
    seed = scen.seed if args.seed is None else args.seed
    landmarks, _ = generate_truth(scen)
    vocab = train_vocabulary(landmarks.descriptors, seed=seed)
    vocab.save(args.out)
    print(json.dumps({"words": len(vocab.centroids), "cost": vocab.cost, "seed": seed}))
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="collabvio", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and print the JSON report")
    r.add_argument("--scenario", required=True, help="scenario JSON path or built-in name")
    r.add_argument("--mode", default="collaborative", choices=["independent", "collaborative", "naive"])
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None, help="directory for report.json, bytes.csv and trajectories")
    r.add_argument("--oracle-matching", action="store_true", help="match by ground-truth landmark identity")
    r.add_argument("--no-slam-slam", action="store_true")
    r.add_argument("--no-collab-msckf", action="store_true")
    r.add_argument("--align", default="none", choices=["none", "se3"])
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ate", help="ATE between two trajectory CSV files (t,px,py,pz)")
    a.add_argument("--estimate", required=True)
    a.add_argument("--truth", required=True)
    a.add_argument("--align", default="none", choices=["none", "se3"])
    a.set_defaults(func=cmd_ate)

    b = sub.add_parser("bandwidth", help="compare protocol and naive run reports")
    b.add_argument("--protocol", required=True)
    b.add_argument("--naive", required=True)
    b.set_defaults(func=cmd_bandwidth)

    v = sub.add_parser("vocab-train", help="train the 64-word vocabulary of a scenario")
    v.add_argument("--scenario", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--seed", type=int, default=None)
    v.set_defaults(func=cmd_vocab)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ScenarioError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
