#!/usr/bin/env python3
"""Run the desk-scale pipeline and write every report table.

    python3 scripts/run_experiments.py [--out runs/desk] [--attacks pgd,mim,deepfool,cw]
                                       [--set defender.epochs=1000 ...]

Stages are cached under <out>/cache, so a second run only redoes what changed.
"""
import argparse
import logging
import sys

from logitcorrect import experiment


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--cache", help="stage cache directory (default <out>/cache)")
    p.add_argument("--attacks", default="pgd,mim,deepfool,cw")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    values = dict(item.split("=", 1) for item in args.set)
    values.update(attacks=args.attacks, parallelism=args.parallelism)
    cfg = experiment.ExperimentConfig.from_flat(values)
    cache = experiment.StageCache(args.cache or f"{args.out}/cache")
    res = experiment.run(cfg, args.out, cache)
    for path in experiment.write_reports(res, args.out):
        print(path)
    print(f"test accuracy {res.test_accuracy.value:.4f}")
    for name, rep in res.reports.items():
        print(f"{name}: " + ", ".join(f"{k} {a.value:.4f}" for k, a in rep.rows()))
    if res.knockout:
        print(f"knockout: {res.knockout['before'].value:.4f} -> {res.knockout['after'].value:.4f}")
    if res.histogram:
        h = res.histogram
        print(f"mean-logit gap {h['gap']:+.4f} ({h['gap_in_se']:+.2f} SE)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
