"""Command-line entry point.

Every subcommand reads defaults, then a flat ``key=value`` file given by
``--config``, then explicit flags (and ``--set key=value`` for anything without
a dedicated flag), and writes its outputs plus ``manifest.json`` into ``--out``.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import shlex
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, attacks, classifier, defender, experiment, storage
from .config import apply_flat, flat, read_flat_config, write_manifest
from .experiment import csv_bytes, histogram_rows

log = logging.getLogger("logitcorrect")


class Run:
    """Book-keeping for one command: resolved settings, inputs, outputs."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = argv
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.file_values = read_flat_config(args.config) if args.config else {}
        for item in args.set or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"--set expects key=value, got {item!r}")
            self.file_values[key.strip().replace("-", "_")] = value.strip()
        self.config = {}
        self.inputs = {}
        self.outputs = []
        self.t0 = time.perf_counter()

    def value(self, key, default=None):
        """Flag if given, else config file, else ``default``."""
        v = getattr(self.args, key, None)
        if v is None:
            v = self.file_values.get(key, default)
        self.config[key] = v
        return v

    def dataclass_cfg(self, base, prefix, flags):
        """``base`` updated from the config file (bare or ``prefix``-ed keys), then flags."""
        cfg = apply_flat(base, self.file_values, prefix)
        updates = {k: getattr(self.args, k) for k in flags if getattr(self.args, k, None) is not None}
        cfg = apply_flat(cfg, updates)
        if hasattr(cfg, "seed") and self.args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=self.args.seed)
        self.config.update(flat(cfg, prefix))
        return cfg

    def input(self, name, path):
        self.inputs[name] = Path(path)
        return Path(path)

    def write(self, name, data: bytes) -> Path:
        path = self.out / name
        storage.atomic_write(path, data)
        self.outputs.append(path)
        return path

    def wrote(self, name) -> Path:
        path = self.out / name
        self.outputs.append(path)
        return path

    def finish(self):
        seed = self.args.seed if self.args.seed is not None else self.config.get("seed", 0)
        write_manifest(self.out, command=shlex.join(["logitcorrect", *self.argv]),
                       config={k: v for k, v in self.config.items()}, seed=seed,
                       inputs=self.inputs, outputs=self.outputs,
                       wall_time=time.perf_counter() - self.t0)


def _named_paths(items, what):
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep:
            raise ValueError(f"{what} expects name=path, got {item!r}")
        out[name] = path
    return out


def _load_data(run, key="data"):
    images, labels = storage.resolve_dataset(run.value(key))
    run.input(f"{key}_images", images)
    run.input(f"{key}_labels", labels)
    return classifier.Dataset(*storage.load_idx_dataset(images, labels))


def _load_records(run, path, name="logits", checkpoint=None):
    run.input(name, path)
    records, header = storage.load_logits_store(path, checkpoint)
    return records, header


def _load_net(run, path, name):
    run.input(name, path)
    return storage.load_checkpoint(path)[0]


# --------------------------------------------------------------------------- commands


def cmd_train_classifier(run):
    spec = run.dataclass_cfg(classifier.ClassifierSpec(), "classifier.",
                             ["arch", "epochs", "batch_size", "lr", "weight_decay"])
    data = _load_data(run)
    history = classifier.TrainLog()
    net = classifier.train_classifier(data, spec, history)
    storage.save_checkpoint(run.wrote("model.ckpt"), net, flat(spec))
    rows = [["epoch", "loss", "accuracy"]] + [[r["epoch"], repr(r["loss"]), repr(r["accuracy"])]
                                              for r in history.rows]
    if run.value("test") is not None:
        test = _load_data(run, "test")
        acc = classifier.evaluate_accuracy(net, test)
        run.write("test_accuracy.csv", csv_bytes([["correct", "total", "accuracy"],
                                                  [acc.correct, acc.total, repr(acc.value)]]))
        print(f"test accuracy {acc.value:.4f}")
    run.write("train_log.csv", csv_bytes(rows))


def _attack_config(run):
    name = run.value("attack")
    if name is None:
        raise ValueError("--attack is required")
    overrides = {}
    for f in dataclasses.fields(attacks.AttackConfig):
        if f.name == "attack":
            continue
        v = getattr(run.args, f.name, None)
        if v is None and f.name in run.file_values:
            v = run.file_values[f.name]
        if v is not None:
            overrides[f.name] = v
    if run.args.seed is not None:
        overrides["seed"] = run.args.seed
    base = attacks.preset(run.value("preset", "desk-mnist"), name)
    cfg = apply_flat(base, overrides)
    run.config.update(flat(cfg, "attack."))
    return cfg


def _attacked_records(run):
    cfg = _attack_config(run)
    model = run.input("model", run.value("model"))
    net = storage.load_checkpoint(model)[0]
    data = _load_data(run)
    per_class = run.value("select_per_class")
    indices = np.arange(len(data))
    if per_class is not None:
        data, manifest = classifier.select_correct_subset(net, data, int(per_class))
        indices = np.asarray(manifest["indices"], dtype=np.int64)
        run.write("selected.csv", csv_bytes([["position", "index", "label"]] +
                                            [[p, int(i), int(data.labels[p])] for p, i in enumerate(indices)]))
    offset = int(run.value("index_offset", 0))
    records, result, summary = defender.build_logits_dataset(
        net, cfg, data.images, data.labels, int(run.value("parallelism", 1)), indices + offset)
    storage.save_logits_store(run.wrote("logits.lgt"), records, cfg.attack, storage.sha256_file(model))
    run.write("summary.csv", csv_bytes([list(summary), [repr(v) if isinstance(v, float) else v
                                                        for v in summary.values()]]))
    print(f"{cfg.attack}: success rate {summary['success_rate']:.4f} over {summary['n']} examples")
    return records, result, summary


def cmd_attack(run):
    records, result, _ = _attacked_records(run)
    rows = [["position", "label", "success", "linf", "l2", "iterations", "note"]]
    rows += [[i, r.label, int(r.success), repr(float(result.linf[i])), repr(float(result.l2[i])),
              int(result.iterations[i]), result.notes[i]] for i, r in enumerate(records)]
    run.write("examples.csv", csv_bytes(rows))


def cmd_build_logits(run):
    _attacked_records(run)


def cmd_train_defender(run):
    cfg = run.dataclass_cfg(defender.DefenderConfig(), "defender.",
                            ["hidden", "keep", "p_clean", "epochs", "batch_size", "lr",
                             "weight_decay", "depth"])
    records, header = _load_records(run, run.value("logits"))
    history = defender.DefenderLog()
    g = defender.train_defender(records, cfg, history)
    storage.save_checkpoint(run.wrote("defender.ckpt"), g,
                            {**flat(cfg), "attack": header["attack"]})
    run.write("train_log.csv", csv_bytes(
        [["epoch", "loss", "clean_fraction"]] +
        [[r["epoch"], repr(r["loss"]), repr(r["clean_fraction"])] for r in history.rows]))


def cmd_evaluate(run):
    g = _load_net(run, run.value("defender"), "defender")
    records, header = _load_records(run, run.value("logits"))
    rep = defender.evaluate_defense(g, records, set_id=header["attack"])
    rows = [["attack", "metric", "correct", "total", "accuracy"]]
    rows += [[header["attack"], m, a.correct, a.total, repr(a.value)] for m, a in rep.rows()]
    run.write("evaluation.csv", csv_bytes(rows))
    for m, a in rep.rows():
        print(f"{m}: {a.value:.4f} ({a.correct}/{a.total})")


def _named_defenders_and_records(run):
    defs = _named_paths(run.args.defender, "--defender")
    logs = _named_paths(run.args.logits, "--logits")
    if not defs or not logs:
        raise ValueError("give at least one --defender name=path and one --logits name=path")
    run.config["defenders"] = defs
    run.config["logits"] = logs
    gs = {k: _load_net(run, p, f"defender_{k}") for k, p in defs.items()}
    recs = {k: _load_records(run, p, f"logits_{k}")[0] for k, p in logs.items()}
    return gs, recs


def cmd_transfer_matrix(run):
    gs, recs = _named_defenders_and_records(run)
    tm = defender.transfer_matrix(gs, recs)
    rows = [["attack\\defender", *tm.defenders]]
    rows += [[a, *[("" if c is None else repr(c.value)) for c in row]]
             for a, row in zip(tm.attacks, tm.table())]
    run.write("transfer.csv", csv_bytes(rows))


def _support(run, g, records):
    n = int(run.value("top_n", 3))
    ranking = run.value("ranking", "s")
    return analysis.supporting_classes(g, records, n, ranking)


def cmd_supporting_classes(run):
    g = _load_net(run, run.value("defender"), "defender")
    records, _ = _load_records(run, run.value("logits"))
    rep = _support(run, g, records)
    rank = {int(c): r + 1 for r, c in enumerate(rep.supporting)}
    run.write("supporting_classes.csv", csv_bytes(
        [["class", "count", "rank"]] + [[k, int(c), rank.get(k, "")] for k, c in enumerate(rep.counts)]))
    rows = [["position", "label", "rank", "class", "score"]]
    for i, (y, cls, vals) in enumerate(zip(rep.labels, rep.top_classes, rep.top_values)):
        rows += [[i, int(y), r + 1, int(c), repr(float(v))] for r, (c, v) in enumerate(zip(cls, vals))]
    run.write("per_record.csv", csv_bytes(rows))
    print("supporting classes:", " ".join(map(str, rep.supporting)))


def cmd_bhattacharyya(run):
    gs, recs = _named_defenders_and_records(run)
    missing = sorted(set(recs) - set(gs))
    if missing:
        raise ValueError(f"no defender given for {missing}")
    reports = {k: _support(run, gs[k], recs[k]) for k in recs}
    names, m = analysis.transfer_prediction_report(reports)
    run.write("bhattacharyya.csv", csv_bytes(
        [["attack", *names]] + [[a, *[repr(float(v)) for v in row]] for a, row in zip(names, m)]))


def cmd_knockout(run):
    g = _load_net(run, run.value("defender"), "defender")
    records, _ = _load_records(run, run.value("logits"))
    classes = run.value("classes")
    if classes is None:
        classes = [int(c) for c in _support(run, g, records).supporting]
    else:
        classes = [int(c) for c in str(classes).split(",") if c.strip()]
    delta = float(run.value("delta", 20.0))
    k = analysis.knockout_test(g, records, classes, delta)
    run.write("knockout.csv", csv_bytes([
        ["delta", "classes", "before", "after", "drop"],
        [repr(k["delta"]), " ".join(map(str, k["classes"])), repr(k["before"].value),
         repr(k["after"].value), repr(k["before"].value - k["after"].value)]]))
    print(f"corrected accuracy {k['before'].value:.4f} -> {k['after'].value:.4f}")


def cmd_logits_hist(run):
    records, _ = _load_records(run, run.value("logits"))
    z, z_adv, _ = defender.stack(records)
    h = analysis.logits_mean_histogram(z, z_adv, int(run.value("bins", 20)))
    run.write("logits_hist.csv", csv_bytes(histogram_rows(h)))
    print(f"mean gap {h['gap']:.4f} = {h['gap_in_se']:.2f} standard errors")


def cmd_experiment(run):
    values = dict(run.file_values)
    for key in ("data", "preset", "attacks", "parallelism"):
        v = getattr(run.args, key, None)
        if v is not None:
            values[key] = v
    if run.args.seed is not None:
        values["classifier.seed"] = run.args.seed
        values["defender.seed"] = run.args.seed
    cfg = experiment.ExperimentConfig.from_flat(values)
    run.config.update(cfg.to_flat())
    cache = experiment.StageCache(Path(run.value("cache") or run.out / "cache"))
    res = experiment.run(cfg, run.out, cache)
    for p in experiment.write_reports(res, run.out):
        if p.suffix == ".csv":
            run.outputs.append(p)
    for name, rep in res.reports.items():
        print(f"{name}: adversarial corrected {rep.adv_corrected.value:.4f}, "
              f"clean corrected {rep.clean_corrected.value:.4f}")


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    def shared(defaults):
        # subcommands repeat the global options; SUPPRESS keeps a value given
        # before the command from being reset by the subparser default
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        c = argparse.ArgumentParser(add_help=False)
        c.add_argument("--seed", type=int, default=d(None),
                       help="seed for every random choice in the command")
        c.add_argument("--config", default=d(None), help="flat key=value file; flags override it")
        c.add_argument("--out", default=d("runs/latest"), help="output directory")
        c.add_argument("--set", action="append", default=d(None), metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        c.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return c

    top, common = shared(True), shared(False)

    p = argparse.ArgumentParser(prog="logitcorrect", parents=[top],
                                description="Adversarial logits correction experiments.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train-classifier", cmd_train_classifier, "train the attacked classifier")
    sp.add_argument("--data", help="training IDX prefix or images file")
    sp.add_argument("--test", help="optional held-out IDX prefix for a test accuracy")
    sp.add_argument("--arch", choices=["cnn-small", "mlp-2h"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--weight-decay", type=float)

    for name, fn, help_ in (("attack", cmd_attack, "attack a dataset; logits store, summary and per-example CSV"),
                            ("build-logits", cmd_build_logits, "build a logits dataset for defender training")):
        sp = add(name, fn, help_)
        sp.add_argument("--attack", choices=list(attacks.ATTACKS))
        sp.add_argument("--preset", choices=sorted(attacks.PRESETS))
        sp.add_argument("--model", help="classifier checkpoint")
        sp.add_argument("--data", help="IDX prefix or images file")
        sp.add_argument("--select-per-class", type=int,
                        help="keep only the first N correctly classified examples of each class")
        sp.add_argument("--index-offset", type=int,
                        help="added to example positions when seeding per-example randomness")
        sp.add_argument("--parallelism", type=int)
        for f in ("eps", "alpha", "mu", "overshoot", "c0", "kappa", "cw_lr"):
            sp.add_argument("--" + f.replace("_", "-"), type=float)
        for f in ("steps", "candidates", "max_iter", "cw_steps", "search_steps"):
            sp.add_argument("--" + f.replace("_", "-"), type=int)

    sp = add("train-defender", cmd_train_defender, "train a defender on a logits store")
    sp.add_argument("--logits")
    sp.add_argument("--hidden", type=int)
    sp.add_argument("--keep", type=float)
    sp.add_argument("--p-clean", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--weight-decay", type=float)
    sp.add_argument("--depth", choices=["two-layer", "single-layer"])

    sp = add("evaluate", cmd_evaluate, "clean and adversarial accuracy with and without a defender")
    sp.add_argument("--defender")
    sp.add_argument("--logits")

    sp = add("transfer-matrix", cmd_transfer_matrix, "defenders x attacks corrected accuracy")
    sp.add_argument("--defender", action="append", metavar="NAME=PATH")
    sp.add_argument("--logits", action="append", metavar="NAME=PATH")

    sp = add("analyze", None, "explain defenders")
    asub = sp.add_subparsers(dest="analysis", required=True, metavar="ANALYSIS")

    def add_a(name, fn, help_, multi=False):
        ap = asub.add_parser(name, parents=[common], help=help_)
        ap.set_defaults(fn=fn)
        if multi:
            ap.add_argument("--defender", action="append", metavar="NAME=PATH")
            ap.add_argument("--logits", action="append", metavar="NAME=PATH")
        else:
            ap.add_argument("--defender")
            ap.add_argument("--logits")
        return ap

    for ap in (add_a("supporting-classes", cmd_supporting_classes, "top-n supporting classes"),
               add_a("bhattacharyya", cmd_bhattacharyya, "overlap of supporting classes", multi=True),
               add_a("knockout", cmd_knockout, "lower supporting-class logits and re-evaluate")):
        ap.add_argument("--top-n", type=int)
        ap.add_argument("--ranking", choices=["s", "h"])
    ap.add_argument("--delta", type=float)
    ap.add_argument("--classes", help="comma-separated classes; default: discovered supporting classes")
    ap = asub.add_parser("logits-hist", parents=[common], help="histogram of per-image mean logits")
    ap.set_defaults(fn=cmd_logits_hist)
    ap.add_argument("--logits")
    ap.add_argument("--bins", type=int)

    sp = add("experiment", cmd_experiment, "the full desk-scale pipeline with cached stages")
    sp.add_argument("--data")
    sp.add_argument("--preset", choices=sorted(attacks.PRESETS))
    sp.add_argument("--attacks", help="comma-separated, e.g. pgd,mim,deepfool,cw")
    sp.add_argument("--parallelism", type=int)
    sp.add_argument("--cache", help="stage cache directory (default <out>/cache)")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)  # usage errors exit 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args, argv)
        args.fn(run)
        run.finish()
    except Exception as e:  # one machine-parsable line, then a nonzero exit
        msg = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
