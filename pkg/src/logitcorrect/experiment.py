"""Desk-scale end-to-end run: classifier, logits datasets, defenders and reports.

Every expensive stage is stored in the package's own formats under
``<out>/cache`` with a key covering its configuration, its inputs and the
package source, so re-running with unchanged settings only re-does the cheap
evaluation and rewrites identical reports.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, attacks, classifier, defender, storage
from .config import apply_flat, flat

log = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).resolve().parent


@dataclass
class ExperimentConfig:
    data: str = "data/mnist5k"  # prefix of <data>/train-* and <data>/test-* IDX files
    preset: str = "desk-mnist"
    attacks: tuple = ("pgd", "mim", "deepfool", "cw")
    per_class: int = 100  # selected-set size per class
    top_n: int = 3
    ranking: str = "s"
    delta: float = 20.0
    bins: int = 20
    parallelism: int = 1
    classifier: classifier.ClassifierSpec = field(
        default_factory=lambda: classifier.ClassifierSpec(epochs=10))
    defender: defender.DefenderConfig = field(default_factory=defender.DefenderConfig)

    def to_flat(self) -> dict:
        top = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
               if f.name not in ("classifier", "defender")}
        top["attacks"] = ",".join(self.attacks)
        return {**top, **flat(self.classifier, "classifier."), **flat(self.defender, "defender.")}

    @classmethod
    def from_flat(cls, values: dict) -> "ExperimentConfig":
        base = cls()
        cfg = apply_flat(base, {k: v for k, v in values.items() if "." not in k})
        cfg.classifier = apply_flat(base.classifier, _prefixed(values, "classifier."))
        cfg.defender = apply_flat(base.defender, _prefixed(values, "defender."))
        if isinstance(cfg.attacks, str):
            cfg.attacks = tuple(a.strip() for a in cfg.attacks.split(",") if a.strip())
        return cfg


def _prefixed(values, prefix):
    return {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}


# modules whose code determines cached stage outputs
NUMERIC_MODULES = ("nn.py", "classifier.py", "attacks.py", "defender.py", "storage.py")


def source_hash() -> str:
    h = hashlib.sha256()
    for p in (PACKAGE_DIR / name for name in NUMERIC_MODULES):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


class StageCache:
    """Content-keyed files for expensive stages, each with a timing sidecar."""

    def __init__(self, root, salt: str | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.salt = source_hash() if salt is None else salt

    def path(self, stage: str, payload: dict, suffix: str) -> Path:
        blob = json.dumps(payload, sort_keys=True, default=str) + self.salt
        return self.root / f"{stage}-{hashlib.sha256(blob.encode()).hexdigest()[:16]}{suffix}"

    def seconds(self, path: Path) -> float:
        side = path.with_name(path.name + ".json")
        return json.loads(side.read_text())["seconds"] if side.exists() else float("nan")

    def record(self, path: Path, seconds: float, **extra) -> None:
        side = path.with_name(path.name + ".json")
        storage.atomic_write(side, json.dumps({"seconds": seconds, **extra}, sort_keys=True).encode())

    def extra(self, path: Path) -> dict:
        return json.loads(path.with_name(path.name + ".json").read_text())


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    test_accuracy: classifier.Accuracy
    selected: dict  # manifest from select_correct_subset
    attack_summaries: dict  # (split, attack) -> summary dict
    reports: dict  # attack -> DefenseEvalReport of the matched defender on selected records
    transfer: defender.TransferMatrix
    ablation: dict  # depth -> DefenseEvalReport on the PGD selected records
    support: dict  # attack -> SupportReport
    bc_names: list
    bc: np.ndarray
    knockout: dict | None
    histogram: dict | None
    seconds: dict  # stage -> wall seconds (from the cache sidecars when reused)
    paths: dict = field(default_factory=dict)


def load_split(prefix: str, split: str) -> classifier.Dataset:
    images, labels = storage.load_idx_dataset(*storage.resolve_dataset(f"{prefix}/{split}"))
    return classifier.Dataset(images, labels)


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


def run(cfg: ExperimentConfig, out_dir, cache: StageCache | None = None) -> ExperimentResult:
    out_dir = Path(out_dir)
    cache = cache or StageCache(out_dir / "cache")
    seconds = {}
    train = load_split(cfg.data, "train")
    test = load_split(cfg.data, "test")
    data_key = {"train": storage.sha256_file(storage.resolve_dataset(f"{cfg.data}/train")[0]),
                "test": storage.sha256_file(storage.resolve_dataset(f"{cfg.data}/test")[0])}

    # classifier
    ckpt = cache.path("classifier", {"spec": flat(cfg.classifier), "data": data_key}, ".ckpt")
    if not ckpt.exists():
        log.info("training classifier")
        net, dt = _timed(lambda: classifier.train_classifier(train, cfg.classifier))
        storage.save_checkpoint(ckpt, net, flat(cfg.classifier))
        cache.record(ckpt, dt)
    net, _ = storage.load_checkpoint(ckpt)
    seconds["classifier"] = cache.seconds(ckpt)
    ckpt_sha = storage.sha256_file(ckpt)
    test_acc = classifier.evaluate_accuracy(net, test)
    selected, manifest = classifier.select_correct_subset(net, test, cfg.per_class)
    sets = {"train": (train, np.arange(len(train))),
            "selected": (selected, np.asarray(manifest["indices"], dtype=np.int64) + len(train))}

    # logits datasets
    records, summaries = {}, {}
    for name in cfg.attacks:
        acfg = attacks.preset(cfg.preset, name, seed=cfg.classifier.seed)
        for split, (data, idx) in sets.items():
            store = cache.path(f"{split}-{name}", {"attack": dataclasses.asdict(acfg),
                                                   "classifier": ckpt_sha,
                                                   "indices": hashlib.sha256(idx.tobytes()).hexdigest()},
                               ".lgt")
            if not store.exists():
                log.info("attacking %s split with %s", split, name)
                (recs, _, summary), dt = _timed(lambda: defender.build_logits_dataset(
                    net, acfg, data.images, data.labels, cfg.parallelism, idx))
                storage.save_logits_store(store, recs, name, ckpt_sha)
                cache.record(store, dt, summary=summary)
            records[(split, name)], _ = storage.load_logits_store(store, ckpt)
            summaries[(split, name)] = cache.extra(store)["summary"]
            seconds[f"attack-{split}-{name}"] = cache.seconds(store)

    # defenders
    def trained(name, dcfg):
        store_sha = hashlib.sha256(b"".join(r.z.tobytes() + r.z_adv.tobytes()
                                            for r in records[("train", name)])).hexdigest()
        path = cache.path(f"defender-{name}-{dcfg.depth}", {"cfg": flat(dcfg), "records": store_sha}, ".ckpt")
        if not path.exists():
            log.info("training %s defender on %s", dcfg.depth, name)
            g, dt = _timed(lambda: defender.train_defender(records[("train", name)], dcfg))
            storage.save_checkpoint(path, g, flat(dcfg))
            cache.record(path, dt)
        seconds[f"defender-{name}-{dcfg.depth}"] = cache.seconds(path)
        return storage.load_checkpoint(path)[0]

    defenders = {name: trained(name, cfg.defender) for name in cfg.attacks}
    selected_records = {name: records[("selected", name)] for name in cfg.attacks}
    reports = {name: defender.evaluate_defense(defenders[name], selected_records[name], set_id="selected")
               for name in cfg.attacks}
    transfer = defender.transfer_matrix(defenders, selected_records)

    ablation, knock, hist = {}, None, None
    if "pgd" in cfg.attacks:
        single = trained("pgd", dataclasses.replace(cfg.defender, depth="single-layer"))
        ablation = {"two-layer": reports["pgd"],
                    "single-layer": defender.evaluate_defense(single, selected_records["pgd"])}
        z, z_adv, _ = defender.stack(selected_records["pgd"])
        hist, seconds["histogram"] = _timed(lambda: analysis.logits_mean_histogram(z, z_adv, cfg.bins))

    # analyses are cheap and always recomputed, so their timings are live
    support = {}
    for name in cfg.attacks:
        support[name], seconds[f"support-{name}"] = _timed(lambda: analysis.supporting_classes(
            defenders[name], selected_records[name], cfg.top_n, cfg.ranking))
    (bc_names, bc), seconds["bhattacharyya"] = _timed(
        lambda: analysis.transfer_prediction_report(support) if len(support) > 1
        else (list(support), np.ones((len(support), len(support)))))
    if "pgd" in cfg.attacks:
        knock, seconds["knockout"] = _timed(lambda: analysis.knockout_test(
            defenders["pgd"], selected_records["pgd"], support["pgd"].supporting, cfg.delta))

    return ExperimentResult(cfg, test_acc, manifest, summaries, reports, transfer, ablation,
                            support, bc_names, bc, knock, hist, seconds,
                            {"classifier": ckpt})


# --------------------------------------------------------------------------- reports


def csv_bytes(rows) -> bytes:
    buf = io.StringIO(newline="")
    csv.writer(buf, lineterminator="\r\n").writerows(rows)
    return buf.getvalue().encode("utf-8")


def _acc_cells(a):
    return ["", "", ""] if a is None else [a.correct, a.total, repr(a.value)]


def report_tables(res: ExperimentResult) -> dict:
    """File name -> CSV rows. Contents depend only on configuration and seeds."""
    t = {}
    t["accuracy.csv"] = [["attack", "metric", "correct", "total", "accuracy"]]
    t["accuracy.csv"] += [["none", "clean_test", *_acc_cells(res.test_accuracy)]]
    for name, rep in res.reports.items():
        t["accuracy.csv"] += [[name, metric, *_acc_cells(a)] for metric, a in rep.rows()]
    t["attacks.csv"] = [["split", "attack", "n", "success_rate", "mean_linf", "mean_l2",
                         "mean_iterations", "errors"]]
    t["attacks.csv"] += [[split, name, s["n"], repr(s["success_rate"]), repr(s["mean_linf"]),
                          repr(s["mean_l2"]), repr(s["mean_iterations"]), s["errors"]]
                         for (split, name), s in res.attack_summaries.items()]
    tm = res.transfer
    t["transfer.csv"] = [["attack\\defender", *tm.defenders]]
    t["transfer.csv"] += [[a, *[("" if c is None else repr(c.value)) for c in row]]
                          for a, row in zip(tm.attacks, tm.table())]
    if res.ablation:
        t["ablation.csv"] = [["depth", "metric", "correct", "total", "accuracy"]]
        t["ablation.csv"] += [[d, m, *_acc_cells(a)] for d, rep in res.ablation.items()
                              for m, a in rep.rows()]
    t["supporting_classes.csv"] = [["attack", "class", "count", "rank"]]
    for name, rep in res.support.items():
        rank = {int(c): r + 1 for r, c in enumerate(rep.supporting)}
        t["supporting_classes.csv"] += [[name, k, int(n), rank.get(k, "")]
                                        for k, n in enumerate(rep.counts)]
    t["bhattacharyya.csv"] = [["attack", *res.bc_names]]
    t["bhattacharyya.csv"] += [[a, *[repr(float(v)) for v in row]] for a, row in zip(res.bc_names, res.bc)]
    if res.knockout:
        k = res.knockout
        t["knockout.csv"] = [["delta", "classes", "before", "after", "drop"],
                             [repr(k["delta"]), " ".join(map(str, k["classes"])),
                              repr(k["before"].value), repr(k["after"].value),
                              repr(k["before"].value - k["after"].value)]]
    if res.histogram:
        t["logits_hist.csv"] = histogram_rows(res.histogram)
    return t


def histogram_rows(h: dict) -> list:
    rows = [["bin", "left", "right", "clean", "adversarial"]]
    e = h["edges"]
    rows += [[i, repr(float(e[i])), repr(float(e[i + 1])), int(a), int(b)]
             for i, (a, b) in enumerate(zip(h["clean_counts"], h["adv_counts"]))]
    rows += [["clean_mean", repr(h["clean_mean"])], ["adv_mean", repr(h["adv_mean"])],
             ["gap", repr(h["gap"])], ["standard_error", repr(h["standard_error"])]]
    return rows


def write_reports(res: ExperimentResult, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, rows in report_tables(res).items():
        storage.atomic_write(out_dir / name, csv_bytes(rows))
        paths.append(out_dir / name)
    storage.atomic_write(out_dir / "timings.json",
                         (json.dumps(res.seconds, indent=2, sort_keys=True) + "\n").encode())
    return paths
