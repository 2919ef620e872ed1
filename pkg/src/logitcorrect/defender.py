"""Adversarial logits correction: logits datasets and the two-layer defender g."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import attacks, nn
from .classifier import Accuracy, batch_logits

log = logging.getLogger(__name__)


@dataclass(eq=False)
class LogitsRecord:
    z: np.ndarray  # clean logits, (C,)
    z_adv: np.ndarray  # logits of the attacked image, (C,)
    label: int
    attack: str
    source: int = 0  # position of the example in the attacked batch
    success: bool = False

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float32)
        self.z_adv = np.asarray(self.z_adv, dtype=np.float32)
        if self.z.ndim != 1 or self.z.shape != self.z_adv.shape:
            raise ValueError(f"logits shapes differ: {self.z.shape} vs {self.z_adv.shape}")
        if not (np.isfinite(self.z).all() and np.isfinite(self.z_adv).all()):
            raise ValueError("logits must be finite")

    def __eq__(self, other):
        if not isinstance(other, LogitsRecord):
            return NotImplemented
        return (self.label == other.label and self.attack == other.attack
                and self.source == other.source and self.success == other.success
                and self.z.tobytes() == other.z.tobytes()
                and self.z_adv.tobytes() == other.z_adv.tobytes())


def stack(records):
    """(clean logits, adversarial logits, labels) as arrays."""
    if not records:
        raise ValueError("no records")
    return (np.stack([r.z for r in records]), np.stack([r.z_adv for r in records]),
            np.array([r.label for r in records], dtype=np.int64))


@dataclass
class DefenderConfig:
    hidden: int = 512
    keep: float = 0.5
    p_clean: float = 0.3
    epochs: int = 1000  # ~16k Adam steps on 4000 records
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    depth: str = "two-layer"  # or "single-layer"

    def __post_init__(self):
        if not 0.0 <= self.p_clean <= 1.0:
            raise ValueError("p_clean must be in [0, 1]")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.depth not in ("two-layer", "single-layer"):
            raise ValueError(f"unknown depth {self.depth!r}")


# ImageNet-scale settings, for reference and for the CLI preset
PAPER_DEFENDER = DefenderConfig(hidden=10_000, keep=0.5, p_clean=0.3, epochs=50,
                                batch_size=256, lr=5e-5, weight_decay=1e-4)


def defender_arch(num_classes: int, cfg: DefenderConfig) -> str:
    c = num_classes
    if cfg.depth == "single-layer":
        return f"dense({c},{c})"
    return f"dense({c},{cfg.hidden}) relu dropout({cfg.keep!r}) dense({cfg.hidden},{c})"


def identity_defender(num_classes: int) -> nn.Network:
    net = nn.build_network(f"dense({num_classes},{num_classes})", num_classes,
                           input_shape=(num_classes,))
    return net.with_params([np.eye(num_classes, dtype=np.float32),
                            np.zeros(num_classes, np.float32)])


def build_logits_dataset(net, config: attacks.AttackConfig, images, labels,
                         parallelism: int = 1, indices=None):
    """One record per example: clean logits, attacked logits, label, success flag.

    Failed attacks are kept with whatever image the attack produced. A record's
    ``source`` is its position in the batch (the logits store keeps order, not
    ids); ``indices`` only seeds per-example randomness. Returns
    (records, AttackResult, summary).
    """
    images = np.asarray(images, dtype=np.float32)
    indices = np.arange(len(images)) if indices is None else np.asarray(indices)
    result, summary = attacks.attack_dataset(net, images, labels, config, parallelism, indices)
    z = batch_logits(net, images)
    z_adv = batch_logits(net, result.x_adv)
    records = [LogitsRecord(z[i], z_adv[i], int(labels[i]), config.attack,
                            i, bool(result.success[i]))
               for i in range(len(images))]
    return records, result, summary


def clean_mask_batches(n: int, cfg: DefenderConfig, rng):
    """Yield (example indices, take-clean mask) per mini-batch for one epoch.

    Each example independently takes its clean logits with probability p.
    """
    order = rng.permutation(n)
    clean = rng.random(n) < cfg.p_clean
    for s in range(0, n, cfg.batch_size):
        idx = order[s:s + cfg.batch_size]
        yield idx, clean[idx]


@dataclass
class DefenderLog:
    rows: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)
        log.debug("defender epoch %(epoch)d loss %(loss).4f clean %(clean_fraction).3f", row)


def train_defender(records, cfg: DefenderConfig, history: DefenderLog | None = None) -> nn.Network:
    z, z_adv, y = stack(records)
    c = z.shape[1]
    g = nn.build_network(defender_arch(c, cfg), c, cfg.seed, (c,))
    state = nn.OptimizerState("adam", lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 2])
    history = history if history is not None else DefenderLog()
    n = len(y)
    for epoch in range(1, cfg.epochs + 1):
        total, n_clean = 0.0, 0
        for idx, clean in clean_mask_batches(n, cfg, rng):
            inputs = np.where(clean[:, None], z[idx], z_adv[idx])
            tr = nn.forward(g, inputs, "train", rng=rng)
            loss, grad = nn.softmax_cross_entropy(tr.logits, y[idx])
            grads, _ = nn.backward(g, tr, grad)
            params, state = nn.optimizer_step(state, g.params(), grads)
            g = g.with_params(params)
            total += loss * len(idx)
            n_clean += int(clean.sum())
        history.add(epoch=epoch, loss=total / n, clean_fraction=n_clean / n)
    return g


def correct_logits(g: nn.Network, z) -> np.ndarray:
    """Eval-mode pass of the defender on one logits vector (C,) or a batch (N, C)."""
    z = np.asarray(z, dtype=np.float32)
    if z.ndim == 1:
        return nn.logits(g, z[None])[0]
    return nn.logits(g, z)


def _accuracy(pred, y) -> Accuracy:
    return Accuracy(int((pred == y).sum()), len(y))


def corrected_accuracy(g, logits, y) -> Accuracy:
    return _accuracy(nn.predict(correct_logits(g, logits)), y)


@dataclass
class DefenseEvalReport:
    set_id: str
    n: int
    clean_no_defense: Accuracy | None = None
    clean_corrected: Accuracy | None = None
    adv_no_defense: Accuracy | None = None
    adv_corrected: Accuracy | None = None

    def rows(self):
        for name in ("clean_no_defense", "clean_corrected", "adv_no_defense", "adv_corrected"):
            a = getattr(self, name)
            if a is not None:
                yield name, a


def evaluate_defense(g, records, which=("clean", "adversarial"), set_id: str = "selected") -> DefenseEvalReport:
    if not records:
        raise ValueError("no records to evaluate")
    if isinstance(which, str):
        which = (which,)
    z, z_adv, y = stack(records)
    rep = DefenseEvalReport(set_id, len(y))
    if "clean" in which:
        rep.clean_no_defense = _accuracy(nn.predict(z), y)
        rep.clean_corrected = corrected_accuracy(g, z, y)
    if "adversarial" in which:
        rep.adv_no_defense = _accuracy(nn.predict(z_adv), y)
        rep.adv_corrected = corrected_accuracy(g, z_adv, y)
    return rep


@dataclass
class TransferMatrix:
    attacks: list  # rows: attack that produced the records
    defenders: list  # columns: attack the defender was trained on
    cells: dict  # (attack, defender) -> Accuracy; missing pairs are absent

    def get(self, attack, defender):
        return self.cells.get((attack, defender))

    def table(self):
        return [[self.cells.get((a, d)) for d in self.defenders] for a in self.attacks]


def transfer_matrix(defenders: dict, record_sets: dict) -> TransferMatrix:
    """Adversarial corrected accuracy of each defender on each attack's records."""
    sizes = {g.num_classes for g in defenders.values() if g is not None}
    if len(sizes) > 1:
        raise ValueError(f"defenders disagree on the class count: {sorted(sizes)}")
    cells = {}
    for a, recs in record_sets.items():
        if not recs:
            continue
        _, z_adv, y = stack(recs)
        for d, g in defenders.items():
            if g is not None:
                cells[(a, d)] = corrected_accuracy(g, z_adv, y)
    return TransferMatrix(list(record_sets), list(defenders), cells)
