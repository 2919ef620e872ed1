"""Explaining a trained defender: Jacobians, support scores, supporting classes,
Bhattacharyya overlap between attacks, knock-out tests and logit-mean histograms."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .classifier import Accuracy
from .defender import correct_logits, stack


def defender_jacobian(g: nn.Network, z) -> np.ndarray:
    """H[i, k] = d g(z)_i / d z_k in eval mode, one reverse pass per output row.

    ``z`` of shape (C,) gives (C, C); a batch (N, C) gives (N, C, C).
    """
    z = np.asarray(z, dtype=np.float32)
    single = z.ndim == 1
    zb = z[None] if single else z
    tr = nn.forward(g, zb)
    c_out = g.num_classes
    H = np.zeros((len(zb), c_out, zb.shape[1]), dtype=np.float64)
    for i in range(c_out):
        seed = np.zeros((len(zb), c_out))
        seed[:, i] = 1.0
        _, gz = nn.backward(g, tr, seed, params=False)
        H[:, i, :] = gz
    return H[0] if single else H


def support_scores(H, label) -> np.ndarray:
    """S_k = H[i, k] - mean_l H[l, k] for true label i (batched over a leading axis)."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim == 2:
        if not 0 <= label < H.shape[0]:
            raise ValueError(f"label {label} out of range")
        return H[label] - H.mean(axis=0)
    label = np.asarray(label)
    return H[np.arange(len(H)), label] - H.mean(axis=1)


def top_n(scores, n: int) -> np.ndarray:
    """Indices of the n largest entries per row, descending; ties to the lower index."""
    scores = np.asarray(scores)
    return np.argsort(-scores, axis=-1, kind="stable")[..., :n]


@dataclass
class SupportReport:
    labels: np.ndarray  # (N,)
    top_classes: np.ndarray  # (N, n) per-record top-n classes
    top_values: np.ndarray  # (N, n) their scores
    counts: np.ndarray  # (C,) appearances in the per-record top-n lists
    supporting: np.ndarray  # the n most frequent classes
    ranking: str = "s"

    @property
    def supporting_counts(self) -> np.ndarray:
        return self.counts[self.supporting]

    def distribution(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            raise ValueError("empty support report")
        return self.counts / total


def supporting_classes(g: nn.Network, records, n: int, ranking: str = "s") -> SupportReport:
    """Rank classes per adversarial record by S_k (``ranking="s"``) or by the
    true-label Jacobian row H[i, k] (``ranking="h"``); count top-n appearances."""
    _, z_adv, y = stack(records)
    H = defender_jacobian(g, z_adv)
    if ranking == "s":
        scores = support_scores(H, y)
    elif ranking == "h":
        scores = H[np.arange(len(y)), y]
    else:
        raise ValueError(f"ranking must be 's' or 'h', got {ranking!r}")
    top = top_n(scores, n)
    values = np.take_along_axis(scores, top, axis=1)
    counts = np.bincount(top.ravel(), minlength=H.shape[2])
    return SupportReport(y, top, values, counts, top_n(counts, n), ranking)


def bhattacharyya(p, q) -> float:
    """sum_k sqrt(p_k q_k) for two normalised distributions over the same classes."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"distributions must be 1-D and equal length, got {p.shape}, {q.shape}")
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} is not a normalised distribution (sum {d.sum()!r})")
    return min(1.0, math.fsum(np.sqrt(p * q)))


def transfer_prediction_report(reports: dict):
    """Pairwise Bhattacharyya coefficients between supporting-class distributions.

    Returns (names, symmetric matrix with unit diagonal).
    """
    names = list(reports)
    if len(names) < 2:
        raise ValueError("need at least two reports")
    sizes = {len(r.counts) for r in reports.values()}
    if len(sizes) != 1:
        raise ValueError(f"reports cover different class counts: {sorted(sizes)}")
    dists = [reports[k].distribution() for k in names]
    m = np.eye(len(names))
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            m[a, b] = m[b, a] = bhattacharyya(dists[a], dists[b])
    return names, m


def knockout(z, classes, delta: float) -> np.ndarray:
    z = np.array(z, dtype=np.float32, copy=True)
    z[..., list(classes)] -= np.float32(delta)
    return z


def knockout_test(g: nn.Network, records, classes, delta: float = 20.0) -> dict:
    """Corrected accuracy on adversarial logits before and after lowering ``classes`` by delta."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    _, z_adv, y = stack(records)
    before = nn.predict(correct_logits(g, z_adv))
    after = nn.predict(correct_logits(g, knockout(z_adv, classes, delta)))
    return {"before": Accuracy(int((before == y).sum()), len(y)),
            "after": Accuracy(int((after == y).sum()), len(y)),
            "classes": [int(c) for c in classes], "delta": float(delta)}


def logits_mean_histogram(clean_logits, adv_logits, bins: int = 20) -> dict:
    """Histogram the per-image mean logit of two populations on shared edges."""
    a = np.asarray(clean_logits, dtype=np.float64)
    b = np.asarray(adv_logits, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both populations must be nonempty")
    ma, mb = a.mean(axis=1), b.mean(axis=1)
    pooled = np.concatenate([ma, mb])
    edges = np.histogram_bin_edges(pooled, bins=bins, range=(pooled.min(), pooled.max()))
    se = math.sqrt(ma.var(ddof=1) / len(ma) + mb.var(ddof=1) / len(mb)) if min(len(ma), len(mb)) > 1 else float("nan")
    gap = float(mb.mean() - ma.mean())
    return {"edges": edges, "clean_counts": np.histogram(ma, edges)[0],
            "adv_counts": np.histogram(mb, edges)[0],
            "clean_mean": float(ma.mean()), "adv_mean": float(mb.mean()),
            "gap": gap, "standard_error": se,
            "gap_in_se": gap / se if se and np.isfinite(se) else float("inf")}
