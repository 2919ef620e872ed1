"""Non-targeted white-box attacks: FGSM, PGD, MIM, DeepFool and C&W (L2).

Every attack works on a batch ``x`` of shape (N, ...) with labels ``y`` and
returns an :class:`AttackResult`. Examples are independent of one another:
the only randomness (PGD's start) comes from a per-example generator seeded
by ``(config.seed, index)``.
"""
from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nn

log = logging.getLogger(__name__)

ATTACKS = ("fgsm", "pgd", "mim", "deepfool", "cw")
CHUNK = 100  # examples per work unit in attack_dataset; fixed for reproducibility


@dataclass(frozen=True)
class AttackConfig:
    attack: str
    eps: float = 0.2
    alpha: float | None = None  # step size; MIM defaults to eps / steps
    steps: int = 10
    mu: float = 1.0
    candidates: int = 10  # DeepFool: most-likely classes searched, incl. the predicted one
    max_iter: int = 100
    overshoot: float = 0.02
    cw_steps: int = 25
    search_steps: int = 4
    c0: float = 10.0
    kappa: float = 0.0
    cw_lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack!r}; choose from {ATTACKS}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.attack == "pgd" and self.alpha is None:
            raise ValueError("pgd needs a step size alpha")
        for name in ("steps", "candidates", "max_iter", "cw_steps", "search_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cw_lr <= 0 or self.c0 <= 0 or self.overshoot < 0:
            raise ValueError("cw_lr and c0 must be > 0, overshoot >= 0")

    @property
    def step_size(self) -> float:
        if self.attack == "fgsm":
            return self.eps
        return self.alpha if self.alpha is not None else self.eps / self.steps


PRESETS = {
    # ImageNet settings used against the pretrained models
    "paper-imagenet": dict(eps=16 / 255, alpha=2 / 255, steps=10, mu=1.0, candidates=10,
                           max_iter=100, overshoot=0.02, cw_steps=25, search_steps=4,
                           c0=10.0, kappa=0.0, cw_lr=0.01),
    # 28x28 digits need a larger l_inf budget and a longer C&W schedule
    "desk-mnist": dict(eps=0.2, alpha=0.04, steps=10, mu=1.0, candidates=10,
                       max_iter=100, overshoot=0.02, cw_steps=50, search_steps=4,
                       c0=10.0, kappa=0.0, cw_lr=0.1),
}


def preset(name: str, attack: str, **overrides) -> AttackConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[name])
    if attack == "mim":
        values["alpha"] = None  # eps / T
    values.update(overrides)
    return AttackConfig(attack=attack, **values)


@dataclass(frozen=True)
class AttackOutcome:
    x_adv: np.ndarray
    success: bool
    linf: float
    l2: float
    iterations: int
    note: str = ""


@dataclass
class AttackResult:
    x_adv: np.ndarray  # float32, same shape as the input batch
    success: np.ndarray  # argmax f(x_adv) != y
    iterations: np.ndarray
    x: np.ndarray
    notes: list | None = None

    def __post_init__(self):
        if self.notes is None:
            self.notes = [""] * len(self.success)

    @property
    def linf(self) -> np.ndarray:
        d = self.x_adv.astype(np.float64) - self.x.astype(np.float64)
        return np.abs(d).reshape(len(d), -1).max(axis=1, initial=0.0)

    @property
    def l2(self) -> np.ndarray:
        d = self.x_adv.astype(np.float64) - self.x.astype(np.float64)
        return np.sqrt((d.reshape(len(d), -1) ** 2).sum(axis=1))

    def __len__(self):
        return len(self.success)

    def outcome(self, i: int) -> AttackOutcome:
        return AttackOutcome(self.x_adv[i], bool(self.success[i]), float(self.linf[i]),
                             float(self.l2[i]), int(self.iterations[i]), self.notes[i])

    def outcomes(self) -> list:
        return [self.outcome(i) for i in range(len(self))]

    @staticmethod
    def concat(parts) -> "AttackResult":
        return AttackResult(np.concatenate([p.x_adv for p in parts]),
                            np.concatenate([p.success for p in parts]),
                            np.concatenate([p.iterations for p in parts]),
                            np.concatenate([p.x for p in parts]),
                            [n for p in parts for n in p.notes])


# --------------------------------------------------------------------------- helpers


def _flat_sum(a):
    return a.reshape(len(a), -1).sum(axis=1)


def _expand(v, like):
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def project_linf(v, x, eps: float) -> np.ndarray:
    """Clip ``v`` into the l_inf ball of radius eps around ``x``, then into [0, 1].

    The float32 result satisfies |out - x| <= eps exactly when both are read
    as float64; values that rounding pushed outside are nudged back by an ulp.
    """
    x64 = x.astype(np.float64)
    out = np.clip(np.clip(v, x64 - eps, x64 + eps), 0.0, 1.0).astype(np.float32)
    d = out.astype(np.float64) - x64
    over, under = d > eps, d < -eps
    if over.any() or under.any():
        out = np.where(over, np.nextafter(out, np.float32(-np.inf)), out)
        out = np.where(under, np.nextafter(out, np.float32(np.inf)), out)
    return out


def _sign_step(x_cur, x0, direction, step, eps):
    return project_linf(x_cur.astype(np.float64) + step * np.sign(direction), x0, eps)


def ce_input_grad(net, x, y):
    """Logits and d(sum of per-example CE)/dx."""
    return nn.input_gradient(net, x, lambda z: nn.softmax_cross_entropy(z, y, "sum")[1])


def _succeeded(net, x_adv, y):
    return nn.predict(nn.logits(net, x_adv)) != y


def _check_box(x):
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("input images must lie in [0, 1]")


# --------------------------------------------------------------------------- l_inf attacks


def fgsm(net, x, y, config: AttackConfig) -> AttackResult:
    """x* = clip(x + eps * sign(grad_x J(x, y))), sign(0) = 0."""
    x = np.asarray(x, dtype=np.float32)
    _check_box(x)
    _, g = ce_input_grad(net, x, y)
    x_adv = _sign_step(x, x, g, config.eps, config.eps)
    return AttackResult(x_adv, _succeeded(net, x_adv, y), np.ones(len(x), np.int64), x)


def random_start(x, eps, seed, indices):
    """Uniform draw from the eps-ball around each example, one stream per index."""
    noise = np.stack([np.random.default_rng([seed, int(i)]).uniform(-eps, eps, size=x.shape[1:])
                      for i in indices]) if len(x) else np.zeros(x.shape)
    return project_linf(x.astype(np.float64) + noise, x, eps)


def pgd(net, x, y, config: AttackConfig, indices=None) -> AttackResult:
    x = np.asarray(x, dtype=np.float32)
    _check_box(x)
    indices = np.arange(len(x)) if indices is None else indices
    x_adv = random_start(x, config.eps, config.seed, indices)
    for _ in range(config.steps):
        _, g = ce_input_grad(net, x_adv, y)
        x_adv = _sign_step(x_adv, x, g, config.step_size, config.eps)
    return AttackResult(x_adv, _succeeded(net, x_adv, y),
                        np.full(len(x), config.steps, np.int64), x)


def mim(net, x, y, config: AttackConfig, record: list | None = None) -> AttackResult:
    """Momentum iterative method with an l1-normalised gradient accumulator.

    ``record``, if given, receives a copy of the accumulator after each step.
    """
    x = np.asarray(x, dtype=np.float32)
    _check_box(x)
    acc = np.zeros(x.shape, dtype=np.float64)
    x_adv = x
    guarded = np.zeros(len(x), dtype=bool)
    for _ in range(config.steps):
        _, g = ce_input_grad(net, x_adv, y)
        g = g.astype(np.float64)
        l1 = _flat_sum(np.abs(g))
        guarded |= l1 < 1e-12
        acc = config.mu * acc + g / _expand(np.maximum(l1, 1e-12), g)
        if record is not None:
            record.append(acc.copy())
        x_adv = _sign_step(x_adv, x, acc, config.step_size, config.eps)
    notes = ["zero-gradient guard" if gd else "" for gd in guarded]
    return AttackResult(x_adv, _succeeded(net, x_adv, y),
                        np.full(len(x), config.steps, np.int64), x, notes)


# --------------------------------------------------------------------------- l2 attacks


def _logit_rows_grad(net, trace, classes):
    """d z[n, classes[n]] / dx for every example n."""
    onehot = np.zeros(trace.logits.shape, dtype=np.float64)
    onehot[np.arange(len(classes)), classes] = 1.0
    _, g = nn.backward(net, trace, onehot, params=False)
    return g.astype(np.float64)


def deepfool(net, x, y, config: AttackConfig) -> AttackResult:
    """Iterated minimal l2 steps to the nearest linearised class boundary.

    Candidate classes are the ``config.candidates`` highest-scoring classes at
    the clean input. The accumulated step is scaled by (1 + overshoot) and the
    iterate clipped to [0, 1]; gradient components that would push a clipped
    pixel further outside the box are zeroed before the step is computed.
    """
    x = np.asarray(x, dtype=np.float32)
    _check_box(x)
    y = np.asarray(y)
    n = len(x)
    z0 = nn.logits(net, x)
    order = np.argsort(-z0, axis=1, kind="stable")[:, :min(config.candidates, net.num_classes)]
    r_tot = np.zeros(x.shape, dtype=np.float64)
    x_adv = x.copy()
    iters = np.zeros(n, np.int64)
    active = nn.predict(z0) == y  # misclassified inputs are returned unchanged
    notes = ["already misclassified" if not a else "" for a in active]
    scale = 1.0 + config.overshoot
    for _ in range(config.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        tr = nn.forward(net, x_adv[idx])
        z = tr.logits.astype(np.float64)
        keep = np.flatnonzero(nn.predict(z) == y[idx])
        active[idx] = False
        if keep.size == 0:
            break
        sub = idx[keep]
        active[sub] = True
        yy, zk = y[sub], z[keep]
        g_y = _logit_rows_grad(net, tr, _pad(yy, len(idx), keep))[keep]
        best = np.full(sub.size, np.inf)
        best_w = np.zeros((sub.size,) + x.shape[1:])
        best_f = np.zeros(sub.size)
        rows = np.arange(sub.size)
        at_lo, at_hi = x_adv[sub] <= 0.0, x_adv[sub] >= 1.0
        for j in range(order.shape[1]):
            cls = order[sub, j]
            w = _logit_rows_grad(net, tr, _pad(cls, len(idx), keep))[keep] - g_y
            # pixels pinned at a box face cannot move outward; drop them from the step
            w = np.where((at_lo & (w < 0)) | (at_hi & (w > 0)), 0.0, w)
            f = zk[rows, cls] - zk[rows, yy]
            norm = np.sqrt(_flat_sum(w * w))
            with np.errstate(divide="ignore", invalid="ignore"):
                pert = np.where((cls != yy) & (norm > 0), np.abs(f) / norm, np.inf)
            better = pert < best
            best = np.where(better, pert, best)
            best_w[better] = w[better]
            best_f[better] = f[better]
        stuck = ~np.isfinite(best)
        for i in sub[stuck]:
            notes[i] = "no usable boundary gradient"
        active[sub[stuck]] = False
        ok = sub[~stuck]
        w = best_w[~stuck]
        r_tot[ok] += _expand(np.abs(best_f[~stuck]) / _flat_sum(w * w), w) * w
        x_adv[ok] = np.clip(x[ok].astype(np.float64) + scale * r_tot[ok], 0.0, 1.0).astype(np.float32)
        iters[ok] += 1
    return AttackResult(x_adv, _succeeded(net, x_adv, y), iters, x, notes)


def _pad(classes, n, keep):
    """Scatter per-kept-row classes into a length-n vector (other rows get class 0)."""
    full = np.zeros(n, dtype=np.int64)
    full[keep] = classes
    return full


def _margin(z, y, kappa):
    """z_y - max_{j != y} z_j and the arg of that max."""
    z = z.astype(np.float64)
    other = z.copy()
    other[np.arange(len(y)), y] = -np.inf
    j = other.argmax(axis=1)
    return z[np.arange(len(y)), y] - other[np.arange(len(y)), j], j


def cw(net, x, y, config: AttackConfig) -> AttackResult:
    """Carlini-Wagner L2 with tanh box reparametrisation and a binary search on c.

    Minimises ||x* - x||^2 + c * max(z_y - max_{j!=y} z_j, -kappa) with Adam in
    w-space, x* = (tanh(w) + 1) / 2. On success c moves to the midpoint with the
    last failure (lower bound 0); on failure it is multiplied by 10 until a
    success bounds it. Returns the smallest-distortion success found, else the
    attempt with the lowest margin.
    """
    x = np.asarray(x, dtype=np.float32)
    _check_box(x)
    y = np.asarray(y)
    n = len(x)
    x64 = x.astype(np.float64)
    kappa = config.kappa
    margin0, _ = _margin(nn.logits(net, x), y, kappa)
    done = (margin0 <= -kappa) & (nn.predict(nn.logits(net, x)) != y)
    notes = ["already misclassified" if d else "" for d in done]
    w0 = np.arctanh(2.0 * np.clip(x64, 1e-6, 1 - 1e-6) - 1.0)

    best_l2 = np.where(done, 0.0, np.inf)
    best_x = x.copy()
    fail_margin = np.full(n, np.inf)
    fail_x = x.copy()
    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    c = np.full(n, float(config.c0))
    iters = np.zeros(n, np.int64)
    todo = np.flatnonzero(~done)
    b1, b2, eps = 0.9, 0.999, 1e-8

    for _ in range(config.search_steps if todo.size else 0):
        w = w0[todo].copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        yy = y[todo]
        cc = c[todo]
        hit = np.zeros(todo.size, dtype=bool)
        for t in range(config.cw_steps + 1):
            xa = (np.tanh(w) + 1.0) / 2.0
            xa32 = xa.astype(np.float32)
            tr = nn.forward(net, xa32)
            margin, j = _margin(tr.logits, yy, kappa)
            pred = nn.predict(tr.logits)
            d32 = xa32.astype(np.float64) - x64[todo]
            l2 = np.sqrt(_flat_sum(d32 * d32))
            success = (margin <= -kappa) & (pred != yy)
            hit |= success
            improve = success & (l2 < best_l2[todo])
            best_l2[todo[improve]] = l2[improve]
            best_x[todo[improve]] = xa32[improve]
            closer = ~success & (margin < fail_margin[todo])
            fail_margin[todo[closer]] = margin[closer]
            fail_x[todo[closer]] = xa32[closer]
            if t == config.cw_steps:
                break
            hinge = margin > -kappa
            gz = np.zeros(tr.logits.shape)
            rows = np.arange(todo.size)
            gz[rows, yy] += cc * hinge
            gz[rows, j] -= cc * hinge
            _, gx = nn.backward(net, tr, gz, params=False)
            grad_x = 2.0 * (xa - x64[todo]) + gx.astype(np.float64)
            grad_w = grad_x * (1.0 - np.tanh(w) ** 2) / 2.0
            m = b1 * m + (1 - b1) * grad_w
            v = b2 * v + (1 - b2) * grad_w * grad_w
            w = w - config.cw_lr * (m / (1 - b1 ** (t + 1))) / (np.sqrt(v / (1 - b2 ** (t + 1))) + eps)
        iters[todo] += config.cw_steps
        upper[todo] = np.where(hit, np.minimum(upper[todo], cc), upper[todo])
        lower[todo] = np.where(hit, lower[todo], np.maximum(lower[todo], cc))
        bounded = upper[todo] < 1e9
        c[todo] = np.where(bounded, (lower[todo] + upper[todo]) / 2.0, cc * 10.0)

    found = np.isfinite(best_l2)
    x_adv = np.where(_expand(found, x), best_x, fail_x)
    return AttackResult(x_adv, _succeeded(net, x_adv, y), iters, x, notes)


# --------------------------------------------------------------------------- drivers


def run_attack(net, x, y, config: AttackConfig, indices=None) -> AttackResult:
    y = np.asarray(y)
    if config.attack == "fgsm":
        return fgsm(net, x, y, config)
    if config.attack == "pgd":
        return pgd(net, x, y, config, indices)
    if config.attack == "mim":
        return mim(net, x, y, config)
    if config.attack == "deepfool":
        return deepfool(net, x, y, config)
    return cw(net, x, y, config)


def attack_example(net, example, config: AttackConfig, index: int = 0) -> AttackOutcome:
    """Attack a single LabeledExample."""
    r = run_attack(net, np.asarray(example.image)[None], [example.label], config, [index])
    return r.outcome(0)


def _safe_chunk(net, x, y, config, indices):
    try:
        return run_attack(net, x, y, config, indices)
    except Exception as e:  # one bad chunk must not sink the run; retry per example
        log.warning("attack chunk failed (%s); retrying example by example", e)
        parts = []
        for k in range(len(x)):
            try:
                parts.append(run_attack(net, x[k:k + 1], y[k:k + 1], config, indices[k:k + 1]))
            except Exception as e1:
                parts.append(AttackResult(x[k:k + 1].copy(), np.zeros(1, bool),
                                          np.zeros(1, np.int64), x[k:k + 1], [f"error: {e1}"]))
        return AttackResult.concat(parts)


def attack_dataset(net, images, labels, config: AttackConfig, parallelism: int = 1,
                   indices=None):
    """Attack every example, in order, in fixed chunks.

    Returns (AttackResult, summary dict). Chunks are fixed-size and seeded by
    global example index, so the output does not depend on ``parallelism``.
    """
    x = np.asarray(images, dtype=np.float32)
    y = np.asarray(labels)
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    starts = range(0, len(x), CHUNK)
    job = lambda s: _safe_chunk(net, x[s:s + CHUNK], y[s:s + CHUNK], config, indices[s:s + CHUNK])
    if parallelism > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            parts = list(pool.map(job, starts))
    else:
        parts = [job(s) for s in starts]
    if not parts:
        empty = AttackResult(x.copy(), np.zeros(0, bool), np.zeros(0, np.int64), x)
        return empty, summarize(empty, config)
    result = AttackResult.concat(parts)
    return result, summarize(result, config)


def summarize(result: AttackResult, config: AttackConfig) -> dict:
    n = len(result)
    errors = sum(1 for s in result.notes if s.startswith("error"))
    return {
        "attack": config.attack,
        "n": n,
        "success_rate": float(result.success.mean()) if n else 0.0,
        "successes": int(result.success.sum()),
        "mean_linf": float(result.linf.mean()) if n else 0.0,
        "mean_l2": float(result.l2.mean()) if n else 0.0,
        "mean_iterations": float(result.iterations.mean()) if n else 0.0,
        "errors": errors,
    }


def with_overrides(config: AttackConfig, **kw) -> AttackConfig:
    return dataclasses.replace(config, **kw)
