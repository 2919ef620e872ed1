"""Feed-forward network engine with hand-written reverse-mode gradients.

Arrays are numpy ``float32`` in storage; every matrix product and reduction
is accumulated in ``float64`` and rounded back to the parameter dtype.
Images use NHWC layout. A network built from ``float64`` parameters runs
entirely in double precision, which the gradient oracles rely on.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ACC = np.float64


class ShapeError(ValueError):
    """Input of the wrong shape reached a layer."""

    def __init__(self, layer_index: int, expected, actual):
        self.layer_index = layer_index
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"layer {layer_index}: expected input shape {expected}, got {actual}")


class StaleTraceError(RuntimeError):
    pass


# --------------------------------------------------------------------------- layers


@dataclass(frozen=True, eq=False)
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    kind = "dense"

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"dense: bad parameter shapes {self.weight.shape}, {self.bias.shape}")

    @property
    def params(self):
        return (self.weight, self.bias)

    def replace(self, params):
        return Dense(*params)

    def check(self, index, shape):
        n_in = int(np.prod(shape[1:]))
        if n_in != self.weight.shape[1]:
            raise ShapeError(index, ("N", self.weight.shape[1]), tuple(shape))

    def forward(self, x, train, rng, mask=None):
        x2 = x.reshape(x.shape[0], -1).astype(ACC)
        y = x2 @ self.weight.astype(ACC).T + self.bias.astype(ACC)
        return y.astype(self.weight.dtype), (x.shape, x2)

    def backward(self, dy, cache, params=True):
        shape, x2 = cache
        dy = dy.astype(ACC)
        dt = self.weight.dtype
        dx = (dy @ self.weight.astype(ACC)).reshape(shape).astype(dt)
        if not params:
            return dx, ()
        return dx, ((dy.T @ x2).astype(dt), dy.sum(axis=0).astype(dt))

    def spec(self):
        return f"dense({self.weight.shape[1]},{self.weight.shape[0]})"


def _im2col(x, k):
    """Same-padded k x k patches of NHWC ``x`` as rows ordered (ky, kx, channel)."""
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((n, h, w, k * k * c), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            t = (dy * k + dx) * c
            cols[..., t:t + c] = xp[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(n * h * w, k * k * c)


def _col2im(cols, k, c):
    """Adjoint of ``_im2col``: scatter-add patch rows back onto the unpadded image."""
    n, h, w, _ = cols.shape
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            t = (dy * k + dx) * c
            xp[:, dy:dy + h, dx:dx + w, :] += cols[..., t:t + c]
    return xp[:, p:p + h, p:p + w, :]


def _taps_last(weight):
    """(out, in, k, k) weight as an (out, k*k*in) matrix matching ``_im2col``."""
    out = weight.shape[0]
    return weight.astype(ACC).transpose(0, 2, 3, 1).reshape(out, -1)


@dataclass(frozen=True, eq=False)
class Conv2d:
    """Stride-1, same-padded convolution on NHWC input; weight is (out, in, k, k)."""

    weight: np.ndarray
    bias: np.ndarray
    kind = "conv2d"

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise ValueError(f"conv2d: weight must be (out, in, k, k) with odd k, got {w.shape}")
        if self.bias.shape != (w.shape[0],):
            raise ValueError(f"conv2d: bias shape {self.bias.shape} != ({w.shape[0]},)")

    @property
    def params(self):
        return (self.weight, self.bias)

    def replace(self, params):
        return Conv2d(*params)

    def check(self, index, shape):
        if len(shape) != 4 or shape[3] != self.weight.shape[1]:
            raise ShapeError(index, ("N", "H", "W", self.weight.shape[1]), tuple(shape))

    def forward(self, x, train, rng, mask=None):
        n, h, w, c = x.shape
        out, _, k, _ = self.weight.shape
        cols = _im2col(x.astype(ACC), k)
        y = cols @ _taps_last(self.weight).T + self.bias.astype(ACC)
        return y.reshape(n, h, w, out).astype(self.weight.dtype), (x.shape, cols)

    def backward(self, dy, cache, params=True):
        (n, h, w, c), cols = cache
        out, _, k, _ = self.weight.shape
        dt = self.weight.dtype
        if params:
            dy2 = dy.reshape(-1, out).astype(ACC)
            dw = (dy2.T @ cols).reshape(out, k, k, c).transpose(0, 3, 1, 2)
            pg = (np.ascontiguousarray(dw).astype(dt), dy2.sum(axis=0).astype(dt))
        else:
            pg = ()
        dx = _col2im((dy.reshape(-1, out).astype(ACC) @ _taps_last(self.weight)).reshape(n, h, w, -1), k, c)
        return dx.astype(dt), pg

    def spec(self):
        out, cin, k, _ = self.weight.shape
        return f"conv2d({cin},{out},{k})"


@dataclass(frozen=True, eq=False)
class ReLU:
    kind = "relu"
    params = ()

    def check(self, index, shape):
        pass

    def forward(self, x, train, rng, mask=None):
        active = x > 0
        return np.where(active, x, 0).astype(x.dtype), active

    def backward(self, dy, active, params=True):
        return np.where(active, dy, 0).astype(dy.dtype), ()

    def spec(self):
        return "relu"


@dataclass(frozen=True, eq=False)
class MaxPool2x2:
    kind = "maxpool2x2"
    params = ()

    def check(self, index, shape):
        if len(shape) != 4 or shape[1] % 2 or shape[2] % 2:
            raise ShapeError(index, ("N", "2h", "2w", "C"), tuple(shape))

    def forward(self, x, train, rng, mask=None):
        n, h, w, c = x.shape
        win = (x.reshape(n, h // 2, 2, w // 2, 2, c)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, h // 2, w // 2, c, 4))
        idx = win.argmax(axis=-1)[..., None]  # first maximum on ties
        y = np.take_along_axis(win, idx, axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, dy, cache, params=True):
        (n, h, w, c), idx = cache
        d = np.zeros((n, h // 2, w // 2, c, 4), dtype=dy.dtype)
        np.put_along_axis(d, idx, dy[..., None], axis=-1)
        dx = d.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return dx, ()

    def spec(self):
        return "maxpool2x2"


@dataclass(frozen=True, eq=False)
class Dropout:
    """Inverted dropout: train mode scales kept units by 1/keep, eval is the identity."""

    keep: float = 0.5
    kind = "dropout"
    params = ()

    def __post_init__(self):
        if not 0.0 < self.keep <= 1.0:
            raise ValueError(f"dropout keep must be in (0, 1], got {self.keep}")

    def check(self, index, shape):
        pass

    def forward(self, x, train, rng, mask=None):
        if not train:
            return x, None
        if mask is None:
            if rng is None:
                raise ValueError("train-mode dropout needs an rng or a replay mask")
            mask = ((rng.random(x.shape) < self.keep) / self.keep).astype(x.dtype)
        return x * mask, mask

    def backward(self, dy, mask, params=True):
        return (dy if mask is None else dy * mask), ()

    def spec(self):
        return f"dropout({self.keep!r})"


Layer = Dense | Conv2d | ReLU | MaxPool2x2 | Dropout


# --------------------------------------------------------------------------- network


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple
    num_classes: int
    seed: int = 0
    input_shape: Optional[tuple] = None  # per-example shape, e.g. (28, 28, 1)

    def params(self) -> list:
        return [p for layer in self.layers for p in layer.params]

    def with_params(self, params: Sequence[np.ndarray]) -> "Network":
        params = list(params)
        layers = []
        for layer in self.layers:
            n = len(layer.params)
            if n:
                new = params[:n]
                for old, p in zip(layer.params, new):
                    if old.shape != p.shape:
                        raise ShapeError(len(layers), old.shape, p.shape)
                layer = layer.replace(new)
                del params[:n]
            layers.append(layer)
        if params:
            raise ValueError(f"{len(params)} surplus parameter arrays")
        return dataclasses.replace(self, layers=tuple(layers))

    @property
    def dtype(self):
        ps = self.params()
        return ps[0].dtype if ps else np.dtype(np.float32)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    @property
    def arch(self) -> str:
        return " ".join(layer.spec() for layer in self.layers)

    def astype(self, dtype) -> "Network":
        return self.with_params([p.astype(dtype) for p in self.params()])


@dataclass
class Trace:
    """Everything a backward pass needs from the forward pass that made it."""

    net: Network
    input: np.ndarray
    activations: list  # one output per layer; the last is the logits
    caches: list = field(repr=False)
    masks: list = field(repr=False)
    train: bool = False

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1] if self.activations else self.input


def forward(net: Network, x, mode: str = "eval", rng=None, masks=None) -> Trace:
    """Run ``net`` on a batch ``x`` of shape (N, ...).

    In train mode dropout draws masks from ``rng`` unless ``masks`` (one entry
    per layer, as recorded in a previous trace) is given for replay.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    x = np.asarray(x, dtype=net.dtype)
    if net.input_shape is not None and tuple(x.shape[1:]) != tuple(net.input_shape):
        raise ShapeError(0, ("N",) + tuple(net.input_shape), x.shape)
    acts, caches, used = [], [], []
    h = x
    for i, layer in enumerate(net.layers):
        layer.check(i, h.shape)
        m = masks[i] if masks is not None else None
        h, cache = layer.forward(h, train, rng, m)
        acts.append(h)
        caches.append(cache)
        used.append(cache if isinstance(layer, Dropout) else None)
    if acts and acts[-1].shape[1:] != (net.num_classes,):
        raise ShapeError(len(net.layers), ("N", net.num_classes), acts[-1].shape)
    return Trace(net, x, acts, caches, used, train)


def backward(net: Network, trace: Trace, loss_grad, params: bool = True):
    """Reverse pass. Returns (param_grads aligned with ``net.params()``, input_grad).

    With ``params=False`` parameter gradients are skipped and returned as None.
    """
    if trace is None or trace.net is not net or len(trace.caches) != len(net.layers):
        raise StaleTraceError("trace was not produced by a forward pass of this network")
    g = np.asarray(loss_grad, dtype=net.dtype)
    if g.shape != trace.logits.shape:
        raise ShapeError(len(net.layers), trace.logits.shape, g.shape)
    grads = []
    for layer, cache in zip(reversed(net.layers), reversed(trace.caches)):
        g, pg = layer.backward(g, cache, params)
        grads.append(pg)
    if not params:
        return None, g
    flat = [p for pg in reversed(grads) for p in pg]
    return flat, g


def logits(net: Network, x) -> np.ndarray:
    return forward(net, x).logits


def input_gradient(net: Network, x, logit_grad_fn):
    """Gradient of a scalar function of the logits w.r.t. the input batch.

    ``logit_grad_fn(logits)`` returns the gradient of that function w.r.t. the logits.
    """
    tr = forward(net, x)
    _, gx = backward(net, tr, logit_grad_fn(tr.logits), params=False)
    return tr.logits, gx


# --------------------------------------------------------------------------- loss


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=ACC)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels, reduction: str = "mean"):
    """Cross-entropy of softmax(logits) against integer labels, with its logit gradient.

    A 1-D ``logits`` with an int label gives a scalar loss and a (C,) gradient.
    For a batch, ``reduction`` is "mean" (gradient divided by N) or "sum".
    """
    z = np.asarray(logits, dtype=ACC)
    single = z.ndim == 1
    z2 = z[None] if single else z
    y = np.atleast_1d(np.asarray(labels))
    n, c = z2.shape
    if y.shape != (n,) or np.any(y < 0) or np.any(y >= c):
        raise ValueError(f"labels must be {n} integers in [0, {c}), got {labels!r}")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(n), y]
    grad = softmax(z2)
    grad[np.arange(n), y] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    if reduction == "mean":
        return float(losses.mean()), grad / n
    if reduction == "sum":
        return float(losses.sum()), grad
    raise ValueError(f"unknown reduction {reduction!r}")


def predict(z) -> np.ndarray:
    """Argmax over the class axis; ties go to the lowest class index."""
    return np.asarray(z).argmax(axis=-1)


# --------------------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    algorithm: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[list] = None
    v: Optional[list] = None

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")


def optimizer_step(state: OptimizerState, params, grads):
    """One update. Weight decay is added to the gradient before the moments."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(-1, p.shape, g.shape)
    t = state.step + 1
    wd = state.weight_decay
    new_params, new_m, new_v = [], [], []
    for i, (p, g) in enumerate(zip(params, grads)):
        p64 = p.astype(ACC)
        g64 = g.astype(ACC) + wd * p64
        if state.algorithm == "sgd":
            new_params.append((p64 - state.lr * g64).astype(p.dtype))
            continue
        m = state.m[i].astype(ACC) if state.m else np.zeros_like(p64)
        v = state.v[i].astype(ACC) if state.v else np.zeros_like(p64)
        m = state.beta1 * m + (1 - state.beta1) * g64
        v = state.beta2 * v + (1 - state.beta2) * g64 * g64
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        new_params.append((p64 - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    if state.algorithm == "sgd":
        return new_params, dataclasses.replace(state, step=t)
    return new_params, dataclasses.replace(state, step=t, m=new_m, v=new_v)


# --------------------------------------------------------------------------- construction


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


_TOKEN = re.compile(r"(\w+)(?:\(([^)]*)\))?")


def parse_arch(arch: str) -> list:
    """Parse "conv2d(1,16,3) relu maxpool2x2 dense(784,10)" into (kind, args) pairs."""
    out = []
    for tok in arch.split():
        m = _TOKEN.fullmatch(tok)
        if not m:
            raise ValueError(f"bad layer token {tok!r}")
        kind, args = m.group(1), m.group(2)
        vals = [] if not args else [float(a) if kind == "dropout" else int(a) for a in args.split(",")]
        if kind not in ("dense", "conv2d", "relu", "maxpool2x2", "dropout"):
            raise ValueError(f"unknown layer kind {kind!r}")
        out.append((kind, vals))
    return out


def build_network(arch: str, num_classes: int, seed: int = 0, input_shape=None,
                  dtype=np.float32) -> Network:
    """Kaiming-uniform weights and zero biases for the layers named in ``arch``."""
    rng = np.random.default_rng(seed)
    layers = []
    for kind, a in parse_arch(arch):
        if kind == "dense":
            n_in, n_out = a
            layers.append(Dense(kaiming_uniform(rng, (n_out, n_in), n_in, dtype),
                                np.zeros(n_out, dtype)))
        elif kind == "conv2d":
            c_in, c_out, k = a
            layers.append(Conv2d(kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype),
                                 np.zeros(c_out, dtype)))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "maxpool2x2":
            layers.append(MaxPool2x2())
        else:
            layers.append(Dropout(*a) if a else Dropout())
    return Network(tuple(layers), num_classes, seed,
                   None if input_shape is None else tuple(input_shape))
