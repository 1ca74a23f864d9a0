"""Minimal NHWC network engine with exact backpropagation.

Activations are float64 arrays with a leading batch axis. Image-like
tensors are laid out (N, H, W, C). Each layer is a small dataclass with a
``forward`` that returns its output plus a cache, and a ``backward`` that
consumes the cache. :class:`Network` chains them and records a
:class:`ForwardTrace`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, ClassVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, UsageError, VersionError

Shape = tuple


def glorot_uniform(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


# ---------------------------------------------------------------- layers


@dataclass(frozen=True)
class Conv2D:
    kh: int
    kw: int
    c_in: int
    c_out: int
    stride: int = 1
    padding: int = 0
    kind: ClassVar[str] = "conv2d"

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.c_in:
            raise ConfigError(f"expects (H, W, {self.c_in}) input, got {tuple(in_shape)}")
        h, w = in_shape[0] + 2 * self.padding, in_shape[1] + 2 * self.padding
        if h < self.kh or w < self.kw:
            raise ConfigError(f"kernel {self.kh}x{self.kw} larger than padded input {h}x{w}")
        return ((h - self.kh) // self.stride + 1, (w - self.kw) // self.stride + 1, self.c_out)

    def init_params(self, rng):
        fan_in = self.kh * self.kw * self.c_in
        fan_out = self.kh * self.kw * self.c_out
        return {
            "W": glorot_uniform(rng, (self.kh, self.kw, self.c_in, self.c_out), fan_in, fan_out),
            "b": np.zeros(self.c_out),
        }

    def _wmat(self, W):
        # rows ordered (c, i, j) to match the window layout below
        return W.transpose(2, 0, 1, 3).reshape(-1, self.c_out)

    def forward(self, x, params, train, rng):
        p, s = self.padding, self.stride
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        win = sliding_window_view(xp, (self.kh, self.kw), axis=(1, 2))[:, ::s, ::s]
        n, ho, wo = win.shape[:3]
        cols = win.reshape(n * ho * wo, -1)
        y = cols @ self._wmat(params["W"]) + params["b"]
        return y.reshape(n, ho, wo, self.c_out), (x.shape, cols)

    def backward(self, dy, params, cache):
        x_shape, cols = cache
        n, h, w, c = x_shape
        p, s = self.padding, self.stride
        _, ho, wo, _ = dy.shape
        dyf = dy.reshape(-1, self.c_out)
        dW = (cols.T @ dyf).reshape(c, self.kh, self.kw, self.c_out).transpose(1, 2, 0, 3)
        db = dyf.sum(axis=0)
        dcols = (dyf @ self._wmat(params["W"]).T).reshape(n, ho, wo, c, self.kh, self.kw)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c))
        for i in range(self.kh):
            for j in range(self.kw):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[..., i, j]
        return dxp[:, p:p + h, p:p + w, :], {"W": dW, "b": db}


@dataclass(frozen=True)
class ReLU:
    kind: ClassVar[str] = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def init_params(self, rng):
        return {}

    def forward(self, x, params, train, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, params, mask):
        return dy * mask, {}


@dataclass(frozen=True)
class MaxPool:
    """Max pooling without padding. Ties go to the lowest index in the window."""

    window: int
    stride: int
    kind: ClassVar[str] = "maxpool"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigError(f"expects (H, W, C) input, got {tuple(in_shape)}")
        h, w, c = in_shape
        if h < self.window or w < self.window:
            raise ConfigError(f"window {self.window} larger than input {h}x{w}")
        return ((h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1, c)

    def init_params(self, rng):
        return {}

    def forward(self, x, params, train, rng):
        k, s = self.window, self.stride
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        flat = win.reshape(*win.shape[:4], k * k)
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, dy, params, cache):
        (n, h, w, c), idx = cache
        k, s = self.window, self.stride
        _, ho, wo, _ = idx.shape
        rows = np.arange(ho)[None, :, None, None] * s + idx // k
        cols = np.arange(wo)[None, None, :, None] * s + idx % k
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, None, None, :]
        lin = ((nn_ * h + rows) * w + cols) * c + cc
        dx = np.bincount(lin.ravel(), weights=dy.ravel(), minlength=n * h * w * c)
        return dx.reshape(n, h, w, c), {}


@dataclass(frozen=True)
class GlobalAvgPool:
    kind: ClassVar[str] = "global-avg-pool"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigError(f"expects (H, W, C) input, got {tuple(in_shape)}")
        return (in_shape[2],)

    def init_params(self, rng):
        return {}

    def forward(self, x, params, train, rng):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, dy, params, x_shape):
        _, h, w, _ = x_shape
        return np.broadcast_to(dy[:, None, None, :] / (h * w), x_shape).copy(), {}


@dataclass(frozen=True)
class Dense:
    """Fully connected layer; any input is flattened per sample."""

    n_in: int
    n_out: int
    kind: ClassVar[str] = "dense"

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.n_in:
            raise ConfigError(f"expects {self.n_in} inputs, got shape {tuple(in_shape)}")
        return (self.n_out,)

    def init_params(self, rng):
        return {
            "W": glorot_uniform(rng, (self.n_in, self.n_out), self.n_in, self.n_out),
            "b": np.zeros(self.n_out),
        }

    def forward(self, x, params, train, rng):
        x2 = x.reshape(len(x), -1)
        return x2 @ params["W"] + params["b"], (x.shape, x2)

    def backward(self, dy, params, cache):
        x_shape, x2 = cache
        grads = {"W": x2.T @ dy, "b": dy.sum(axis=0)}
        return (dy @ params["W"].T).reshape(x_shape), grads


@dataclass(frozen=True)
class Dropout:
    """Inverted dropout: scaled by 1/(1-rate) in training, identity in eval."""

    rate: float
    kind: ClassVar[str] = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.rate}")

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def init_params(self, rng):
        return {}

    def forward(self, x, params, train, rng):
        if not train:
            return x, None
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, dy, params, mask):
        return dy * mask, {}


@dataclass(frozen=True)
class Softmax:
    kind: ClassVar[str] = "softmax"

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ConfigError(f"expects a flat input, got {tuple(in_shape)}")
        return tuple(in_shape)

    def init_params(self, rng):
        return {}

    def forward(self, x, params, train, rng):
        y = softmax(x)
        return y, y

    def backward(self, dy, params, y):
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True)), {}


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, ReLU, MaxPool, GlobalAvgPool, Dense, Dropout, Softmax)}


def layer_to_dict(layer):
    return {"kind": layer.kind, **asdict(layer)}


def layer_from_dict(d):
    d = dict(d)
    try:
        cls = LAYER_KINDS[d.pop("kind")]
    except KeyError as exc:
        raise ConfigError(f"unknown layer kind {exc}") from None
    names = {f.name for f in fields(cls)}
    if set(d) - names:
        raise ConfigError(f"unknown {cls.kind} fields: {sorted(set(d) - names)}")
    return cls(**d)


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- network


@dataclass
class ForwardTrace:
    """Everything backward needs: per-layer inputs and caches.

    Caches hold the dropout masks (None in eval mode) and max-pool argmax
    indices.
    """

    mode: str
    inputs: list
    caches: list
    output: np.ndarray
    kinds: list = field(default_factory=list, repr=False)

    @property
    def dropout_masks(self):
        return {k: c for k, c in enumerate(self.caches) if self.kinds[k] == "dropout"}

    @property
    def pool_argmax(self):
        return {k: c[1] for k, c in enumerate(self.caches) if self.kinds[k] == "maxpool"}


class Network:
    """Ordered layer stack with parameters, a seed and an update counter.

    ``params[k]`` is a dict of arrays for layer ``k`` (empty for
    parameter-free layers).
    """

    def __init__(self, input_shape, layers, seed=0, params=None):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        self.seed = int(seed)
        self.step = 0
        self.shapes = [self.input_shape]
        for k, layer in enumerate(self.layers):
            try:
                self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
            except ConfigError as exc:
                raise ConfigError(f"layer {k} ({layer.kind}): {exc}") from None
        if params is None:
            rng = np.random.default_rng(self.seed)
            params = [layer.init_params(rng) for layer in self.layers]
        self.params = [{n: np.asarray(a, dtype=np.float64) for n, a in p.items()} for p in params]
        self._check_param_shapes()

    def _check_param_shapes(self):
        if len(self.params) != len(self.layers):
            raise ConfigError("one parameter dict per layer required")
        ref = np.random.default_rng(0)
        for k, (layer, p) in enumerate(zip(self.layers, self.params)):
            want = {n: a.shape for n, a in layer.init_params(ref).items()}
            got = {n: a.shape for n, a in p.items()}
            if want != got:
                raise ConfigError(f"layer {k} ({layer.kind}): parameter shapes {got} != {want}")

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def n_params(self):
        return sum(a.size for p in self.params for a in p.values())

    def copy(self):
        net = Network(self.input_shape, self.layers, self.seed,
                      [{n: a.copy() for n, a in p.items()} for p in self.params])
        net.step = self.step
        return net

    def forward(self, x, mode="eval", rng=None, upto=None):
        """Run layers ``[0, upto)`` (all by default) on a batch.

        In train mode dropout masks come from ``rng``; when omitted a
        generator seeded by ``(seed, step)`` is used so repeated calls
        between updates see the same masks.
        """
        if mode not in ("train", "eval"):
            raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
        upto = len(self.layers) if upto is None else upto
        if not 0 <= upto <= len(self.layers):
            raise ConfigError(f"tap {upto} outside [0, {len(self.layers)}]")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            first = f"layer 0 ({self.layers[0].kind})" if self.layers else "network input"
            raise ConfigError(f"{first}: expected input {self.input_shape}, got {x.shape[1:]}")
        train = mode == "train"
        if train and rng is None:
            rng = np.random.default_rng([self.seed, self.step])
        inputs, caches = [], []
        for layer, p in zip(self.layers[:upto], self.params[:upto]):
            inputs.append(x)
            x, cache = layer.forward(x, p, train, rng)
            caches.append(cache)
        trace = ForwardTrace(mode, inputs, caches, x, kinds=[l.kind for l in self.layers[:upto]])
        return x, trace

    def backward(self, trace, output_grad):
        """Return ``(param_grads, input_grad)`` for a train-mode trace."""
        if trace.mode != "train":
            raise UsageError("backward needs a trace recorded in train mode")
        dy = np.asarray(output_grad, dtype=np.float64)
        if dy.shape != trace.output.shape:
            raise ConfigError(f"output_grad shape {dy.shape} != output shape {trace.output.shape}")
        n = len(trace.caches)
        grads = [dict() for _ in self.layers]
        for k in range(n - 1, -1, -1):
            dy, grads[k] = self.layers[k].backward(dy, self.params[k], trace.caches[k])
        for k in range(n, len(self.layers)):
            grads[k] = {name: np.zeros_like(a) for name, a in self.params[k].items()}
        return grads, dy

    def sgd_step(self, grads, lr):
        """In-place ``p <- p - lr * g``; increments the step counter."""
        if not lr > 0:
            raise UsageError(f"learning rate must be positive, got {lr}")
        for k, g in enumerate(grads):
            for name, a in g.items():
                if not np.all(np.isfinite(a)):
                    raise NumericError(f"non-finite gradient in layer {k} ({self.layers[k].kind})",
                                       layer=k)
        self.params = [{name: p[name] - lr * g[name] for name in p} if p else {}
                       for p, g in zip(self.params, grads)]
        self.step += 1
        return self

    def __repr__(self):
        kinds = ", ".join(l.kind for l in self.layers)
        return f"Network({self.input_shape} -> {self.output_shape}: [{kinds}], {self.n_params} params)"


def sgd_param_update(net, param_grads, lr):
    return net.sgd_step(param_grads, lr)


# ---------------------------------------------------------------- loss heads


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    n = len(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def cross_entropy_on_probs(probs, labels):
    n = len(probs)
    p = probs[np.arange(n), labels]
    grad = np.zeros_like(probs)
    grad[np.arange(n), labels] = -1.0 / (n * p)
    return -np.log(p).mean(), grad


def squared_error(target):
    def head(out):
        d = out - target
        return 0.5 * float((d * d).sum()), d
    return head


# ---------------------------------------------------------------- gradient check


@dataclass
class GradcheckReport:
    errors: dict
    tol: float

    @property
    def max_error(self):
        return max((float(e.max()) for e in self.errors.values() if e.size), default=0.0)

    @property
    def mean_error(self):
        allerr = np.concatenate([e.ravel() for e in self.errors.values()]) if self.errors else np.zeros(1)
        return float(allerr.mean())

    @property
    def passed(self):
        return self.max_error < self.tol

    def worst(self, k=3):
        items = sorted(((float(e.max()), key) for key, e in self.errors.items() if e.size), reverse=True)
        return items[:k]


def relative_error(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck(net, x, loss_head: Callable, h=1e-3, tol=1e-4, check_input=True, mask_seed=0):
    """Compare backprop gradients with central differences.

    ``loss_head(output) -> (loss, d loss / d output)``. Forward passes run in
    train mode with a freshly seeded generator each time so dropout masks
    are identical across perturbations.
    """
    x = np.asarray(x, dtype=np.float64)

    def loss_at(xx):
        out, _ = net.forward(xx, "train", rng=np.random.default_rng(mask_seed))
        return loss_head(out)[0]

    out, trace = net.forward(x, "train", rng=np.random.default_rng(mask_seed))
    grads, dx = net.backward(trace, loss_head(out)[1])
    errors = {}
    for k, p in enumerate(net.params):
        for name, a in p.items():
            num = np.empty_like(a)
            for i in np.ndindex(a.shape):
                old = a[i]
                a[i] = old + h
                lp = loss_at(x)
                a[i] = old - h
                lm = loss_at(x)
                a[i] = old
                num[i] = (lp - lm) / (2 * h)
            errors[(k, net.layers[k].kind, name)] = relative_error(grads[k][name], num)
    if check_input:
        num = np.empty_like(x)
        xx = x.copy()
        for i in np.ndindex(x.shape):
            xx[i] = x[i] + h
            lp = loss_at(xx)
            xx[i] = x[i] - h
            lm = loss_at(xx)
            xx[i] = x[i]
            num[i] = (lp - lm) / (2 * h)
        errors[(-1, "input", "x")] = relative_error(dx, num)
    return GradcheckReport(errors, tol)


def kink_margin(net, x):
    """Smallest distance to a non-differentiable point along the forward pass.

    Considers relu inputs (distance to 0) and max-pool windows (gap between
    the winner and the runner-up).
    """
    out, trace = net.forward(x, "train", rng=np.random.default_rng(0))
    margin = np.inf
    for layer, inp in zip(net.layers, trace.inputs):
        if layer.kind == "relu":
            margin = min(margin, float(np.abs(inp).min()))
        elif layer.kind == "maxpool":
            k, s = layer.window, layer.stride
            win = sliding_window_view(inp, (k, k), axis=(1, 2))[:, ::s, ::s]
            srt = np.sort(win.reshape(*win.shape[:4], k * k), axis=-1)
            margin = min(margin, float((srt[..., -1] - srt[..., -2]).min()))
    return margin


# ---------------------------------------------------------------- persistence
#
# LNN1 layout (all little-endian):
#   4 bytes   magic b"LNN1"
#   uint32    format version (1)
#   uint32    header length L
#   L bytes   UTF-8 JSON: {"input_shape", "seed", "step", "layers": [...],
#             "params": [[layer index, name, shape], ...]}
#   float64   raw parameter arrays, C order, in the order listed in "params"

LNN_MAGIC = b"LNN1"
LNN_VERSION = 1


def network_to_bytes(net):
    entries, blobs = [], []
    for k, p in enumerate(net.params):
        for name in sorted(p):
            entries.append([k, name, list(p[name].shape)])
            blobs.append(np.ascontiguousarray(p[name], dtype="<f8").tobytes())
    header = json.dumps({
        "input_shape": list(net.input_shape),
        "seed": net.seed,
        "step": net.step,
        "layers": [layer_to_dict(l) for l in net.layers],
        "params": entries,
    }).encode()
    return LNN_MAGIC + struct.pack("<II", LNN_VERSION, len(header)) + header + b"".join(blobs)


def network_from_bytes(buf):
    if buf[:4] != LNN_MAGIC:
        raise VersionError(f"not a network file (magic {buf[:4]!r})")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != LNN_VERSION:
        raise VersionError(f"unsupported network file version {version}")
    header = json.loads(buf[12:12 + hlen])
    layers = [layer_from_dict(d) for d in header["layers"]]
    params = [dict() for _ in layers]
    off = 12 + hlen
    for k, name, shape in header["params"]:
        n = int(np.prod(shape))
        if off + 8 * n > len(buf):
            raise VersionError("network file truncated")
        params[k][name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    net = Network(header["input_shape"], layers, header["seed"], params)
    net.step = header["step"]
    return net


def save_network(net, path):
    with open(path, "wb") as f:
        f.write(network_to_bytes(net))


def load_network(path):
    with open(path, "rb") as f:
        return network_from_bytes(f.read())
