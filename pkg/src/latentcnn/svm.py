"""Multi-class L2-hinge SVM with a latent region variable, trained by SGD.

The weight matrix ``w`` is FL x NC. Labels are one-vs-rest vectors with +1
at the true class and -1 elsewhere. A feature bag is an array of shape
(|Z|, FL): one feature vector per latent value, bias entry included.

Per-sample update (one SGD step):

    z*  = argmin_z xi(w; z)            (or argmax, see ``selection``)
    h_c = max(0, 1 - y_c s_c(z*))
    G   = w - 2 C phi(z*) (h * y)^T
    w  <- w - G * lr / (t + T);  t <- t + 1
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError, UsageError

SELECTION_MODES = ("eq4-min", "alg1-max")


@dataclass(frozen=True)
class TrainConfig:
    C: float = 1.0
    lr: float = 1.0
    epochs: int = 1
    T: int = 100_000
    selection: str = "eq4-min"
    seed: int = 0
    shuffle: bool = False

    def __post_init__(self):
        if not self.C > 0:
            raise ConfigError(f"C must be positive, got {self.C}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.selection not in SELECTION_MODES:
            raise ConfigError(f"selection must be one of {SELECTION_MODES}, got {self.selection!r}")

    def effective_lr(self, t):
        return self.lr / (t + self.T)


@dataclass(frozen=True)
class SgdState:
    t: int = 1


@dataclass
class LossBreakdown:
    hinge: np.ndarray  # per-class h_c at z*
    loss: float  # xi at z*
    z: int
    objective: float  # 0.5 tr(w^T w) + C xi
    losses: np.ndarray = field(default=None, repr=False)  # xi for every z


def label_vector(true_class, n_classes):
    if n_classes < 2 or not 0 <= true_class < n_classes:
        raise UsageError(f"class {true_class} invalid for {n_classes} classes")
    y = -np.ones(n_classes)
    y[true_class] = 1.0
    return y


def scores(w, phi):
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (w.shape[0],):
        raise ConfigError(f"feature length {phi.shape} does not match FL={w.shape[0]}")
    return phi @ w


def l2_hinge_loss(s, y):
    h = np.maximum(0.0, 1.0 - y * s)
    return h, float((h * h).sum())


def l1_hinge_loss(s, y):
    """Plain hinge, kept only for loss comparisons."""
    return float(np.maximum(0.0, 1.0 - y * s).sum())


def bag_losses(w, bag, y):
    """xi(w; z) for every row of the bag."""
    h = np.maximum(0.0, 1.0 - y * (bag @ w))
    return (h * h).sum(axis=1)


def _as_bag(bag, fl=None):
    bag = np.asarray(bag, dtype=np.float64)
    if bag.ndim != 2 or len(bag) == 0:
        raise UsageError("feature bag must be a non-empty (|Z|, FL) array")
    if fl is not None and bag.shape[1] != fl:
        raise ConfigError(f"feature length {bag.shape[1]} does not match FL={fl}")
    return bag


def select_latent(w, bag, y, mode="eq4-min", C=1.0):
    """Pick the latent value by loss; ties go to the smallest index."""
    bag = _as_bag(bag, w.shape[0])
    xi = bag_losses(w, bag, y)
    if mode == "eq4-min":
        z = int(np.argmin(xi))
    elif mode == "alg1-max":
        z = int(np.argmax(xi))
    else:
        raise ConfigError(f"unknown selection mode {mode!r}")
    h, loss = l2_hinge_loss(scores(w, bag[z]), y)
    objective = 0.5 * float((w * w).sum()) + C * loss
    return z, LossBreakdown(h, loss, z, objective, xi)


def objective_gradient(w, phi, h, y, C):
    """Gradient of 0.5 tr(w^T w) + C xi with the latent value held fixed."""
    return w - 2.0 * C * np.outer(phi, h * y)


def latent_sgd_step(w, bag, y, cfg, state):
    if state.t < 1:
        raise UsageError(f"update counter must start at 1, got {state.t}")
    with np.errstate(over="ignore", invalid="ignore"):  # reported below as NumericError
        z, br = select_latent(w, bag, y, cfg.selection, cfg.C)
        G = objective_gradient(w, bag[z], br.hinge, y, cfg.C)
        w_new = w - G * (cfg.lr / (state.t + cfg.T))
    if not np.all(np.isfinite(w_new)):
        raise NumericError(f"non-finite update at t={state.t}, z*={z}", t=state.t, z=z)
    return w_new, SgdState(state.t + 1), br


def classical_sgd_step(w, phi, y, cfg, state):
    """Plain L2-SVM step on a single feature vector."""
    with np.errstate(over="ignore", invalid="ignore"):
        s = scores(w, phi)
        h, loss = l2_hinge_loss(s, y)
        G = w - 2.0 * cfg.C * np.outer(phi, h * y)
        w_new = w - G * (cfg.lr / (state.t + cfg.T))
        objective = 0.5 * float((w * w).sum()) + cfg.C * loss
    if not np.all(np.isfinite(w_new)):
        raise NumericError(f"non-finite update at t={state.t}", t=state.t, z=0)
    br = LossBreakdown(h, loss, 0, objective)
    return w_new, SgdState(state.t + 1), br


@dataclass
class TrainLog:
    objectives: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    state: SgdState = field(default_factory=SgdState)


def _sample_order(n, cfg, rng):
    return rng.permutation(n) if cfg.shuffle else np.arange(n)


def train(data, cfg, w=None, n_classes=None, state=None):
    """Run ``cfg.epochs`` passes of latent SGD over ``data``.

    ``data`` is a list of ``(bag, y)`` with ``y`` a label vector. Weights
    start at zero unless ``w`` is given.
    """
    if not data:
        raise UsageError("empty training set")
    fl = np.asarray(data[0][0]).shape[-1]
    bags = []
    for i, (bag, _) in enumerate(data):
        bag = _as_bag(bag)
        if bag.shape[1] != fl:
            raise ConfigError(f"sample {i}: feature length {bag.shape[1]} != {fl}")
        bags.append(bag)
    nc = len(data[0][1]) if n_classes is None else n_classes
    w = np.zeros((fl, nc)) if w is None else np.array(w, dtype=np.float64)
    log = TrainLog(state=state or SgdState())
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        for i in _sample_order(len(data), cfg, rng):
            w, log.state, br = latent_sgd_step(w, bags[i], data[i][1], cfg, log.state)
            log.objectives.append(br.objective)
            log.selected.append(br.z)
    return w, log


def train_classical(X, Y, cfg, w=None, state=None):
    """Classical L2-SVM trainer over rows of ``X`` with label vectors ``Y``."""
    X = np.asarray(X, dtype=np.float64)
    w = np.zeros((X.shape[1], Y.shape[1])) if w is None else np.array(w, dtype=np.float64)
    log = TrainLog(state=state or SgdState())
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        for i in _sample_order(len(X), cfg, rng):
            w, log.state, br = classical_sgd_step(w, X[i], Y[i], cfg, log.state)
            log.objectives.append(br.objective)
    return w, log


def predict(w, bag):
    """Per-class max response over latent values, then argmax."""
    bag = _as_bag(bag, w.shape[0])
    S = (bag @ w).max(axis=0)
    return int(np.argmax(S)), S


def predict_batch(w, bags):
    """Vectorized :func:`predict` over an (N, |Z|, FL) array."""
    S = (np.asarray(bags) @ w).max(axis=1)
    return S.argmax(axis=1), S


# LFB1 layout (all little-endian):
#   4 bytes  magic b"LFB1"
#   uint32   FL, NC, n
#   n x (uint32 region count, uint32 label)
#   float64  vectors, sample by sample, region by region, FL values each

LFB_MAGIC = b"LFB1"


def write_feature_bags(path, bags, labels, n_classes):
    bags = [_as_bag(b) for b in bags]
    fl = bags[0].shape[1]
    with open(path, "wb") as f:
        f.write(LFB_MAGIC + struct.pack("<III", fl, n_classes, len(bags)))
        for b, lab in zip(bags, labels):
            if b.shape[1] != fl:
                raise ConfigError("all bags must share FL")
            f.write(struct.pack("<II", len(b), int(lab)))
        for b in bags:
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def read_feature_bags(path):
    """Return ``(bags, labels, n_classes)``."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != LFB_MAGIC:
        raise DataError(f"{path}: bad magic {buf[:4]!r}, expected {LFB_MAGIC!r}")
    fl, nc, n = struct.unpack_from("<III", buf, 4)
    counts = np.frombuffer(buf, dtype="<u4", count=2 * n, offset=16).reshape(n, 2)
    off = 16 + 8 * n
    need = off + 8 * fl * int(counts[:, 0].sum())
    if len(buf) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(buf)}")
    bags = []
    for m, _ in counts:
        bags.append(np.frombuffer(buf, dtype="<f8", count=int(m) * fl, offset=off).reshape(m, fl).copy())
        off += 8 * int(m) * fl
    return bags, counts[:, 1].astype(np.int64), nc
