"""Root/part latent model ensemble and the latent-CNN training loop.

The root model is a backbone plus SVM head that sees whole images; the part
model sees the crops of a :class:`RegionSet`. Fused score for class c::

    S_c = s_root,c(x) + max_z s_part,c(crop_z(x))
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import svm
from .errors import ConfigError, UsageError, VersionError
from .nn import (Network, network_from_bytes, network_to_bytes, softmax,
                 softmax_cross_entropy)
from .regions import Region, RegionSet, canonical_grid, crop_all, crop_batch

FUSIONS = ("additive", "concat")


def with_bias(feats):
    return np.concatenate([feats, np.ones((len(feats), 1))], axis=1)


def extract_features(net, images, tap, batch_size=512):
    """Flattened activations entering layer ``tap`` with a trailing 1 appended.

    Accepts one (H, W, C) image or an (N, H, W, C) batch; returns an FL
    vector or an (N, FL) matrix respectively.
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == len(net.input_shape)
    if single:
        images = images[None]
    if not 0 <= tap <= len(net.layers):
        raise ConfigError(f"feature tap {tap} outside [0, {len(net.layers)}]")
    parts = []
    for i in range(0, len(images), batch_size):
        out, _ = net.forward(images[i:i + batch_size], "eval", upto=tap)
        parts.append(out.reshape(len(out), -1))
    feats = with_bias(np.concatenate(parts))
    return feats[0] if single else feats


def feature_length(net, tap):
    return int(np.prod(net.shapes[tap])) + 1


def part_bag(net, image, regions, tap):
    """Feature bag of one image: one row per region."""
    return extract_features(net, crop_all(image, regions), tap)


def part_bags(net, images, regions, tap, batch_size=512):
    """(N, |Z|, FL) bags for a batch, one region at a time."""
    per_region = [extract_features(net, crop_batch(images, r), tap, batch_size) for r in regions]
    return np.stack(per_region, axis=1)


def feature_loss_grad(w, h, y, C):
    """d(C * xi)/d phi for a fixed region: -2 C sum_c h_c y_c w[:, c]."""
    return -2.0 * C * (w @ (h * y))


@dataclass
class EnsembleModel:
    root_net: Network
    part_net: Network
    root_w: np.ndarray
    part_w: np.ndarray
    regions: RegionSet
    tap: int
    fusion: str = "additive"
    joint_w: np.ndarray = None
    root_state: svm.SgdState = field(default_factory=svm.SgdState)
    part_state: svm.SgdState = field(default_factory=svm.SgdState)

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        fr, fp = feature_length(self.root_net, self.tap), feature_length(self.part_net, self.tap)
        if self.root_w.shape[0] != fr:
            raise ConfigError(f"root SVM has FL={self.root_w.shape[0]}, root features have {fr}")
        if self.part_w.shape[0] != fp:
            raise ConfigError(f"part SVM has FL={self.part_w.shape[0]}, part features have {fp}")
        if self.root_w.shape[1] != self.part_w.shape[1] or self.root_w.shape[1] < 2:
            raise ConfigError("root and part SVMs must share NC >= 2")
        if tuple(self.part_net.input_shape[:2]) != tuple(self.regions.patch_hw):
            raise ConfigError(f"part backbone input {self.part_net.input_shape} does not match "
                              f"region size {self.regions.patch_hw}")
        if tuple(self.root_net.input_shape[:2]) != tuple(self.regions.image_hw):
            raise ConfigError(f"root backbone input {self.root_net.input_shape} does not match "
                              f"image size {self.regions.image_hw}")
        if self.fusion == "concat" and self.joint_w is None:
            self.joint_w = np.zeros((fr + fp - 1, self.n_classes))

    @property
    def n_classes(self):
        return self.root_w.shape[1]

    @classmethod
    def create(cls, root_net, part_net, n_classes, regions, tap, fusion="additive"):
        return cls(root_net, part_net,
                   np.zeros((feature_length(root_net, tap), n_classes)),
                   np.zeros((feature_length(part_net, tap), n_classes)),
                   regions, tap, fusion)

    def copy(self):
        return EnsembleModel(self.root_net.copy(), self.part_net.copy(), self.root_w.copy(),
                             self.part_w.copy(), self.regions, self.tap, self.fusion,
                             None if self.joint_w is None else self.joint_w.copy(),
                             self.root_state, self.part_state)


@dataclass(frozen=True)
class LatentCnnConfig:
    svm: svm.TrainConfig = field(default_factory=svm.TrainConfig)
    backbone_lr: float = 0.0
    root_backbone_lr: float = 0.0
    epochs: int = None  # None: use svm.epochs
    batch_size: int = 1
    use_part: bool = True

    def __post_init__(self):
        if self.backbone_lr < 0 or self.root_backbone_lr < 0:
            raise ConfigError("backbone learning rates must be >= 0")
        if self.epochs is None:
            object.__setattr__(self, "epochs", self.svm.epochs)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be >= 1")

    @property
    def frozen(self):
        return self.backbone_lr == 0 and self.root_backbone_lr == 0


@dataclass
class StepResult:
    breakdown: svm.LossBreakdown
    param_grads: list
    output_grad: np.ndarray


def latent_cnn_train_step(model, image, y, cfg):
    """One latent-CNN update of the part branch on one image.

    Every region is passed through the part backbone, the latent SVM picks
    z*, the part SVM takes one SGD step, and the squared-hinge loss at z*
    (weighted by C, w held at its pre-step value) is backpropagated into the
    part backbone. Only row z* of the output gradient is non-zero.
    """
    crops = crop_all(image, model.regions)
    rng = np.random.default_rng([cfg.svm.seed, model.part_state.t])
    out, trace = model.part_net.forward(crops, "train", rng=rng, upto=model.tap)
    if cfg.backbone_lr == 0:
        # frozen backbone: features are the eval-mode ones
        out, _ = model.part_net.forward(crops, "eval", upto=model.tap)
    bag = with_bias(out.reshape(len(out), -1))
    w = model.part_w
    w_new, state, br = svm.latent_sgd_step(w, bag, y, cfg.svm, model.part_state)
    dphi = feature_loss_grad(w, br.hinge, y, cfg.svm.C)
    dout = np.zeros_like(trace.output)
    dout[br.z] = dphi[:-1].reshape(out.shape[1:])
    grads, _ = model.part_net.backward(trace, dout)
    model.part_w, model.part_state = w_new, state
    if cfg.backbone_lr > 0:
        model.part_net.sgd_step(grads, cfg.backbone_lr)
    return StepResult(br, grads, dout)


def svm_backbone_step(net, w, state, image, y, tap, svm_cfg, backbone_lr):
    """Non-latent counterpart: one classical SVM step plus backbone update.

    Returns ``(w', state', StepResult)``; ``net`` is updated in place when
    ``backbone_lr > 0``.
    """
    rng = np.random.default_rng([svm_cfg.seed, state.t])
    out, trace = net.forward(np.asarray(image)[None], "train", rng=rng, upto=tap)
    if backbone_lr == 0:
        out, _ = net.forward(np.asarray(image)[None], "eval", upto=tap)
    phi = with_bias(out.reshape(1, -1))[0]
    w_new, state_new, br = svm.classical_sgd_step(w, phi, y, svm_cfg, state)
    dphi = feature_loss_grad(w, br.hinge, y, svm_cfg.C)
    dout = dphi[:-1].reshape(trace.output.shape)
    grads, _ = net.backward(trace, dout)
    if backbone_lr > 0:
        net.sgd_step(grads, backbone_lr)
    return w_new, state_new, StepResult(br, grads, dout)


# ---------------------------------------------------------------- Algorithm 2


def _check_dataset(model, ds):
    if len(ds) == 0:
        raise UsageError("empty dataset")
    if tuple(ds.image_shape) != model.root_net.input_shape:
        raise ConfigError(f"images {ds.image_shape} do not match root backbone input {model.root_net.input_shape}")
    if ds.n_classes != model.n_classes:
        raise ConfigError(f"dataset has {ds.n_classes} classes, model has {model.n_classes}")
    probe = crop_all(ds.images[0], model.regions)
    if probe.shape[1:] != model.part_net.input_shape:
        raise ConfigError(f"crops {probe.shape[1:]} do not match part backbone input {model.part_net.input_shape}")


def ensemble_train(model, ds, cfg, log_fn=None):
    """Train both SVM heads per sample: part step (latent) then root step.

    With both backbone learning rates at zero the features are computed
    once up front; otherwise each step re-runs the backbones and updates
    them (part through the selected region only). ``model`` is updated in
    place and returned with one log record per epoch.
    """
    _check_dataset(model, ds)
    labels = np.array([svm.label_vector(c, model.n_classes) for c in ds.labels])
    rng = np.random.default_rng(cfg.svm.seed)
    log = []
    if cfg.frozen:
        root_X = extract_features(model.root_net, ds.images, model.tap)
        part_B = part_bags(model.part_net, ds.images, model.regions, model.tap)
    for epoch in range(cfg.epochs):
        objectives = []
        order = rng.permutation(len(ds)) if cfg.svm.shuffle else np.arange(len(ds))
        for i in order:
            y = labels[i]
            if model.fusion == "concat":
                if not cfg.frozen:
                    raise ConfigError("concat fusion is only available with frozen backbones")
                bag = np.concatenate([np.repeat(root_X[i][None, :-1], len(part_B[i]), 0), part_B[i]], axis=1)
                model.joint_w, model.part_state, br = svm.latent_sgd_step(
                    model.joint_w, bag, y, cfg.svm, model.part_state)
                objectives.append(br.objective)
                continue
            if cfg.use_part:
                if cfg.frozen:
                    model.part_w, model.part_state, br = svm.latent_sgd_step(
                        model.part_w, part_B[i], y, cfg.svm, model.part_state)
                else:
                    br = latent_cnn_train_step(model, ds.images[i], y, cfg).breakdown
                objectives.append(br.objective)
            if cfg.frozen:
                model.root_w, model.root_state, br = svm.classical_sgd_step(
                    model.root_w, root_X[i], y, cfg.svm, model.root_state)
            else:
                model.root_w, model.root_state, res = svm_backbone_step(
                    model.root_net, model.root_w, model.root_state, ds.images[i], y, model.tap,
                    cfg.svm, cfg.root_backbone_lr)
                br = res.breakdown
            objectives.append(br.objective)
        if cfg.frozen:
            pred = fused_scores_from_features(model, root_X, part_B).argmax(axis=1)
        else:
            pred = ensemble_scores(model, ds.images).argmax(axis=1)
        rec = {"epoch": epoch + 1, "split": "train", "error_rate": float((pred != ds.labels).mean()),
               "mean_objective": float(np.mean(objectives))}
        log.append(rec)
        if log_fn:
            log_fn(rec)
    return model, log


def fused_scores_from_features(model, root_X, part_B):
    if model.fusion == "concat":
        joint = np.concatenate([np.repeat(root_X[:, None, :-1], part_B.shape[1], 1), part_B], axis=2)
        return (joint @ model.joint_w).max(axis=1)
    return root_X @ model.root_w + (part_B @ model.part_w).max(axis=1)


def ensemble_scores(model, images):
    images = np.asarray(images, dtype=np.float64)
    root_X = extract_features(model.root_net, images, model.tap)
    part_B = part_bags(model.part_net, images, model.regions, model.tap)
    return fused_scores_from_features(model, root_X, part_B)


def ensemble_predict(model, image):
    """``(class, fused scores)`` for one image; ties go to the lowest class."""
    S = ensemble_scores(model, np.asarray(image)[None])[0]
    return int(np.argmax(S)), S


def root_scores(model, images):
    return extract_features(model.root_net, images, model.tap) @ model.root_w


# ---------------------------------------------------------------- CNN baselines


def class_probs(net, images, batch_size=512):
    out = np.concatenate([net.forward(images[i:i + batch_size], "eval")[0]
                          for i in range(0, len(images), batch_size)])
    return out if net.layers and net.layers[-1].kind == "softmax" else softmax(out)


def region_avg_probs(net, images, regions, batch_size=512):
    return np.mean([class_probs(net, crop_batch(images, r), batch_size) for r in regions], axis=0)


def average_predict(net_a, net_b, images, regions):
    """Mean of A's whole-image probabilities and B's region-averaged ones."""
    images = np.asarray(images, dtype=np.float64)
    if net_a.output_shape != net_b.output_shape:
        raise ConfigError(f"class count mismatch: {net_a.output_shape} vs {net_b.output_shape}")
    p = 0.5 * (class_probs(net_a, images) + region_avg_probs(net_b, images, regions))
    return p.argmax(axis=1)


def train_classifier(net, ds, epochs, lr, batch_size=32, seed=0, regions=None, log_fn=None):
    """Minibatch softmax cross-entropy training of a backbone, in place.

    With ``regions`` every sample is replaced, each epoch, by one uniformly
    drawn region crop.
    """
    rng = np.random.default_rng(seed)
    n = len(ds)
    for epoch in range(epochs):
        order = rng.permutation(n)
        picks = rng.integers(0, len(regions), size=n) if regions is not None else None
        losses = []
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            if regions is None:
                xb = ds.images[idx]
            else:
                xb = np.stack([crop_all(ds.images[i], [regions[picks[i]]])[0] for i in idx])
            out, trace = net.forward(xb, "train", rng=rng)
            loss, dout = softmax_cross_entropy(out, ds.labels[idx])
            grads, _ = net.backward(trace, dout)
            net.sgd_step(grads, lr)
            losses.append(loss)
        if log_fn:
            log_fn({"epoch": epoch + 1, "split": "train", "mean_objective": float(np.mean(losses))})
    return net


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    error_rate: float
    confusion: np.ndarray

    @property
    def n(self):
        return int(self.confusion.sum())


def evaluate(predict_fn, ds):
    """Error rate and confusion matrix (rows true class, columns predicted).

    ``predict_fn`` maps an (N, H, W, C) batch to N class indices.
    """
    if len(ds) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    pred = np.asarray(predict_fn(ds.images), dtype=np.int64)
    confusion = np.zeros((ds.n_classes, ds.n_classes), dtype=np.int64)
    np.add.at(confusion, (ds.labels, pred), 1)
    return EvalResult(float((pred != ds.labels).mean()), confusion)


# ---------------------------------------------------------------- persistence
#
# LME1 layout (all little-endian):
#   4 bytes   magic b"LME1"
#   uint32    format version (1)
#   uint32    header length L
#   L bytes   UTF-8 JSON: {"tap", "fusion", "regions": [[top, left, h, w, flip], ...],
#             "image_hw", "sections": [[name, nbytes], ...], "root_t", "part_t"}
#   sections  in header order: "root_net" and "part_net" are LNN1 blobs;
#             "root_w", "part_w" and optional "joint_w" are float64 FL x NC
#             matrices preceded by two uint32 dims.

LME_MAGIC = b"LME1"
LME_VERSION = 1


def _matrix_bytes(m):
    return struct.pack("<II", *m.shape) + np.ascontiguousarray(m, dtype="<f8").tobytes()


def _matrix_from(buf):
    r, c = struct.unpack_from("<II", buf)
    return np.frombuffer(buf, dtype="<f8", count=r * c, offset=8).reshape(r, c).astype(np.float64)


def save_ensemble(model, path):
    sections = [("root_net", network_to_bytes(model.root_net)),
                ("part_net", network_to_bytes(model.part_net)),
                ("root_w", _matrix_bytes(model.root_w)),
                ("part_w", _matrix_bytes(model.part_w))]
    if model.joint_w is not None:
        sections.append(("joint_w", _matrix_bytes(model.joint_w)))
    header = json.dumps({
        "tap": model.tap, "fusion": model.fusion,
        "regions": model.regions.as_tuples(), "image_hw": list(model.regions.image_hw),
        "sections": [[n, len(b)] for n, b in sections],
        "root_t": model.root_state.t, "part_t": model.part_state.t,
    }).encode()
    with open(path, "wb") as f:
        f.write(LME_MAGIC + struct.pack("<II", LME_VERSION, len(header)) + header)
        for _, b in sections:
            f.write(b)


def load_ensemble(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != LME_MAGIC:
        raise VersionError(f"{path}: not an ensemble model file (magic {buf[:4]!r})")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != LME_VERSION:
        raise VersionError(f"{path}: unsupported ensemble file version {version}")
    header = json.loads(buf[12:12 + hlen])
    off, parts = 12 + hlen, {}
    for name, n in header["sections"]:
        parts[name] = buf[off:off + n]
        off += n
    regions = RegionSet(tuple(Region.from_tuple(t) for t in header["regions"]), tuple(header["image_hw"]))
    model = EnsembleModel(network_from_bytes(parts["root_net"]), network_from_bytes(parts["part_net"]),
                          _matrix_from(parts["root_w"]), _matrix_from(parts["part_w"]), regions,
                          header["tap"], header["fusion"],
                          _matrix_from(parts["joint_w"]) if "joint_w" in parts else None,
                          svm.SgdState(header["root_t"]), svm.SgdState(header["part_t"]))
    return model


def default_regions(image_hw, patch_hw, flips=True):
    return canonical_grid(image_hw[0], image_hw[1], patch_hw[0], patch_hw[1], flips)
