"""Experiment configuration: flat ``section.key = value`` text files.

Blank lines and ``#`` comments are ignored. Values are parsed as bool
(``true``/``false``), int, float, comma-separated list, or left as strings.
Unknown sections and keys are errors, so a typo never silently falls back
to a default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .nn import Conv2D, Dense, Dropout, GlobalAvgPool, MaxPool, Network, ReLU
from .svm import TrainConfig

DATA_SOURCES = ("mnist", "cifar10", "cifar100", "synthetic")
ARCHS = ("linear", "tiny", "nin")
ENSEMBLE_MODES = ("frozen", "latent-cnn")


@dataclass
class DataConfig:
    source: str = "synthetic"
    root: str = ""  # empty: $LCNN_DATA_ROOT/<source>
    train_per_class: int = 0  # 0 keeps the full split
    test_per_class: int = 0
    seed: int = 0
    demean: bool = False
    # synthetic generator only
    side: int = 16
    pattern: int = 8
    n_classes: int = 2
    noise: float = 0.3
    n_train: int = 400
    n_test: int = 200
    contrast: float = 0.1

    def validate(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got {self.source!r}")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise ConfigError("per-class subset sizes must be >= 0")


@dataclass
class BackboneConfig:
    arch: str = "linear"
    channels: list = field(default_factory=lambda: [8, 16])
    hidden: int = 64
    dropout: float = 0.3
    epochs: int = 4
    lr: float = 0.1
    batch_size: int = 32

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"backbone.arch must be one of {ARCHS}, got {self.arch!r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"backbone.dropout must be in [0, 1), got {self.dropout}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("backbone needs epochs >= 0, batch_size >= 1 and lr > 0")
        if self.arch != "linear" and len(self.channels) != 2:
            raise ConfigError(f"backbone.channels needs two widths, got {self.channels}")


@dataclass
class RegionConfig:
    patch: int = 8
    flips: bool = True

    def validate(self):
        if self.patch < 1:
            raise ConfigError(f"region.patch must be >= 1, got {self.patch}")


@dataclass
class SvmConfig:
    C: float = 1.0
    lr: float = 1.0
    epochs: int = 1
    T: int = 100_000
    selection: str = "eq4-min"
    shuffle: bool = False
    seed: int = 0

    def train_config(self):
        return TrainConfig(self.C, self.lr, self.epochs, self.T, self.selection, self.seed, self.shuffle)

    def validate(self):
        self.train_config()


@dataclass
class EnsembleConfig:
    mode: str = "frozen"
    fusion: str = "additive"
    use_part: bool = True
    backbone_lr: float = 0.01

    def validate(self):
        if self.mode not in ENSEMBLE_MODES:
            raise ConfigError(f"ensemble.mode must be one of {ENSEMBLE_MODES}, got {self.mode!r}")
        if self.fusion not in ("additive", "concat"):
            raise ConfigError(f"ensemble.fusion must be additive or concat, got {self.fusion!r}")
        if self.fusion == "concat" and self.mode != "frozen":
            raise ConfigError("concat fusion requires ensemble.mode = frozen")


@dataclass
class RunConfig:
    out: str = "runs/default"
    seeds: list = field(default_factory=lambda: [0])

    def validate(self):
        if not self.seeds:
            raise ConfigError("run.seeds must list at least one seed")


SECTIONS = {"data": DataConfig, "backbone": BackboneConfig, "region": RegionConfig,
            "svm": SvmConfig, "ensemble": EnsembleConfig, "run": RunConfig}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    region: RegionConfig = field(default_factory=RegionConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self):
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def set(self, dotted, raw):
        """Assign one ``section.key`` from its text form."""
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config section in {dotted!r}; expected one of {sorted(SECTIONS)}")
        target = getattr(self, section)
        names = {f.name: f for f in dataclasses.fields(target)}
        if key not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(target, key, _coerce(raw, getattr(target, key), dotted))

    def to_text(self):
        lines = []
        for name in SECTIONS:
            for f in dataclasses.fields(getattr(self, name)):
                v = getattr(getattr(self, name), f.name)
                if isinstance(v, bool):
                    v = str(v).lower()
                elif isinstance(v, list):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{name}.{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(raw, current, key):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, list):
            return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def parse_config(text, base=None):
    cfg = base or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        key, value = line.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg.validate()


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


# ---------------------------------------------------------------- backbones


def build_backbone(cfg, input_shape, n_classes, seed):
    """Return ``(network, tap)`` for the configured architecture.

    ``tap`` indexes the layer whose input becomes the SVM feature vector:
    raw pixels for ``linear``, the hidden ReLU output for ``tiny`` and the
    pooled channel means for ``nin``.
    """
    H, W, C = input_shape
    if cfg.arch == "linear":
        return Network(input_shape, [], seed=seed), 0
    c1, c2 = cfg.channels
    if cfg.arch == "tiny":
        if H < 10 or W < 10:
            raise ConfigError(f"tiny backbone needs inputs of at least 10x10, got {H}x{W}")
        h = ((H - 4) // 2 - 2) // 2
        w = ((W - 4) // 2 - 2) // 2
        layers = [Conv2D(5, 5, C, c1), ReLU(), MaxPool(2, 2),
                  Conv2D(3, 3, c1, c2), ReLU(), MaxPool(2, 2),
                  Dense(h * w * c2, cfg.hidden), ReLU(),
                  Dropout(cfg.dropout), Dense(cfg.hidden, n_classes)]
        return Network(input_shape, layers, seed=seed), 8
    # nin: three mlpconv blocks (conv + two 1x1 convs), global average pooling
    layers = [Conv2D(5, 5, C, c1, padding=2), ReLU(), Conv2D(1, 1, c1, c1), ReLU(),
              Conv2D(1, 1, c1, c1), ReLU(), MaxPool(2, 2), Dropout(cfg.dropout),
              Conv2D(5, 5, c1, c2, padding=2), ReLU(), Conv2D(1, 1, c2, c2), ReLU(),
              Conv2D(1, 1, c2, c2), ReLU(), MaxPool(2, 2), Dropout(cfg.dropout),
              Conv2D(3, 3, c2, c2, padding=1), ReLU(), Conv2D(1, 1, c2, c2), ReLU(),
              Conv2D(1, 1, c2, n_classes), GlobalAvgPool()]
    if H < 4 or W < 4:
        raise ConfigError(f"nin backbone needs inputs of at least 4x4, got {H}x{W}")
    net = Network(input_shape, layers, seed=seed)
    return net, len(layers)
