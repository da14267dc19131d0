"""Experiment configuration in INI form.

Every random choice has its own seed key. A minimal file::

    [data]
    source = synthetic
    n = 1000
    seed = 0

    [attacks]
    names = attack_p

Everything else falls back to the defaults below.
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from bmia.laplace import DEFAULT_N_SAMPLES, DEFAULT_PRIOR_GRID, CurvatureKind, PredictiveMode
from bmia.nn import TrainConfig

KNOWN_ATTACKS = ("attack_p", "attack_r", "lira_offline", "bmia", "qmia")
DATA_SOURCES = ("synthetic", "csv", "toy_regression")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclasses.dataclass(frozen=True)
class DataSpec:
    source: str = "synthetic"
    n: int = 10_000
    dims: int = 50
    classes: int = 10
    cluster_spread: float = 1.0
    separation: float = 3.0
    seed: int = 0
    csv_path: str = ""
    label_column: int = -1
    has_header: bool = False


@dataclasses.dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float, float] = (0.2, 0.2, 0.4, 0.2)
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    hidden: tuple[int, ...] = (256, 128, 64, 32)
    activation: str = "relu"


@dataclasses.dataclass(frozen=True)
class ReferenceSpec:
    n_models: int = 8
    base_seed: int = 1000


@dataclasses.dataclass(frozen=True)
class LaplaceSpec:
    curvature: CurvatureKind = CurvatureKind.KFAC
    prior_grid: tuple[float, ...] = DEFAULT_PRIOR_GRID
    tuning: str = "marglik"
    n_samples: int = DEFAULT_N_SAMPLES
    predictive: PredictiveMode = PredictiveMode.LINEARIZED_LOGIT
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class QmiaSpec:
    hidden: tuple[int, ...] = (64, 64)
    taus: tuple[float, ...] = (0.5, 0.95, 0.99, 0.999)
    train: TrainConfig = TrainConfig(learning_rate=0.01, epochs=60, milestone_epochs=(40,),
                                     weight_decay=1e-4, batch_size=128)
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class DemoSpec:
    n_train: int = 1000
    n_test: int = 2000
    hidden: tuple[int, ...] = (50, 50)
    train: TrainConfig = TrainConfig(learning_rate=0.02, epochs=300, milestone_epochs=(240,),
                                     weight_decay=1e-4, batch_size=32)
    qr_train: TrainConfig = TrainConfig(learning_rate=0.02, epochs=300, milestone_epochs=(240,),
                                        weight_decay=1e-4, batch_size=32)
    grid: tuple[float, float, int] = (-6.0, 6.0, 121)
    data_seed: int = 0
    test_seed: int = 1
    model_seed: int = 0
    qr_seed: int = 1


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec = DataSpec()
    split: SplitSpec = SplitSpec()
    model: ModelSpec = ModelSpec()
    train: TrainConfig = TrainConfig()
    target_seed: int = 1
    reference: ReferenceSpec = ReferenceSpec()
    laplace: LaplaceSpec = LaplaceSpec()
    attacks: tuple[str, ...] = KNOWN_ATTACKS
    alphas: tuple[float, ...] = (0.001, 0.01, 0.05)
    qmia: QmiaSpec = QmiaSpec()
    demo: DemoSpec = DemoSpec()
    output_dir: str = "out"
    record_timing: bool = False

    def seeds(self) -> dict[str, int]:
        return {"data.seed": self.data.seed, "split.seed": self.split.seed,
                "train.target_seed": self.target_seed, "reference.base_seed": self.reference.base_seed,
                "laplace.seed": self.laplace.seed, "qmia.seed": self.qmia.seed,
                "demo.data_seed": self.demo.data_seed, "demo.test_seed": self.demo.test_seed,
                "demo.model_seed": self.demo.model_seed, "demo.qr_seed": self.demo.qr_seed}

    def with_seed_offset(self, offset: int) -> ExperimentConfig:
        """Every seed shifted by ``offset`` (mod 2**64); distinct seeds stay distinct."""
        def shift(s: int) -> int:
            return (s + offset) % 2**64
        return dataclasses.replace(
            self,
            data=dataclasses.replace(self.data, seed=shift(self.data.seed)),
            split=dataclasses.replace(self.split, seed=shift(self.split.seed)),
            target_seed=shift(self.target_seed),
            reference=dataclasses.replace(self.reference, base_seed=shift(self.reference.base_seed)),
            laplace=dataclasses.replace(self.laplace, seed=shift(self.laplace.seed)),
            qmia=dataclasses.replace(self.qmia, seed=shift(self.qmia.seed)),
            demo=dataclasses.replace(self.demo, data_seed=shift(self.demo.data_seed),
                                     test_seed=shift(self.demo.test_seed),
                                     model_seed=shift(self.demo.model_seed),
                                     qr_seed=shift(self.demo.qr_seed)),
        )


class _Section:
    """Typed, consumption-tracking view of one INI section."""

    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self.items = dict(parser.items(name)) if parser.has_section(name) else {}
        self.used: set[str] = set()

    def _raw(self, key):
        self.used.add(key)
        return self.items.get(key)

    def _convert(self, key, default, conv):
        raw = self._raw(key)
        if raw is None:
            return default
        try:
            return conv(raw.strip())
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{self.name}] {key} = {raw!r}: {exc}") from None

    def str(self, key, default):
        return self._convert(key, default, str)

    def int(self, key, default):
        return self._convert(key, default, int)

    def seed(self, key, default):
        v = self.int(key, default)
        if not 0 <= v < 2**64:
            raise ConfigError(f"[{self.name}] {key} must be an unsigned 64-bit integer")
        return v

    def float(self, key, default):
        return self._convert(key, default, float)

    def bool(self, key, default):
        def conv(s):
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        return self._convert(key, default, conv)

    def list(self, key, default, conv):
        return self._convert(key, default,
                             lambda s: tuple(conv(p.strip()) for p in s.split(",") if p.strip()))

    def check_unused(self):
        extra = set(self.items) - self.used
        if extra:
            raise ConfigError(f"[{self.name}] unknown keys: {', '.join(sorted(extra))}")


def _train_config(sec: _Section, default: TrainConfig) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate=sec.float("learning_rate", default.learning_rate),
            momentum=sec.float("momentum", default.momentum),
            weight_decay=sec.float("weight_decay", default.weight_decay),
            epochs=sec.int("epochs", default.epochs),
            milestone_epochs=sec.list("milestones", default.milestone_epochs, int),
            milestone_factor=sec.float("milestone_factor", default.milestone_factor),
            batch_size=sec.int("batch_size", default.batch_size),
            seed=default.seed,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {exc}") from None


_SECTIONS = ("experiment", "data", "split", "model", "train", "reference", "laplace", "attacks",
             "qmia", "qmia_train", "demo", "demo_train", "demo_qr_train")


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    s = {name: _Section(parser, name) for name in _SECTIONS}
    d = ExperimentConfig()

    sec = s["data"]
    data = DataSpec(
        source=sec.str("source", d.data.source), n=sec.int("n", d.data.n),
        dims=sec.int("dims", d.data.dims), classes=sec.int("classes", d.data.classes),
        cluster_spread=sec.float("cluster_spread", d.data.cluster_spread),
        separation=sec.float("separation", d.data.separation), seed=sec.seed("seed", d.data.seed),
        csv_path=sec.str("csv_path", d.data.csv_path),
        label_column=sec.int("label_column", d.data.label_column),
        has_header=sec.bool("has_header", d.data.has_header))
    if data.source not in DATA_SOURCES:
        raise ConfigError(f"[data] source must be one of {', '.join(DATA_SOURCES)}")
    if data.source == "csv" and not data.csv_path:
        raise ConfigError("[data] csv source needs csv_path")

    sec = s["split"]
    fractions = sec.list("fractions", d.split.fractions, float)
    if len(fractions) != 4 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise ConfigError("[split] fractions must be four non-negative numbers summing to at most 1")
    split = SplitSpec(fractions, sec.seed("seed", d.split.seed))

    sec = s["model"]
    model = ModelSpec(sec.list("hidden", d.model.hidden, int), sec.str("activation", d.model.activation))
    if model.activation not in ("relu", "tanh"):
        raise ConfigError("[model] activation must be relu or tanh")

    sec = s["train"]
    train = _train_config(sec, d.train)
    target_seed = sec.seed("target_seed", d.target_seed)

    sec = s["reference"]
    reference = ReferenceSpec(sec.int("n_models", d.reference.n_models),
                              sec.seed("base_seed", d.reference.base_seed))
    if reference.n_models < 1:
        raise ConfigError("[reference] n_models must be >= 1")

    sec = s["laplace"]
    try:
        laplace = LaplaceSpec(
            curvature=CurvatureKind(sec.str("curvature", d.laplace.curvature.value)),
            prior_grid=sec.list("prior_grid", d.laplace.prior_grid, float),
            tuning=sec.str("tuning", d.laplace.tuning),
            n_samples=sec.int("n_samples", d.laplace.n_samples),
            predictive=PredictiveMode(sec.str("predictive", d.laplace.predictive.value)),
            seed=sec.seed("seed", d.laplace.seed))
    except ValueError as exc:
        raise ConfigError(f"[laplace] {exc}") from None
    if laplace.tuning not in ("marglik", "validation"):
        raise ConfigError("[laplace] tuning must be marglik or validation")
    if laplace.n_samples < 2:
        raise ConfigError("[laplace] n_samples must be >= 2")
    if not laplace.prior_grid or any(g <= 0 for g in laplace.prior_grid):
        raise ConfigError("[laplace] prior_grid must be non-empty and positive")

    sec = s["attacks"]
    attacks = sec.list("names", d.attacks, str)
    bad = [a for a in attacks if a not in KNOWN_ATTACKS]
    if bad or not attacks:
        raise ConfigError(f"[attacks] unknown attack(s) {bad}; known: {', '.join(KNOWN_ATTACKS)}")
    alphas = sec.list("alphas", d.alphas, float)
    if not alphas or any(not 0 < a < 1 for a in alphas):
        raise ConfigError("[attacks] alphas must lie in (0, 1)")
    if "lira_offline" in attacks and reference.n_models < 2:
        raise ConfigError("lira_offline needs [reference] n_models >= 2")

    sec = s["qmia"]
    qmia = QmiaSpec(sec.list("hidden", d.qmia.hidden, int), sec.list("taus", d.qmia.taus, float),
                    _train_config(s["qmia_train"], d.qmia.train), sec.seed("seed", d.qmia.seed))
    if any(not 0 < t < 1 for t in qmia.taus):
        raise ConfigError("[qmia] taus must lie in (0, 1)")

    sec = s["demo"]
    demo = DemoSpec(
        n_train=sec.int("n_train", d.demo.n_train), n_test=sec.int("n_test", d.demo.n_test),
        hidden=sec.list("hidden", d.demo.hidden, int),
        train=_train_config(s["demo_train"], d.demo.train),
        qr_train=_train_config(s["demo_qr_train"], d.demo.qr_train),
        grid=(sec.float("grid_low", d.demo.grid[0]), sec.float("grid_high", d.demo.grid[1]),
              sec.int("grid_points", d.demo.grid[2])),
        data_seed=sec.seed("data_seed", d.demo.data_seed),
        test_seed=sec.seed("test_seed", d.demo.test_seed),
        model_seed=sec.seed("model_seed", d.demo.model_seed),
        qr_seed=sec.seed("qr_seed", d.demo.qr_seed))

    sec = s["experiment"]
    output_dir = sec.str("output_dir", d.output_dir)
    record_timing = sec.bool("record_timing", d.record_timing)

    for sec in s.values():
        sec.check_unused()
    return ExperimentConfig(data, split, model, train, target_seed, reference, laplace, attacks,
                            alphas, qmia, demo, output_dir, record_timing)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
