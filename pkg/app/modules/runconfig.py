"""Plain-text run configuration: parse, validate, emit.

Format::

    # comment
    [attack]
    epsilon = 0.03
    step_size = 1/255
    [enhance]
    lambda = inf

Values may be ints, reals (fractions and ``inf`` allowed), booleans
(true/false/on/off/yes/no), strings, or comma-separated lists. Unknown
sections or keys, type errors and constraint violations are rejected with
the offending line number.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Tuple

# Add parent directory for config import
sys.path.insert(0, str(Path(__file__).parent.parent.parent))
from config import BaselineConfig, BenchConfig, DatasetConfig, EngineConfig, EnhanceConfig, SystemConfig

from app.modules.attack import CONSTRAINTS, METHODS
from app.modules.errors import ConfigError, RejectedInputError
from app.modules.nn import build_model

MODES = ("none", "ila", "ilapp")
SWEEPS = ("p", "lambda", "layer", "seeds", "baselines")


def _opt(default, kind: str, key: Optional[str] = None):
    meta = {"kind": kind}
    if key:
        meta["key"] = key
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class DataSection:
    seed: int = _opt(DatasetConfig.SEED, "int")
    train_size: int = _opt(DatasetConfig.TRAIN_SIZE, "int")
    test_size: int = _opt(DatasetConfig.TEST_SIZE, "int")
    classes: int = _opt(DatasetConfig.CLASSES, "int")
    channels: int = _opt(DatasetConfig.SHAPE[0], "int")
    height: int = _opt(DatasetConfig.SHAPE[1], "int")
    width: int = _opt(DatasetConfig.SHAPE[2], "int")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass
class ModelSection:
    source: str = _opt(BenchConfig.SOURCE, "str")
    victims: List[str] = _opt(list(BenchConfig.VICTIMS), "list")
    epochs: int = _opt(EngineConfig.EPOCHS, "int")
    lr: float = _opt(EngineConfig.LEARNING_RATE, "float")
    batch: int = _opt(EngineConfig.BATCH_SIZE, "int")
    momentum: float = _opt(EngineConfig.MOMENTUM, "float")
    accuracy_floor: float = _opt(EngineConfig.ACCURACY_FLOOR, "float")


@dataclass
class AttackSection:
    method: str = _opt(BaselineConfig.METHOD, "str")
    constraint: str = _opt(BaselineConfig.CONSTRAINT, "str")
    epsilon: float = _opt(BaselineConfig.EPSILON, "float")
    steps: int = _opt(BaselineConfig.STEPS, "int")
    step_size: float = _opt(BaselineConfig.STEP_SIZE, "float")
    momentum: float = _opt(BaselineConfig.MOMENTUM, "float")
    random_start: float = _opt(-1.0, "float")          # < 0 means "epsilon"
    ensemble: List[str] = _opt([], "list")             # extra baselines pooled into one guide


@dataclass
class EnhanceSection:
    mode: str = _opt(EnhanceConfig.MODE, "str")
    lam: float = _opt(EnhanceConfig.LAMBDA, "float", key="lambda")
    normalized: bool = _opt(EnhanceConfig.NORMALIZED, "bool")
    steps: int = _opt(EnhanceConfig.STEPS, "int")
    step_size: float = _opt(-1.0, "float")             # < 0 means "same as attack"
    tap: str = _opt(EnhanceConfig.TAP, "str")


@dataclass
class BenchSection:
    population: int = _opt(BenchConfig.POPULATION, "int")
    quantize: bool = _opt(BenchConfig.QUANTIZE, "bool")
    include_source: bool = _opt(BenchConfig.INCLUDE_SOURCE, "bool")
    sweep: str = _opt(BenchConfig.SWEEP, "str")
    values: List[str] = _opt([], "list")
    seeds: List[str] = _opt([str(s) for s in BenchConfig.SEEDS], "list")
    bitmaps: bool = _opt(False, "bool")


@dataclass
class RunSection:
    seed: int = _opt(SystemConfig.SEED, "int")
    out: str = _opt(SystemConfig.OUTPUT_DIR, "str")
    threads: int = _opt(SystemConfig.THREADS, "int")


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    attack: AttackSection = field(default_factory=AttackSection)
    enhance: EnhanceSection = field(default_factory=EnhanceSection)
    bench: BenchSection = field(default_factory=BenchSection)
    run: RunSection = field(default_factory=RunSection)

    @property
    def start_radius(self) -> float:
        return self.attack.epsilon if self.attack.random_start < 0 else self.attack.random_start

    @property
    def enhance_step_size(self) -> float:
        return self.attack.step_size if self.enhance.step_size < 0 else self.enhance.step_size

    @property
    def victims(self) -> List[str]:
        return list(self.model.victims)

    def with_values(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. with_values(attack={'steps': 5})."""
        updated = {name: replace(getattr(self, name), **values) for name, values in sections.items()}
        return replace(self, **updated)


SECTIONS = [f.name for f in fields(RunConfig)]


def _key(f) -> str:
    return f.metadata.get("key", f.name)


def _section_fields(section_name: str) -> Dict[str, object]:
    section_cls = type(getattr(RunConfig(), section_name))
    return {_key(f): f for f in fields(section_cls)}


# ==========================================
# Value codecs
# ==========================================
_TRUE = ("true", "on", "yes", "1")
_FALSE = ("false", "off", "no", "0")


def _parse_value(kind: str, raw: str, line: Optional[int]):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            lowered = raw.lower()
            if lowered in ("inf", "+inf", "infinity"):
                return math.inf
            if "/" in raw:
                return float(Fraction(raw))
            value = float(raw)
            if math.isnan(value):
                raise ValueError("nan")
            return value
        if kind == "bool":
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "list":
            return [item.strip() for item in raw.split(",") if item.strip()]
        if not raw:
            raise ValueError("empty string")
        return raw
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot read {raw!r} as {kind}", line=line) from None


def _emit_value(kind: str, value) -> str:
    if kind == "float":
        return "inf" if math.isinf(value) else repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    if kind == "list":
        return ", ".join(value)
    return str(value)


# ==========================================
# Parse / emit / validate
# ==========================================
def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    lines: Dict[Tuple[str, str], int] = {}
    section: Optional[str] = None
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", line=number)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=number)
        if section is None:
            raise ConfigError("key outside of any [section]", line=number)
        key, raw = (part.strip() for part in line.split("=", 1))
        known = _section_fields(section)
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]", line=number)
        if (section, key) in lines:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", line=number)
        f = known[key]
        setattr(getattr(cfg, section), f.name, _parse_value(f.metadata["kind"], raw, number))
        lines[(section, key)] = number
    _apply_constraint_defaults(cfg, lines)
    validate_config(cfg, lines)
    return cfg


def parse_config(path) -> RunConfig:
    """Read and validate a run configuration file; an empty file yields all defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config_text(path.read_text(encoding="utf-8"))


def _apply_constraint_defaults(cfg: RunConfig, lines: Dict[Tuple[str, str], int]) -> None:
    if cfg.attack.constraint == "l2":
        if ("attack", "epsilon") not in lines:
            cfg.attack.epsilon = BaselineConfig.L2_EPSILON
        if ("attack", "step_size") not in lines:
            cfg.attack.step_size = BaselineConfig.L2_STEP_SIZE


def emit_config(cfg: RunConfig) -> str:
    out = []
    for section in SECTIONS:
        out.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in fields(obj):
            out.append(f"{_key(f)} = {_emit_value(f.metadata['kind'], getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


def validate_config(cfg: RunConfig, lines: Optional[Dict[Tuple[str, str], int]] = None) -> None:
    """Check every module precondition before any work starts."""
    lines = lines or {}

    def fail(section: str, key: str, message: str):
        raise ConfigError(f"[{section}] {key}: {message}", line=lines.get((section, key)))

    d = cfg.data
    for key in ("train_size", "test_size", "classes", "channels", "height", "width"):
        if getattr(d, key) < 1:
            fail("data", key, "must be >= 1")
    if d.seed < 0:
        fail("data", "seed", "must be >= 0")
    for key in ("train_size", "test_size"):
        if getattr(d, key) % d.classes:
            fail("data", key, f"must be divisible by classes ({d.classes})")

    m = cfg.model
    for key, arch in [("source", m.source)] + [("victims", v) for v in m.victims]:
        if arch not in EngineConfig.ARCHITECTURES:
            fail("model", key, f"unknown architecture {arch!r}; options: {EngineConfig.ARCHITECTURES}")
    if m.source in m.victims:
        fail("model", "victims", "the source model is reported separately; list only other architectures")
    if len(set(m.victims)) != len(m.victims):
        fail("model", "victims", "duplicate victim")
    if {m.source, *m.victims} & {"vgg", "resnet"} and (d.height % 4 or d.width % 4):
        fail("data", "height", "convolutional architectures need height and width divisible by 4")
    for key in ("epochs", "batch"):
        if getattr(m, key) < 1:
            fail("model", key, "must be >= 1")
    if m.lr < 0 or not math.isfinite(m.lr):
        fail("model", "lr", "must be a finite value >= 0")
    if not 0 <= m.accuracy_floor < 1:
        fail("model", "accuracy_floor", "must lie in [0, 1)")

    a = cfg.attack
    if a.method not in METHODS:
        fail("attack", "method", f"unknown method; options: {METHODS}")
    for extra in a.ensemble:
        if extra not in METHODS:
            fail("attack", "ensemble", f"unknown method {extra!r}; options: {METHODS}")
    if a.constraint not in CONSTRAINTS:
        fail("attack", "constraint", f"unknown constraint; options: {CONSTRAINTS}")
    if not (a.epsilon > 0 and math.isfinite(a.epsilon)):
        fail("attack", "epsilon", "must be a positive real")
    if a.steps < 1:
        fail("attack", "steps", "must be >= 1")
    if not (a.step_size > 0 and math.isfinite(a.step_size)):
        fail("attack", "step_size", "must be a positive real")
    if a.momentum < 0:
        fail("attack", "momentum", "must be >= 0")

    e = cfg.enhance
    if e.mode not in MODES:
        fail("enhance", "mode", f"unknown mode; options: {MODES}")
    if not e.lam > 0:
        fail("enhance", "lambda", "must be positive or inf")
    if e.steps < 0:
        fail("enhance", "steps", "must be >= 0")
    if e.step_size == 0 or not math.isfinite(e.step_size):
        fail("enhance", "step_size", "must be a positive real")
    try:
        source = build_model(m.source, d.shape, d.classes)
        source.tap_index(e.tap)
    except RejectedInputError as exc:
        fail("enhance", "tap", str(exc))

    b = cfg.bench
    if b.population < 1:
        fail("bench", "population", "must be >= 1")
    if b.sweep not in SWEEPS:
        fail("bench", "sweep", f"unknown sweep; options: {SWEEPS}")
    try:
        [int(s) for s in b.seeds]
    except ValueError:
        fail("bench", "seeds", "must be a list of integers")
    try:
        sweep_values(cfg)
    except (ValueError, ZeroDivisionError, RejectedInputError, ConfigError) as exc:
        fail("bench", "values", f"bad value for a {b.sweep} sweep: {exc}")

    if cfg.run.seed < 0:
        fail("run", "seed", "must be >= 0")
    if cfg.run.threads < 0:
        fail("run", "threads", "must be >= 0")


def sweep_values(cfg: RunConfig) -> list:
    """Typed values of the configured sweep."""
    raw = cfg.bench.values
    kind = cfg.bench.sweep
    if kind == "p":
        values = [int(v) for v in raw] or [cfg.attack.steps]
        if any(v < 1 for v in values):
            raise ValueError("p values must be >= 1")
        return values
    if kind == "lambda":
        values = [_parse_value("float", v, None) for v in raw] or [cfg.enhance.lam]
        if any(not v > 0 for v in values):
            raise ValueError("lambda values must be positive")
        return values
    if kind == "layer":
        return list(raw) or [cfg.enhance.tap]
    if kind == "seeds":
        return [int(v) for v in (raw or cfg.bench.seeds)]
    if kind == "baselines":
        values = list(raw) or [cfg.attack.method]
        for v in values:
            if v not in METHODS:
                raise ValueError(f"unknown baseline {v!r}")
        return values
    raise ValueError(f"unknown sweep {kind!r}")
