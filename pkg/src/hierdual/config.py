"""INI experiment configs: parsing, range validation and resolution into library objects.

Every validation failure raises ``ConfigError`` naming the offending
``[section] key``. See the README for the full schema.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

from .sampler import SamplingKind, SamplingStrategy
from .trainer import (
    DEFAULT_TEMPERATURE,
    FINETUNE_LR_MULTIPLIER,
    FINETUNE_TEMPERATURE,
    PhaseConfig,
    pretrain_finetune_phases,
)


class ConfigError(ValueError):
    def __init__(self, section: str, key: str, message: str):
        super().__init__(f"[{section}] {key}: {message}")
        self.section = section
        self.key = key


_MISSING = object()


class Section:
    """Typed, range-checked reads from one INI section; tracks which keys were consumed."""

    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self.raw = dict(parser[name]) if parser.has_section(name) else {}
        self.used: set[str] = set()

    def _get(self, key, default):
        self.used.add(key)
        if key in self.raw:
            return self.raw[key].strip()
        if default is _MISSING:
            raise ConfigError(self.name, key, "required key is missing")
        return default

    def _fail(self, key, msg):
        raise ConfigError(self.name, key, msg)

    def has(self, key: str) -> bool:
        return key in self.raw

    def str(self, key, default=_MISSING, choices=None):
        value = self._get(key, default)
        if value is not None and choices is not None and value not in choices:
            self._fail(key, f"must be one of {', '.join(choices)}")
        return value

    def int(self, key, default=_MISSING, lo=None, hi=None):
        value = self._get(key, default)
        if value is None or isinstance(value, int):
            return value
        try:
            out = int(value)
        except ValueError:
            self._fail(key, f"expected an integer, got {value!r}")
        return self._range(key, out, lo, hi)

    def float(self, key, default=_MISSING, lo=None, hi=None, open_lo=False):
        value = self._get(key, default)
        if value is None or isinstance(value, float):
            return value
        try:
            out = float(value)
        except ValueError:
            self._fail(key, f"expected a number, got {value!r}")
        if open_lo and lo is not None and not out > lo:
            self._fail(key, f"must be > {lo}")
        return self._range(key, out, None if open_lo else lo, hi)

    def bool(self, key, default=_MISSING):
        value = self._get(key, default)
        if isinstance(value, bool):
            return value
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        self._fail(key, f"expected a boolean, got {value!r}")

    def list(self, key, convert: Callable, default=_MISSING, lo=None, hi=None, open_lo=False):
        value = self._get(key, default)
        if value is None or isinstance(value, list):
            return value
        try:
            items = [convert(v) for v in value.replace(",", " ").split()]
        except ValueError:
            self._fail(key, f"expected a list of numbers, got {value!r}")
        if not items:
            self._fail(key, "list is empty")
        for v in items:
            if open_lo and lo is not None and not v > lo:
                self._fail(key, f"every entry must be > {lo}")
            self._range(key, v, None if open_lo else lo, hi)
        return items

    def _range(self, key, value, lo, hi):
        if lo is not None and value < lo:
            self._fail(key, f"must be >= {lo}")
        if hi is not None and value > hi:
            self._fail(key, f"must be <= {hi}")
        return value

    def check_unknown(self):
        extra = sorted(set(self.raw) - self.used)
        if extra:
            self._fail(extra[0], "unknown key")


@dataclass
class HierarchySource:
    height: Optional[int] = None
    width: Optional[int] = None
    path: Optional[str] = None
    fmt: str = "edges"
    cap: Optional[int] = None
    subsample: Optional[int] = None
    subsample_seed: int = 0

    def describe(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class ExperimentConfig:
    """Fully resolved experiment settings."""

    command: str
    seed: int = 0
    hierarchy: Optional[HierarchySource] = None
    values: dict = field(default_factory=dict)
    phases: list = field(default_factory=list)
    resolved: dict = field(default_factory=dict)


def _hierarchy(parser, base_dir) -> HierarchySource:
    sec = Section(parser, "hierarchy")
    has_tree = sec.has("height") or sec.has("width")
    has_path = sec.has("path")
    if has_tree == has_path:
        raise ConfigError("hierarchy", "path" if has_path else "height", "give exactly one of height/width or path")
    src = HierarchySource()
    if has_tree:
        src.height = sec.int("height", lo=2, hi=30)
        src.width = sec.int("width", lo=1, hi=10_000)
        if src.width ** (src.height - 1) > 5_000_000:
            raise ConfigError("hierarchy", "height", "tree would exceed 5,000,000 nodes")
    else:
        path = sec.str("path")
        src.path = path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))
        if not os.path.exists(src.path):
            raise ConfigError("hierarchy", "path", f"file not found: {src.path}")
        src.fmt = sec.str("format", "edges", choices=("edges", "wordnet"))
    src.cap = sec.int("cap", None, lo=0)
    src.subsample = sec.int("subsample", None, lo=1)
    src.subsample_seed = sec.int("subsample_seed", 0, lo=0)
    sec.check_unknown()
    return src


def _strategy(sec: Section, prefix: str = "") -> SamplingStrategy:
    kinds = tuple(k.value for k in SamplingKind)
    kind = sec.str(prefix + "strategy", SamplingKind.REGULAR.value, choices=kinds)
    heavy = sec.str(
        prefix + "heavy",
        SamplingKind.HEAVY_TAIL_TOY.value,
        choices=(SamplingKind.HEAVY_TAIL_TOY.value, SamplingKind.HEAVY_TAIL_PROPORTIONAL.value),
    )
    mix_p = sec.float(prefix + "mix_p", 1.0, lo=0.0, hi=1.0)
    return SamplingStrategy(SamplingKind(kind), mix_p, SamplingKind(heavy))


def _phase(sec: Section, defaults: dict) -> PhaseConfig:
    return PhaseConfig(
        steps=sec.int("steps", defaults.get("steps", _MISSING), lo=0),
        learning_rate=sec.float("learning_rate", defaults.get("learning_rate", _MISSING), lo=0.0),
        momentum=sec.float("momentum", defaults.get("momentum", 0.9), lo=0.0, hi=0.999999),
        batch_size=sec.int("batch_size", defaults.get("batch_size", 128), lo=1),
        temperature=sec.float("temperature", defaults.get("temperature", DEFAULT_TEMPERATURE), lo=0.0, open_lo=True),
        strategy=_strategy(sec),
        eval_every=sec.int("eval_every", defaults.get("eval_every", 250), lo=1),
        early_stop_metric=sec.str(
            "early_stop_metric", defaults.get("early_stop_metric", "overall_recall"),
            choices=("overall_recall", "min_slice_recall"),
        ),
        exact_match_floor=sec.float("exact_match_floor", defaults.get("exact_match_floor"), lo=0.0, hi=1.0),
    )


def _training(parser, out: ExperimentConfig) -> None:
    sec = Section(parser, "train")
    v = out.values
    if out.command != "sweep-dim":
        v["dim"] = sec.int("dim", lo=1, hi=100_000)
    v["normalize"] = sec.bool("normalize", True)
    v["init_std"] = sec.float("init_std", 1.0, lo=0.0, open_lo=True)
    v["eval_size"] = sec.int("eval_size", 10_000, lo=1)
    schedule = sec.str("schedule", "phases", choices=("phases", "pretrain_finetune"))
    v["schedule"] = schedule
    if schedule == "pretrain_finetune":
        out.phases = pretrain_finetune_phases(
            steps=sec.int("steps", lo=0),
            finetune_steps=sec.int("finetune_steps", lo=0),
            learning_rate=sec.float("learning_rate", lo=0.0),
            batch_size=sec.int("batch_size", 128, lo=1),
            heavy=SamplingKind(
                sec.str(
                    "heavy",
                    SamplingKind.HEAVY_TAIL_TOY.value,
                    choices=(SamplingKind.HEAVY_TAIL_TOY.value, SamplingKind.HEAVY_TAIL_PROPORTIONAL.value),
                )
            ),
            lr_multiplier=sec.float("lr_multiplier", FINETUNE_LR_MULTIPLIER, lo=0.0),
            finetune_temperature=sec.float("finetune_temperature", FINETUNE_TEMPERATURE, lo=0.0, open_lo=True),
            temperature=sec.float("temperature", DEFAULT_TEMPERATURE, lo=0.0, open_lo=True),
            momentum=sec.float("momentum", 0.9, lo=0.0, hi=0.999999),
            eval_every=sec.int("eval_every", 250, lo=1),
            exact_match_floor=sec.float("exact_match_floor", None, lo=0.0, hi=1.0),
        )
    else:
        names = sorted(
            (s for s in parser.sections() if s.startswith("phase.")),
            key=lambda s: _phase_index(s),
        )
        if not names:
            raise ConfigError("train", "schedule", "no [phase.N] sections given")
        for name in names:
            ps = Section(parser, name)
            out.phases.append(_phase(ps, {}))
            ps.check_unknown()
    sec.check_unknown()


def _phase_index(name: str) -> int:
    try:
        return int(name.split(".", 1)[1])
    except ValueError:
        raise ConfigError(name, "-", "phase sections are named [phase.0], [phase.1], ...") from None


def _construct(parser, out: ExperimentConfig) -> None:
    sec = Section(parser, "construct")
    v = out.values
    v["method"] = sec.str("method", "gaussian", choices=("gaussian", "onehot"))
    v["dim"] = sec.int("dim", None, lo=1, hi=1_000_000)
    v["epsilon"] = sec.float("epsilon", 0.1, lo=0.0, hi=0.5, open_lo=True)
    if v["epsilon"] >= 0.5:
        raise ConfigError("construct", "epsilon", "must be < 0.5")
    v["trials"] = sec.int("trials", 1, lo=1, hi=10_000)
    v["find_min_dim"] = sec.bool("find_min_dim", False)
    if v["method"] == "gaussian" and v["dim"] is None and not v["find_min_dim"]:
        raise ConfigError("construct", "dim", "required for the gaussian method unless find_min_dim = true")
    v["write_tables"] = sec.bool("write_tables", False)
    sec.check_unknown()


def _sweep_dim(parser, out: ExperimentConfig) -> None:
    sec = Section(parser, "sweep-dim")
    v = out.values
    v["dims"] = sec.list("dims", int, lo=1)
    if v["dims"] != sorted(v["dims"]):
        raise ConfigError("sweep-dim", "dims", "must be ascending")
    v["threshold"] = sec.float("threshold", 0.95, lo=0.0, hi=0.999999)
    v["heights"] = sec.list("heights", int, None, lo=2, hi=30)
    v["width"] = sec.int("width", 2, lo=1)
    v["handcrafted"] = sec.bool("handcrafted", True)
    v["handcrafted_trials"] = sec.int("handcrafted_trials", 5, lo=1)
    sec.check_unknown()


def _sweep_p(parser, out: ExperimentConfig) -> None:
    sec = Section(parser, "sweep-p")
    out.values["ps"] = sec.list("ps", float, lo=0.0, hi=1.0)
    sec.check_unknown()


def _ablate(parser, out: ExperimentConfig) -> None:
    sec = Section(parser, "ablate")
    out.values["lr_multipliers"] = sec.list("lr_multipliers", float, lo=0.0, open_lo=True)
    out.values["temperatures"] = sec.list("temperatures", float, lo=0.0, open_lo=True)
    sec.check_unknown()


def _eval(parser, out: ExperimentConfig, base_dir) -> None:
    sec = Section(parser, "eval")
    path = sec.str("checkpoint")
    path = path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))
    if not os.path.exists(path):
        raise ConfigError("eval", "checkpoint", f"file not found: {path}")
    out.values["checkpoint"] = path
    pairs = sec.str("pairs", None)
    if pairs is not None:
        pairs = pairs if os.path.isabs(pairs) else os.path.normpath(os.path.join(base_dir, pairs))
        if not os.path.exists(pairs):
            raise ConfigError("eval", "pairs", f"file not found: {pairs}")
    out.values["pairs"] = pairs
    out.values["eval_size"] = sec.int("eval_size", 10_000, lo=1)
    out.values["ks"] = sec.list("ks", int, None, lo=1)
    sec.check_unknown()


_NEEDS_TRAIN = {"train", "sweep-dim", "sweep-p", "ablate"}
KNOWN_SECTIONS = {"run", "hierarchy", "train", "construct", "sweep-dim", "sweep-p", "ablate", "eval"}


def load_config(path: Optional[str], command: str, seed: Optional[int] = None) -> ExperimentConfig:
    """Parse and validate ``path`` for ``command``; ``seed`` overrides ``[run] seed``."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    base_dir = "."
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError("run", "config", f"file not found: {path}")
        try:
            with open(path) as f:
                parser.read_file(f)
        except configparser.Error as exc:
            raise ConfigError("run", "config", f"unparseable config: {exc}") from None
        base_dir = os.path.dirname(os.path.abspath(path))
    for name in parser.sections():
        if name not in KNOWN_SECTIONS and not name.startswith("phase."):
            raise ConfigError(name, "-", "unknown section")
    run = Section(parser, "run")
    out = ExperimentConfig(command=command)
    out.seed = seed if seed is not None else run.int("seed", 0, lo=0, hi=2**63 - 1)
    if seed is not None:
        run.used.add("seed")
    run.check_unknown()
    if command != "eval" or parser.has_section("hierarchy"):
        if command == "sweep-dim" and not parser.has_section("hierarchy"):
            out.hierarchy = None
        else:
            out.hierarchy = _hierarchy(parser, base_dir)
    if command in _NEEDS_TRAIN:
        _training(parser, out)
    if command == "construct":
        _construct(parser, out)
    elif command == "sweep-dim":
        _sweep_dim(parser, out)
        if out.values["heights"] is None and out.hierarchy is None:
            raise ConfigError("sweep-dim", "heights", "give heights or a [hierarchy] section")
    elif command == "sweep-p":
        _sweep_p(parser, out)
    elif command == "ablate":
        _ablate(parser, out)
    elif command == "eval":
        _eval(parser, out, base_dir)
        if out.hierarchy is None:
            raise ConfigError("hierarchy", "path", "eval needs the hierarchy the checkpoint was trained on")
    out.resolved = resolved_dict(out)
    return out


def resolved_dict(cfg: ExperimentConfig) -> dict:
    from dataclasses import asdict

    return {
        "command": cfg.command,
        "seed": cfg.seed,
        "hierarchy": cfg.hierarchy.describe() if cfg.hierarchy else None,
        "values": cfg.values,
        "phases": [
            {**asdict(p), "strategy": p.strategy.describe()} for p in cfg.phases
        ],
    }
