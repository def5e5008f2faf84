"""Run configuration: TOML file, environment, and flag layering.

Precedence, lowest to highest: built-in defaults, config file, environment
variables, command-line flags.  Environment overrides use the prefix
EVSEQ_: top-level keys as EVSEQ_SEED / EVSEQ_OUT, section keys as
EVSEQ_<SECTION>__<KEY> (double underscore), e.g. EVSEQ_ADAPT__GAMMA=2.0.

The global seed feeds every seeded stage unless a section pins its own:
synthetic data uses seed, model init seed+1, epoch shuffling seed+2, the
train/test split seed+3.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adaptation import AdaptConfig
from .errors import ConfigError
from .switching import SwitchConfig
from .synthetic import SyntheticSpec
from .training import TrainConfig

ENV_PREFIX = "EVSEQ_"

_SECTIONS = ("synthetic", "model", "train", "adapt", "switch", "run")


@dataclass
class ModelSettings:
    embed_dim: int = 16
    hidden_dim: int = 64
    learning_rate: float = 0.005
    l2_weight: float = 1e-5


@dataclass
class RunSettings:
    window_hours: float = 24.0
    split_ratio: float = 0.8


@dataclass
class TrainSettings:
    max_epochs: int = 25
    patience: int = 4
    val_fraction: float = 0.1
    l2_grid: list[float] | None = None


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "out"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    switch: SwitchConfig = field(default_factory=SwitchConfig)
    run: RunSettings = field(default_factory=RunSettings)
    # Section keys the user pinned explicitly (seed derivation skips them).
    pinned: set = field(default_factory=set)

    # Derived file locations.
    def path(self, name: str) -> Path:
        return Path(self.out_dir) / name

    @property
    def data_path(self) -> Path:
        return self.path("events.tsv")

    @property
    def vocab_path(self) -> Path:
        return self.path("vocab.tsv")

    @property
    def ground_truth_path(self) -> Path:
        return self.path("ground_truth.tsv")

    @property
    def model_path(self) -> Path:
        return self.path("model.bin")

    @property
    def train_log_path(self) -> Path:
        return self.path("train_log.csv")

    @property
    def bank_path(self) -> Path:
        return self.path("bank.bin")

    @property
    def records_path(self) -> Path:
        return self.path("records.csv")

    @property
    def traces_path(self) -> Path:
        return self.path("traces.csv")

    @property
    def event_choices_path(self) -> Path:
        return self.path("event_choices.csv")

    @property
    def report_dir(self) -> Path:
        return self.path("report")

    @property
    def synth_seed(self) -> int:
        return self.synthetic.rng_seed

    @property
    def model_seed(self) -> int:
        return self.seed + 1

    @property
    def shuffle_seed(self) -> int:
        return self.seed + 2

    @property
    def split_seed(self) -> int:
        return self.seed + 3


_SECTION_TARGETS = {
    "synthetic": lambda cfg: cfg.synthetic,
    "model": lambda cfg: cfg.model,
    "train": lambda cfg: cfg.train,
    "adapt": lambda cfg: cfg.adapt,
    "switch": lambda cfg: cfg.switch,
    "run": lambda cfg: cfg.run,
}


def _assign(cfg: RunConfig, section: str, key: str, value) -> None:
    target = _SECTION_TARGETS[section](cfg)
    if not hasattr(target, key):
        raise ConfigError(f"unknown config key {section}.{key}")
    if section == "adapt" and key == "param_mask":
        if isinstance(value, str):
            value = [value]
        value = frozenset(value)
    current = getattr(target, key)
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigError(f"{section}.{key} must be a boolean")
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number")
        value = int(value)
    if isinstance(current, float) and isinstance(value, (int, float)):
        value = float(value)
    setattr(target, key, value)
    cfg.pinned.add(f"{section}.{key}")


def _parse_env_value(text: str):
    low = text.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if "," in text:
        return [_parse_env_value(part) for part in text.split(",")]
    return text


def load_config(
    config_path: str | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
    env: dict | None = None,
) -> RunConfig:
    """Build the effective configuration for one CLI invocation."""
    cfg = RunConfig()
    if config_path is not None:
        with open(config_path, "rb") as fh:
            try:
                doc = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{config_path}: {exc}") from exc
        for key, value in doc.items():
            if key == "seed":
                cfg.seed = int(value)
            elif key == "out":
                cfg.out_dir = str(value)
            elif key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"config section [{key}] must be a table")
                for sub, sub_value in value.items():
                    _assign(cfg, key, sub, sub_value)
            else:
                raise ConfigError(f"unknown top-level config key {key!r}")

    environ = os.environ if env is None else env
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :]
        if rest == "SEED":
            cfg.seed = int(raw)
        elif rest == "OUT":
            cfg.out_dir = raw
        elif "__" in rest:
            section, key = rest.split("__", 1)
            section = section.lower()
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section in {name}")
            _assign(cfg, section, key.lower(), _parse_env_value(raw))
        else:
            raise ConfigError(f"unrecognized environment override {name}")

    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = out_dir

    if "synthetic.rng_seed" not in cfg.pinned:
        cfg.synthetic.rng_seed = cfg.seed
    return cfg
