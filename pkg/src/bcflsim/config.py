"""Scenario configuration: one JSON document drives every command.

Unknown or ill-typed keys are rejected by name so a typo in a config file
fails loudly instead of silently running defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .chain import StakeConfig
from .data import WindowConfig
from .learners import Hyperparams

MODES = ("single", "central", "fedavg", "mcgp")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Seeds:
    data: int = 1
    init: int = 2
    train: int = 3
    chain: int = 4


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str = "mcgp"
    hospital: int = 1  # which hospital trains in single mode
    arch: str = "lstm"
    num_hospitals: int = 5
    patients_per_hospital: int = 5
    num_unseen: int = 5
    malicious_hospitals: int = 0
    days: int = 28
    train_days: int = 7
    val_fraction: float = 0.05
    window: WindowConfig = field(default_factory=WindowConfig)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    rounds: int = 40
    stake: StakeConfig = field(default_factory=StakeConfig)
    seeds: Seeds = field(default_factory=Seeds)
    selected_patients: tuple[int, ...] = (4, 7, 13, 19, 23)
    lstm_hidden: int = 16
    nnpg_hidden: int = 10
    initial_balance: int = 100
    max_workers: int = 0  # 0 = auto
    # Federation-wide preprocessing frame, agreed at setup like any protocol
    # constant: glucose maps through (v - center) / spread on both the input
    # channel and the prediction target, carbs and insulin scale by fixed
    # divisors. Fixed constants keep models exchangeable across sites without
    # sharing any data, and out-of-range fabricated data stays visibly wrong.
    target_center: float = 140.0
    target_spread: float = 50.0
    carbs_scale: float = 10.0
    insulin_scale: float = 2.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown mode {self.mode!r}; expected one of {MODES}")
        if self.arch not in ("lstm", "nnpg", "linear"):
            raise ConfigError(f"arch: unknown architecture {self.arch!r}")
        if self.num_hospitals < 1:
            raise ConfigError("num_hospitals: must be >= 1")
        if self.mode in ("fedavg", "mcgp") and self.num_hospitals < 2:
            raise ConfigError(f"num_hospitals: mode {self.mode!r} requires at least 2 hospitals")
        if self.malicious_hospitals not in (0, 1):
            raise ConfigError("malicious_hospitals: must be 0 or 1")
        if self.malicious_hospitals and self.mode == "single":
            raise ConfigError("malicious_hospitals: not valid in single mode")
        if self.patients_per_hospital < 1:
            raise ConfigError("patients_per_hospital: must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds: must be >= 1")
        if not (1 <= self.hospital <= self.num_hospitals):
            raise ConfigError(
                f"hospital: must be in 1..{self.num_hospitals}, got {self.hospital}"
            )
        if self.days <= self.train_days:
            raise ConfigError("days: must exceed train_days")
        current = self.num_hospitals * self.patients_per_hospital
        bad = [p for p in self.selected_patients if not (1 <= p <= current)]
        if bad:
            raise ConfigError(f"selected_patients: ids {bad} outside 1..{current}")
        if self.target_spread <= 0 or self.carbs_scale <= 0 or self.insulin_scale <= 0:
            raise ConfigError("target_spread/carbs_scale/insulin_scale: must be positive")

    @property
    def target_scale(self) -> tuple[float, float]:
        return (self.target_center, self.target_spread)

    @property
    def current_patient_ids(self) -> list[int]:
        return list(range(1, self.num_hospitals * self.patients_per_hospital + 1))

    @property
    def unseen_patient_ids(self) -> list[int]:
        first = self.num_hospitals * self.patients_per_hospital + 1
        return list(range(first, first + self.num_unseen))

    def hospital_patient_ids(self, k: int) -> list[int]:
        lo = (k - 1) * self.patients_per_hospital + 1
        return list(range(lo, lo + self.patients_per_hospital))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selected_patients"] = list(self.selected_patients)
        return d


_SECTION_TYPES = {
    "window": (WindowConfig, ("history_len", "horizon")),
    "hyper": (
        Hyperparams,
        (
            "learning_rate",
            "weight_decay",
            "epochs",
            "batch_size",
            "adam_beta1",
            "adam_beta2",
            "adam_eps",
            "max_batches_per_epoch",
        ),
    ),
    "stake": (
        StakeConfig,
        ("stake_amount", "eligibility_threshold", "reward", "slash", "vote_tolerance"),
    ),
    "seeds": (Seeds, ("data", "init", "train", "chain")),
}

_TOP_KEYS = (
    "mode",
    "hospital",
    "arch",
    "num_hospitals",
    "patients_per_hospital",
    "num_unseen",
    "malicious_hospitals",
    "days",
    "train_days",
    "val_fraction",
    "rounds",
    "selected_patients",
    "lstm_hidden",
    "nnpg_hidden",
    "initial_balance",
    "max_workers",
    "target_center",
    "target_spread",
    "carbs_scale",
    "insulin_scale",
)


def config_from_dict(raw: dict) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            cls, allowed = _SECTION_TYPES[key]
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            for sub in value:
                if sub not in allowed:
                    raise ConfigError(f"{key}.{sub}: unknown key")
            try:
                kwargs[key] = cls(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        elif key in _TOP_KEYS:
            if key == "selected_patients":
                value = tuple(int(v) for v in value)
            kwargs[key] = value
        else:
            raise ConfigError(f"{key}: unknown key")
    try:
        return ScenarioConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> ScenarioConfig:
    if path is None:
        return ScenarioConfig()
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def apply_seed_overrides(cfg: ScenarioConfig, overrides: list[str]) -> ScenarioConfig:
    """Apply repeated --seed-override name=value flags."""
    seeds = cfg.seeds
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"seed override {item!r} must look like name=value")
        name, _, value = item.partition("=")
        if name not in ("data", "init", "train", "chain"):
            raise ConfigError(f"seed override names one of data/init/train/chain, got {name!r}")
        try:
            seeds = replace(seeds, **{name: int(value)})
        except ValueError as exc:
            raise ConfigError(f"seed override {item!r}: {exc}") from exc
    return replace(cfg, seeds=seeds)


def dump_config(cfg: ScenarioConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"
