"""Run configuration: sectioned key=value files plus flag overrides.

Defaults carry every tunable knob of the pipeline; unknown sections or keys
are rejected so typos fail loudly. Precedence: built-in defaults < config
file < --set overrides < dedicated flags.
"""

from __future__ import annotations

import configparser
import io
import os

from .encoder import EncoderConfig
from .encoding import EncodingMode
from .errors import ConfigError
from .kge import PretrainConfig
from .queries import TEMPLATE_NAMES
from .training import TrainRunConfig, DEFAULT_TYPE_MIX

ENV_DATA_DIR = "Q2T_DATA_DIR"


def _mix_text(mix: dict[str, float]) -> str:
    return ",".join(f"{k}:{v:g}" for k, v in mix.items())


DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "root": "",
    },
    "pretrain": {
        "scorer": "complex",
        "rank": "1000",
        "lambda_rel": "0.5",
        "learning_rate": "0.1",
        "batch_size": "512",
        "epochs": "100",
        "reg_weight": "1e-3",
        "optimizer": "adagrad",
        "init_scale": "0.01",
        "seed": "0",
    },
    "encoder": {
        "num_layers": "6",
        "d1": "768",
        "num_heads": "12",
        "dropout": "0.1",
        "mode": "directed_distance",
        "clamp": "8",
        "signed_direction": "false",
        "negative_samples": "512",
        "label_smoothing": "0.4",
        "seed": "0",
    },
    "train": {
        "batch_size": "1024",
        "learning_rate": "4e-4",
        "label_smoothing": "0.4",
        "max_steps": "1000",
        "freeze_kge": "true",
        "eval_every": "0",
        "seed": "0",
        "type_mix": _mix_text(DEFAULT_TYPE_MIX),
    },
    "sample": {
        "counts": "",
        "seed": "0",
        "rejection_budget": "100",
    },
    "eval": {
        "batch_size": "256",
        "hit_ks": "1,3,10",
    },
}


class RunConfig:
    """Effective configuration of one CLI run."""

    def __init__(self) -> None:
        self.values: dict[str, dict[str, str]] = {
            section: dict(keys) for section, keys in DEFAULTS.items()
        }
        root = os.environ.get(ENV_DATA_DIR, "")
        if root:
            self.values["data"]["root"] = root

    # -- loading -------------------------------------------------------------

    def load_file(self, path: str) -> None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                self.set(section, key, value)

    def apply_overrides(self, overrides: list[str]) -> None:
        """Apply --set entries of the form section.key=value."""
        for entry in overrides:
            if "=" not in entry or "." not in entry.split("=", 1)[0]:
                raise ConfigError(f"--set expects section.key=value, got {entry!r}")
            dotted, value = entry.split("=", 1)
            section, key = dotted.split(".", 1)
            self.set(section.strip(), key.strip(), value.strip())

    def set(self, section: str, key: str, value: str) -> None:
        if section not in self.values:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in self.values[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = value

    # -- typed getters -------------------------------------------------------

    def get(self, section: str, key: str) -> str:
        try:
            return self.values[section][key]
        except KeyError as exc:
            raise ConfigError(f"unknown config key {section}.{key}") from exc

    def get_int(self, section: str, key: str) -> int:
        raw = self.get(section, key)
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key} must be an integer, got {raw!r}") from exc

    def get_float(self, section: str, key: str) -> float:
        raw = self.get(section, key)
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key} must be a number, got {raw!r}") from exc

    def get_bool(self, section: str, key: str) -> bool:
        raw = self.get(section, key).strip().lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key} must be a boolean, got {raw!r}")

    def get_mix(self, section: str, key: str) -> dict[str, float]:
        raw = self.get(section, key).strip()
        mix: dict[str, float] = {}
        if not raw:
            return mix
        for part in raw.split(","):
            if ":" not in part:
                raise ConfigError(f"{section}.{key} entries must look like type:weight")
            name, weight = part.split(":", 1)
            name = name.strip()
            if name not in TEMPLATE_NAMES:
                raise ConfigError(f"unknown query type {name!r} in {section}.{key}")
            try:
                mix[name] = float(weight)
            except ValueError as exc:
                raise ConfigError(f"bad weight for {name!r} in {section}.{key}") from exc
        return mix

    def get_int_list(self, section: str, key: str) -> list[int]:
        raw = self.get(section, key).strip()
        if not raw:
            return []
        try:
            return [int(x) for x in raw.split(",")]
        except ValueError as exc:
            raise ConfigError(f"{section}.{key} must be comma-separated integers") from exc

    def set_seed_everywhere(self, seed: int) -> None:
        for section in ("pretrain", "encoder", "train", "sample"):
            self.values[section]["seed"] = str(seed)

    # -- config object builders ----------------------------------------------

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            scorer=self.get("pretrain", "scorer"),
            rank=self.get_int("pretrain", "rank"),
            lambda_rel=self.get_float("pretrain", "lambda_rel"),
            learning_rate=self.get_float("pretrain", "learning_rate"),
            batch_size=self.get_int("pretrain", "batch_size"),
            epochs=self.get_int("pretrain", "epochs"),
            reg_weight=self.get_float("pretrain", "reg_weight"),
            optimizer=self.get("pretrain", "optimizer"),
            init_scale=self.get_float("pretrain", "init_scale"),
            seed=self.get_int("pretrain", "seed"),
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.get_int("encoder", "num_layers"),
            d1=self.get_int("encoder", "d1"),
            num_heads=self.get_int("encoder", "num_heads"),
            dropout=self.get_float("encoder", "dropout"),
            mode=EncodingMode(self.get("encoder", "mode")),
            clamp=self.get_int("encoder", "clamp"),
            signed_direction=self.get_bool("encoder", "signed_direction"),
            negative_samples=self.get_int("encoder", "negative_samples"),
            label_smoothing=self.get_float("encoder", "label_smoothing"),
            seed=self.get_int("encoder", "seed"),
        )

    def train_config(self) -> TrainRunConfig:
        return TrainRunConfig(
            batch_size=self.get_int("train", "batch_size"),
            learning_rate=self.get_float("train", "learning_rate"),
            label_smoothing=self.get_float("train", "label_smoothing"),
            max_steps=self.get_int("train", "max_steps"),
            freeze_kge=self.get_bool("train", "freeze_kge"),
            eval_every=self.get_int("train", "eval_every"),
            seed=self.get_int("train", "seed"),
            type_mix=self.get_mix("train", "type_mix"),
        )

    # -- provenance -----------------------------------------------------------

    def echo(self) -> str:
        parser = configparser.ConfigParser()
        for section, keys in self.values.items():
            parser[section] = keys
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def resolve_path(self, path: str) -> str:
        """Resolve relative inputs against the configured data root."""
        if not path or os.path.isabs(path) or os.path.exists(path):
            return path
        root = self.get("data", "root")
        if root:
            candidate = os.path.join(root, path)
            if os.path.exists(candidate):
                return candidate
        return path
