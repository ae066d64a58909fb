"""Run configuration: defaults < config file < ``BEVDET_*`` environment < flags.

The file format is INI-style: ``[section]`` headers and ``key = value``
lines. Unknown sections and keys are rejected.
"""

from __future__ import annotations

import configparser
import math
import os
from copy import deepcopy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .bev import BevGrid
from .errors import ConfigError
from .losses import LossVariant, LossWeights
from .model import ModelConfig
from .trainer import TrainConfig

ENV_PREFIX = "BEVDET_"

DEFAULTS: dict[str, dict[str, Any]] = {
    "grid": {"x_max": 51.2, "y_half": 12.8, "z_min": -2.73, "z_max": 1.27, "delta": 0.1},
    "model": {
        "base_channels": 32,
        "levels": 5,
        "cam_levels": (0, 1, 2),
        "dilations": (1, 1, 2, 2, 2),
        "fusion": "sum",
        "num_classes": 2,
        "up_kernel": 4,
        "cam_squeeze": 4,
        "cam_pool": 7,
        "seed": 0,
    },
    "train": {
        "batch_size": 16,
        "epochs": 50,
        "max_steps": 0,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "seed": 0,
        "accumulate": 1,
        "hflip": False,
        "rotate": False,
        "classification": "ce",
        "regression": "smooth_l1",
        "w_keypoints": 1.0,
        "w_box": 0.98,
        "w_rotation": 0.95,
        "class_eps": 1.02,
    },
    "decode": {"threshold": 0.5, "min_distance": 0.0},
    "eval": {"mode": "11", "iou_thresholds": (0.5, 0.7)},
    "bench": {"repetitions": 50, "warmup": 5, "bound": 0.05, "occupancies": (0.01, 0.5), "seed": 0},
    "synth": {
        "objects_min": 1,
        "objects_max": 3,
        "h_range": (1.4, 1.7),
        "w_range": (1.5, 1.8),
        "l_range": (3.5, 4.5),
        "yaw_range": (-math.pi, math.pi),
        "clutter_density": 0.02,
        "ground_density": 0.5,
        "surface_density": 4000.0,
    },
    "classes": {"Car": 1},
}


def _coerce(section: str, key: str, raw: str, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v.strip()) for v in raw.split(",") if v.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=lambda: deepcopy(DEFAULTS))

    @classmethod
    def load(
        cls,
        path: str | os.PathLike | None = None,
        env: Mapping[str, str] | None = None,
        overrides: Mapping[str, Any] | None = None,
    ) -> "RunConfig":
        """``overrides`` maps ``"section.key"`` to an already-typed value."""
        cfg = cls()
        if path is not None:
            cfg.merge_text(Path(path).read_text(), str(path))
        cfg.merge_env(os.environ if env is None else env)
        for dotted, value in (overrides or {}).items():
            section, _, key = dotted.partition(".")
            cfg._check_key(section, key)
            cfg.values[section][key] = value
        cfg.validate()
        return cfg

    def _check_key(self, section: str, key: str) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if section != "classes" and key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")

    def merge_text(self, text: str, source: str = "<config>") -> None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        for section in parser.sections():
            if section == "classes":
                self.values["classes"] = {}
            for key, raw in parser.items(section):
                self._check_key(section, key)
                if section == "classes":
                    self.values["classes"][key] = _coerce(section, key, raw, 0)
                else:
                    self.values[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])

    def merge_env(self, env: Mapping[str, str]) -> None:
        for name, raw in env.items():
            if not name.startswith(ENV_PREFIX):
                continue
            rest = name[len(ENV_PREFIX) :].lower()
            section, _, key = rest.partition("_")
            if section == "classes":
                raise ConfigError(f"{name}: classes cannot be set from the environment")
            self._check_key(section, key)
            self.values[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])

    def validate(self) -> None:
        try:
            self.grid()
            self.model_config()
            self.train_config()
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(str(exc)) from exc
        classes = self.values["classes"]
        if not classes or sorted(classes.values()) != list(range(1, len(classes) + 1)):
            raise ConfigError(f"class ids must be 1..C-1 without gaps, got {classes}")
        if self.values["eval"]["mode"] not in ("11", "40"):
            raise ConfigError("[eval] mode must be 11 or 40")

    # builders -------------------------------------------------------------

    def grid(self) -> BevGrid:
        return BevGrid(**self.values["grid"])

    def model_config(self) -> ModelConfig:
        g = self.grid()
        m = dict(self.values["model"])
        m["num_classes"] = max(self.values["classes"].values()) + 1
        return ModelConfig(rows=g.rows, cols=g.cols, **m)

    def train_config(self) -> TrainConfig:
        t = dict(self.values["train"])
        weights = LossWeights(t.pop("w_keypoints"), t.pop("w_box"), t.pop("w_rotation"))
        variant = LossVariant(t.pop("classification"), t.pop("regression"))
        t["max_steps"] = t["max_steps"] or None
        return TrainConfig(loss_weights=weights, variant=variant, **t)

    def class_table(self) -> dict[str, int]:
        return dict(self.values["classes"])

    def scene_kwargs(self) -> dict[str, Any]:
        s = {k: v for k, v in self.values["synth"].items() if not k.startswith("objects_")}
        g = self.grid()
        s["x_range"] = (0.0, g.x_max)
        s["y_range"] = (-g.y_half, g.y_half)
        return s

    def to_text(self) -> str:
        lines = []
        for section, entries in self.values.items():
            lines.append(f"[{section}]")
            for key, v in entries.items():
                if isinstance(v, tuple):
                    v = ", ".join(repr(x) for x in v)
                lines.append(f"{key} = {v}")
            lines.append("")
        return "\n".join(lines)
