"""Run configuration: INI files with a fixed schema.

Flat key/value sections; every key has a declared parser and a default, and
unknown sections or keys are rejected so typos cannot silently fall back to
defaults. ``resolved_text`` renders the fully expanded configuration that
every command writes next to its outputs.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .evaluation import ALL_TASKS
from .model import ModelConfig, TrainConfig
from .scenes import CategoryVocab, DetectorNoiseConfig, GeneratorConfig


class ConfigError(ValueError):
    """A configuration file is malformed or violates the schema."""


def _int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(v.strip()) for v in s.split(",") if v.strip())


def _float_tuple(s: str) -> tuple[float, ...]:
    return tuple(float(v.strip()) for v in s.split(",") if v.strip())


def _str_tuple(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


_SCHEMA: dict[str, dict[str, type | object]] = {
    "generator": {
        "image_size": int, "min_objects": int, "max_objects": int,
        "object_count_weights": _float_tuple,
        "contain_prob": float, "straddle_prob": float, "vstack_prob": float,
        "hstack_prob": float, "wstack_prob": float,
        "ambiguity_range": _float_tuple, "max_retries": int,
        "train_scenes": int, "test_scenes": int,
    },
    "model": {
        "input_resolution": int, "vin_channels": _int_tuple,
        "oln_hidden": int, "oln_out": int, "reduction": int,
        "classifier_hidden": _int_tuple, "dropout_rate": float,
    },
    "training": {
        "epochs": int, "batch_size": int, "learning_rate": float,
        "optimizer": str,
    },
    "detector_noise": {
        "jitter_sigma": float, "flip_prob": float, "drop_prob": float,
        "false_positive_rate": float, "score_sigma": float,
    },
    "evaluation": {
        "ks": _int_tuple, "tasks": _str_tuple,
    },
}

NOISE_PRESETS: dict[str, DetectorNoiseConfig] = {
    "zero": DetectorNoiseConfig(),
    "light": DetectorNoiseConfig(jitter_sigma=0.03, flip_prob=0.05,
                                 drop_prob=0.05, false_positive_rate=0.5,
                                 score_sigma=0.15),
    "heavy": DetectorNoiseConfig(jitter_sigma=0.08, flip_prob=0.15,
                                 drop_prob=0.15, false_positive_rate=1.5,
                                 score_sigma=0.3),
}


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig = GeneratorConfig()
    train_scenes: int = 2000
    test_scenes: int = 500
    input_resolution: int = 64
    vin_channels: tuple[int, ...] = (16, 32, 64)
    oln_hidden: int = 64
    oln_out: int = 32
    reduction: int = 4
    classifier_hidden: tuple[int, ...] = (256, 128)
    dropout_rate: float = 0.5
    training: TrainConfig = TrainConfig()
    noise: DetectorNoiseConfig = DetectorNoiseConfig()
    eval_ks: tuple[int, ...] = (50, 100)
    eval_tasks: tuple[str, ...] = ALL_TASKS

    def __post_init__(self):
        # Architecture fields are validated eagerly so a bad config file
        # fails at load time, not at first use; the category counts do not
        # affect any of the checked constraints.
        ModelConfig(
            input_resolution=self.input_resolution,
            vin_channels=tuple(self.vin_channels),
            oln_hidden=self.oln_hidden, oln_out=self.oln_out,
            reduction=self.reduction,
            classifier_hidden=tuple(self.classifier_hidden),
            dropout_rate=self.dropout_rate)
        if any(k < 1 for k in self.eval_ks) or not self.eval_ks:
            raise ValueError("evaluation ks must be positive")
        unknown = set(self.eval_tasks) - set(ALL_TASKS)
        if unknown:
            raise ValueError(f"unknown evaluation tasks: {sorted(unknown)}")

    def model_config(self, vocab: CategoryVocab) -> ModelConfig:
        """Materialize the architecture for a dataset's vocabulary sizes."""
        return ModelConfig(
            input_resolution=self.input_resolution,
            vin_channels=tuple(self.vin_channels),
            oln_hidden=self.oln_hidden, oln_out=self.oln_out,
            reduction=self.reduction,
            classifier_hidden=tuple(self.classifier_hidden),
            dropout_rate=self.dropout_rate,
            num_predicates=vocab.num_predicates,
            num_categories=vocab.num_objects)

    def resolved_text(self) -> str:
        """Render the fully expanded configuration as INI text."""
        gen = self.generator
        values: dict[str, dict[str, object]] = {
            "generator": {
                "image_size": gen.image_size, "min_objects": gen.min_objects,
                "max_objects": gen.max_objects,
                "object_count_weights": ",".join(map(str, gen.object_count_weights)),
                "contain_prob": gen.contain_prob,
                "straddle_prob": gen.straddle_prob,
                "vstack_prob": gen.vstack_prob,
                "hstack_prob": gen.hstack_prob,
                "wstack_prob": gen.wstack_prob,
                "ambiguity_range": ",".join(map(str, gen.ambiguity_range)),
                "max_retries": gen.max_retries,
                "train_scenes": self.train_scenes,
                "test_scenes": self.test_scenes,
            },
            "model": {
                "input_resolution": self.input_resolution,
                "vin_channels": ",".join(map(str, self.vin_channels)),
                "oln_hidden": self.oln_hidden, "oln_out": self.oln_out,
                "reduction": self.reduction,
                "classifier_hidden": ",".join(map(str, self.classifier_hidden)),
                "dropout_rate": self.dropout_rate,
            },
            "training": {
                "epochs": self.training.epochs,
                "batch_size": self.training.batch_size,
                "learning_rate": self.training.learning_rate,
                "optimizer": self.training.optimizer,
            },
            "detector_noise": {
                "jitter_sigma": self.noise.jitter_sigma,
                "flip_prob": self.noise.flip_prob,
                "drop_prob": self.noise.drop_prob,
                "false_positive_rate": self.noise.false_positive_rate,
                "score_sigma": self.noise.score_sigma,
            },
            "evaluation": {
                "ks": ",".join(map(str, self.eval_ks)),
                "tasks": ",".join(self.eval_tasks),
            },
        }
        lines = []
        for section, keys in values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in keys.items())
            lines.append("")
        return "\n".join(lines)


def load_run_config(path: str | Path | None) -> RunConfig:
    """Parse an INI file over the defaults; None gives pure defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.RawConfigParser()
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    parsed: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        parsed[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key '{key}' in [{section}]")
            try:
                parsed[section][key] = _SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ConfigError(
                    f"{path}: bad value for '{key}' in [{section}]: {raw!r}") from exc

    gen_kwargs = dict(parsed.get("generator", {}))
    train_scenes = gen_kwargs.pop("train_scenes", RunConfig.train_scenes)
    test_scenes = gen_kwargs.pop("test_scenes", RunConfig.test_scenes)
    try:
        return RunConfig(
            generator=GeneratorConfig(**gen_kwargs),
            train_scenes=train_scenes, test_scenes=test_scenes,
            **parsed.get("model", {}),
            training=TrainConfig(**parsed.get("training", {})),
            noise=DetectorNoiseConfig(**parsed.get("detector_noise", {})),
            eval_ks=parsed.get("evaluation", {}).get("ks", RunConfig.eval_ks),
            eval_tasks=parsed.get("evaluation", {}).get("tasks",
                                                        RunConfig.eval_tasks),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
