"""Structured-text run configuration.

Configs are INI-style ``key = value`` files with one section per pipeline
stage. Every key has a typed default mirroring the module constants, so an
empty file is a complete configuration. Unknown sections or keys are
rejected by name; the canonical serialized form feeds the config hash that
ties artifacts to the settings that produced them.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import cbfe, community, model, sinkhorn, synth, tensor_io, training


class ConfigError(ValueError):
    """A config file failed schema validation; the message names the key."""


def _pair(kind):
    def parse(text: str):
        parts = text.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"expected two values, got {text!r}")
        return (kind(parts[0]), kind(parts[1]))
    parse.__name__ = f"pair_of_{kind.__name__}"
    return parse


def _optional_int(text: str):
    if text.strip().lower() in ("", "none"):
        return None
    return int(text)


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "synth": {
        "n_images": (int, 200),
        "grid": (_pair(int), (10, 10)),
        "raw_dim": (int, 32),
        "n_objects": (int, 3),
        "parts_per_object": (int, 3),
        "n_bg_parts": (int, 4),
        "min_angle_deg": (float, 60.0),
        "noise_sigma": (float, 0.1),
        "objects_per_image": (_pair(int), (1, 3)),
        "attention_flip": (float, 0.1),
    },
    "train": {
        "temperature": (float, 0.1),
        "lr_head": (float, 1e-4),
        "lr_encoder": (float, 1e-5),
        "weight_decay": (float, 0.0),
        "epochs": (int, 50),
        "batch_size": (int, 32),
        "ema_start": (float, 0.9995),
        "n_prototypes": (int, model.DEFAULT_PROTOTYPES),
        "fg_masking": (str, "fg"),
        "hidden_dim": (int, model.DEFAULT_HIDDEN),
        "out_dim": (int, model.DEFAULT_OUT),
        "token_dim": (_optional_int, None),
        "align_size": (int, 7),
        "global_grid": (int, 7),
        "local_grid": (int, 5),
        "n_global": (int, 2),
        "n_local": (int, 4),
        "global_scale": (_pair(float), (0.4, 1.0)),
        "local_scale": (_pair(float), (0.05, 0.4)),
        "min_intersection": (float, 0.01),
        "aspect": (_pair(float), (0.75, 4 / 3)),
    },
    "sinkhorn": {
        "epsilon": (float, sinkhorn.DEFAULT_EPSILON),
        "n_iters": (int, sinkhorn.DEFAULT_ITERS),
        "queue_capacity": (int, sinkhorn.QUEUE_CAPACITY),
    },
    "cbfe": {
        "k": (int, cbfe.DEFAULT_K),
        "threshold": (float, cbfe.THRESHOLD_SINGLE_DATASET),
    },
    "cd": {
        "k": (int, community.DEFAULT_K),
        "edge_threshold": (float, community.DEFAULT_EDGE_THRESHOLD),
        "markov_time": (float, community.DEFAULT_MARKOV_TIME),
        "distance": (int, community.DEFAULT_DISTANCE),
        "target_m": (_optional_int, None),  # None: #classes - 1
    },
    "eval": {
        "k": (int, 20),
        "n_seeds": (int, 5),
        "probe_epochs": (int, 100),
        "probe_lr": (float, 1e-2),
        "use_head": (_bool, True),
    },
    "run": {
        "seed": (int, 0),
        "threads": (int, 1),
    },
}


@dataclass
class Config:
    """Parsed configuration; one dict of typed values per schema section."""

    values: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        merged = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section, keys in self.values.items():
            merged[section].update(keys)
        self.values = merged

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def canonical_text(self) -> str:
        lines = []
        for section in sorted(self.values):
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                lines.append(f"{key} = {self.values[section][key]!r}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return tensor_io.config_hash(self.canonical_text())

    def synth_spec(self, seed: int | None = None) -> synth.SynthSpec:
        s = self["synth"]
        return synth.SynthSpec(
            n_images=s["n_images"], grid=s["grid"], raw_dim=s["raw_dim"],
            n_objects=s["n_objects"], parts_per_object=s["parts_per_object"],
            n_bg_parts=s["n_bg_parts"], min_angle_deg=s["min_angle_deg"],
            noise_sigma=s["noise_sigma"], objects_per_image=s["objects_per_image"],
            attention_flip=s["attention_flip"],
            seed=self["run"]["seed"] if seed is None else seed,
        )

    def train_config(self, seed: int | None = None) -> training.TrainConfig:
        t = self["train"]
        sk = self["sinkhorn"]
        return training.TrainConfig(
            temperature=t["temperature"], lr_head=t["lr_head"],
            lr_encoder=t["lr_encoder"], weight_decay=t["weight_decay"],
            epochs=t["epochs"], batch_size=t["batch_size"],
            ema_start=t["ema_start"], n_prototypes=t["n_prototypes"],
            epsilon=sk["epsilon"], sinkhorn_iters=sk["n_iters"],
            queue_capacity=sk["queue_capacity"], fg_masking=t["fg_masking"],
            hidden_dim=t["hidden_dim"], out_dim=t["out_dim"],
            token_dim=t["token_dim"], align_size=t["align_size"],
            global_grid=t["global_grid"], local_grid=t["local_grid"],
            n_global=t["n_global"], n_local=t["n_local"],
            global_scale=t["global_scale"], local_scale=t["local_scale"],
            min_intersection=t["min_intersection"], aspect=t["aspect"],
            seed=self["run"]["seed"] if seed is None else seed,
        )


def load_config(path: str | Path | None) -> Config:
    """Parse and validate a config file; None gives all defaults."""
    if path is None:
        return Config()
    parser = configparser.ConfigParser(interpolation=None)
    text = Path(path).read_text()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
            parse, _ = SCHEMA[section][key]
            try:
                values[section][key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {exc}") from exc
    return Config(values=values)


def default_config_text() -> str:
    """A fully commented config file with every key at its default."""
    lines = ["# all keys shown at their default values"]
    for section in SCHEMA:
        lines.append(f"\n[{section}]")
        for key, (_, default) in SCHEMA[section].items():
            if isinstance(default, tuple):
                rendered = " ".join(str(v) for v in default)
            elif default is None:
                rendered = "none"
            else:
                rendered = str(default)
            lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"
