"""Structured run configuration: INI file with sections, flag overrides.

Every command resolves its configuration from (defaults <- file <- --set
overrides) and echoes the fully resolved result, which can be fed back in
as a config file. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path

from .benchkit import BenchConfig
from .errors import ConfigError, NotFound
from .melfront import MelConfig, frames_for_duration
from .model import ModelConfig
from .patchgrid import PatchConfig, PatchoutSpec
from .probe import DEFAULT_GRID, ProbeConfig
from .train import SpecAugmentConfig, TrainConfig

_ENV_THREADS = "MAEST_THREADS"


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "mel": {
        "n_bands": (int, 96),
        "window_ms": (int, 32),
        "hop_ms": (int, 16),
        "sample_rate": (int, 16000),
        "fmin_hz": (float, 0.0),
        "fmax_hz": (float, 0.0),  # 0 -> Nyquist
    },
    "patch": {
        "patch_h": (int, 16),
        "patch_w": (int, 16),
        "stride_h": (int, 10),
        "stride_w": (int, 10),
    },
    "model": {
        "d": (int, 768),
        "n_blocks": (int, 12),
        "n_heads": (int, 12),
        "mlp_ratio": (int, 4),
        "n_labels": (int, 400),
        "f_p_max": (int, 9),
        "t_p_max": (int, 186),
        "dropout": (float, 0.0),
    },
    "train": {
        "epochs": (int, 130),
        "warmup_epochs": (float, 5.0),
        "plateau_end_epoch": (float, 50.0),
        "decay_epochs": (float, 50.0),
        "lr_peak": (float, 1e-4),
        "lr_floor": (float, 1e-7),
        "weight_decay": (float, 1e-4),
        "mixup_alpha": (float, 0.3),
        "epoch_sample": (int, 200_000),
        "batch_size": (int, 12),
        "segment_s": (float, 5.0),
        "seg_frames": (int, 0),  # 0 -> derive from segment_s
        "swa_start_epoch": (int, 50),
        "swa_interval": (int, 5),
        "val_fraction": (float, 0.1),
    },
    "specaug": {
        "max_t_groups": (int, 20),
        "t_width": (int, 8),
        "max_f_groups": (int, 5),
        "f_width": (int, 8),
    },
    "patchout": {
        "mode": (str, "none"),
        "f_drop": (int, 3),
        "t_drop": (int, 15),
        "t_keep": (int, 1),
        "f_rows": (int, 0),
        "phase": (int, 0),
    },
    "probe": {
        "hidden": (int, 512),
        "dropout": (float, 0.5),
        "batch": (int, 128),
        "epochs": (int, 30),
        "lr_max": (float, 1e-4),
        "lr_start": (float, 1e-7),
        "lr_end": (float, 1e-7),
        "rise_epochs": (int, 10),
        "fall_epochs": (int, 10),
        "weight_decay": (float, 1e-3),
    },
    "probe_grid": {
        "batch": (_parse_int_list, DEFAULT_GRID["batch"]),
        "epochs": (_parse_int_list, DEFAULT_GRID["epochs"]),
        "dropout": (_parse_float_list, DEFAULT_GRID["dropout"]),
        "lr_max": (_parse_float_list, DEFAULT_GRID["lr_max"]),
    },
    "bench": {
        "t_keep_grid": (_parse_int_list, (1, 2, 3, 5, 10)),
        "f_rows_grid": (_parse_int_list, (0, 3, 4)),
        "repetitions": (int, 5),
        "warmup": (int, 1),
        "threads": (int, 1),
        "segment_s": (float, 30.0),
        "batch": (int, 1),
        "min_time_s": (float, 0.02),
        "max_batch": (int, 64),
    },
    "run": {
        "seed": (int, 0),
        "threads": (int, 0),
    },
}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """Fully resolved configuration for one command invocation."""

    values: dict[str, dict]

    # -- typed views ---------------------------------------------------------

    def mel(self) -> MelConfig:
        v = self.values["mel"]
        return MelConfig(
            n_bands=v["n_bands"], window_ms=v["window_ms"], hop_ms=v["hop_ms"],
            sample_rate=v["sample_rate"], fmin_hz=v["fmin_hz"],
            fmax_hz=v["fmax_hz"] or None,
        )

    def patch(self) -> PatchConfig:
        v = self.values["patch"]
        return PatchConfig(patch_h=v["patch_h"], patch_w=v["patch_w"],
                           stride_h=v["stride_h"], stride_w=v["stride_w"])

    def model(self) -> ModelConfig:
        v = self.values["model"]
        return ModelConfig(d=v["d"], n_blocks=v["n_blocks"], n_heads=v["n_heads"],
                           mlp_ratio=v["mlp_ratio"], n_labels=v["n_labels"],
                           patch=self.patch(), f_p_max=v["f_p_max"], t_p_max=v["t_p_max"],
                           dropout=v["dropout"])

    def patchout(self) -> PatchoutSpec:
        v = self.values["patchout"]
        return PatchoutSpec(mode=v["mode"], f_drop=v["f_drop"], t_drop=v["t_drop"],
                            t_keep=v["t_keep"], f_rows=v["f_rows"], phase=v["phase"])

    def seg_frames(self) -> int:
        v = self.values["train"]
        if v["seg_frames"] > 0:
            return v["seg_frames"]
        return frames_for_duration(v["segment_s"], self.mel())

    def train(self) -> TrainConfig:
        v = self.values["train"]
        sa = self.values["specaug"]
        # Training always uses random row/column patchout; the mode/t_keep
        # keys of [patchout] only steer embed and bench. Zero drops disable.
        patchout = PatchoutSpec.training(
            self.values["patchout"]["f_drop"], self.values["patchout"]["t_drop"]
        )
        return TrainConfig(
            epochs=v["epochs"], warmup_epochs=v["warmup_epochs"],
            plateau_end_epoch=v["plateau_end_epoch"], decay_epochs=v["decay_epochs"],
            lr_peak=v["lr_peak"], lr_floor=v["lr_floor"], weight_decay=v["weight_decay"],
            mixup_alpha=v["mixup_alpha"],
            specaug=SpecAugmentConfig(max_t_groups=sa["max_t_groups"], t_width=sa["t_width"],
                                      max_f_groups=sa["max_f_groups"], f_width=sa["f_width"]),
            patchout=patchout,
            epoch_sample=v["epoch_sample"], batch_size=v["batch_size"],
            seg_frames=self.seg_frames(),
            swa_start_epoch=v["swa_start_epoch"], swa_interval=v["swa_interval"],
            val_fraction=v["val_fraction"], seed=self.seed(),
        )

    def probe(self) -> ProbeConfig:
        v = self.values["probe"]
        return ProbeConfig(hidden=v["hidden"], dropout=v["dropout"], batch=v["batch"],
                           epochs=v["epochs"], lr_max=v["lr_max"], lr_start=v["lr_start"],
                           lr_end=v["lr_end"], rise_epochs=v["rise_epochs"],
                           fall_epochs=v["fall_epochs"], weight_decay=v["weight_decay"])

    def probe_grid(self) -> dict:
        return {k: tuple(v) for k, v in self.values["probe_grid"].items()}

    def bench(self) -> BenchConfig:
        v = self.values["bench"]
        return BenchConfig(t_keep_grid=tuple(v["t_keep_grid"]),
                           f_rows_grid=tuple(v["f_rows_grid"]),
                           repetitions=v["repetitions"], warmup=v["warmup"],
                           threads=v["threads"], segment_s=v["segment_s"], batch=v["batch"],
                           min_time_s=v["min_time_s"], max_batch=v["max_batch"])

    def seed(self) -> int:
        return self.values["run"]["seed"]

    def threads(self) -> int:
        return self.values["run"]["threads"]

    # -- persistence ----------------------------------------------------------

    def dump(self, path):
        parser = configparser.ConfigParser()
        for section in SCHEMA:
            parser[section] = {
                key: _format_value(self.values[section][key]) for key in SCHEMA[section]
            }
        with open(path, "w") as fh:
            parser.write(fh)


def load_runconfig(path=None, overrides=()) -> RunConfig:
    """Defaults, then the config file, then `section.key=value` overrides."""
    values = {sec: {key: default for key, (_, default) in keys.items()}
              for sec, keys in SCHEMA.items()}

    def apply(section: str, key: str, raw: str):
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        parser_fn = SCHEMA[section][key][0]
        try:
            values[section][key] = parser_fn(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})")

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise NotFound(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config {path}: {exc}")
        for section in parser.sections():
            for key, raw in parser[section].items():
                apply(section, key, raw)

    env_threads = os.environ.get(_ENV_THREADS)
    if env_threads and all("run.threads" not in o for o in overrides):
        try:
            values["run"]["threads"] = int(env_threads)
        except ValueError:
            raise ConfigError(f"bad {_ENV_THREADS} value: {env_threads!r}")

    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"override must look like section.key=value: {override!r}")
        target, raw = override.split("=", 1)
        if "." not in target:
            raise ConfigError(f"override key must be section.key: {target!r}")
        section, key = target.split(".", 1)
        apply(section.strip(), key.strip(), raw.strip())

    return RunConfig(values=values)
