"""Flat ``key = value`` run configuration files and run manifests.

Unknown keys are hard errors so typos never silently fall back to
defaults. '#' starts a comment.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO

from .errors import ConfigError
from .model import ModelConfig
from .rewire import RewireConfig
from .train import TrainConfig

_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def _parse_bool(key: str, raw: str) -> bool:
    try:
        return _BOOL[raw.lower()]
    except KeyError:
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}") from None


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def _parse_dims(key: str, raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in raw.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, "
                          f"got {raw!r}") from None


@dataclass
class RunSpec:
    """A run configuration plus the data files it references."""

    cfg: TrainConfig
    train_data: str | None = None
    test_data: str | None = None
    clustering: str | None = None


# key -> (section, parser); section "paths" goes to RunSpec, the rest to
# the nested config dataclasses.
_KEYS = {
    "train_data": ("paths", str),
    "test_data": ("paths", str),
    "clustering": ("paths", str),
    "epochs": ("train", _parse_int),
    "batch_size": ("train", _parse_int),
    "lr_encoder": ("train", _parse_float),
    "lr_classifier": ("train", _parse_float),
    "lr_aux": ("train", _parse_float),
    "lr_intermediate": ("train", _parse_float),
    "warmup_steps": ("train", _parse_int),
    "weight_decay_encoder": ("train", _parse_float),
    "weight_decay_classifier": ("train", _parse_float),
    "optimizer_encoder": ("train", str),
    "optimizer_classifier": ("train", str),
    "dropout": ("train", _parse_float),
    "seed": ("train", _parse_int),
    "precision": ("train", str),
    "encoder_dims": ("model", _parse_dims),
    "fan_in": ("model", _parse_int),
    "use_intermediate": ("model", _parse_bool),
    "intermediate_size": ("model", _parse_int),
    "aux_enabled": ("model", _parse_bool),
    "aux_cutoff_epoch": ("model", None),  # int or the sentinel "none"
    "aux_initial_scale": ("model", _parse_float),
    "loss": ("model", str),
    "pos_weight": ("model", _parse_float),
    "rewire_mode": ("rewire", str),
    "rewire_fraction": ("rewire", _parse_float),
    "rewire_threshold": ("rewire", _parse_float),
    "rewire_interval": ("rewire", _parse_int),
    "rewire_stop_fraction": ("rewire", _parse_float),
}

_REWIRE_FIELD = {"rewire_mode": "mode", "rewire_fraction": "rewire_fraction",
                 "rewire_threshold": "rewire_threshold",
                 "rewire_interval": "interval",
                 "rewire_stop_fraction": "stop_fraction"}


def parse_kv_text(text: str) -> dict[str, str]:
    """'key = value' lines; '#' comments; later keys override earlier ones."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"config line {lineno}: expected 'key = value', "
                              f"got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def spec_from_mapping(kv: dict[str, str]) -> RunSpec:
    """Build a RunSpec from flat string keys, rejecting unknown keys."""
    unknown = sorted(set(kv) - set(_KEYS))
    if unknown:
        valid = ", ".join(sorted(_KEYS))
        raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {valid}")
    cfg = TrainConfig(rewire=RewireConfig(mode="fraction", rewire_fraction=0.25),
                      model=ModelConfig())
    spec = RunSpec(cfg=cfg)
    for key, raw in kv.items():
        section, parse = _KEYS[key]
        if key == "aux_cutoff_epoch":
            value = None if raw.lower() == "none" else _parse_int(key, raw)
            cfg.model.aux_cutoff_epoch = value
            continue
        value = raw if parse is str else parse(key, raw)
        if section == "paths":
            setattr(spec, key, value)
        elif section == "train":
            setattr(cfg, key, value)
        elif section == "model":
            setattr(cfg.model, key, value)
        else:
            setattr(cfg.rewire, _REWIRE_FIELD[key], value)
    return spec


def load_run_spec(path: str | Path) -> RunSpec:
    text = Path(path).read_text(encoding="utf-8")
    return spec_from_mapping(parse_kv_text(text))


def spec_to_mapping(spec: RunSpec) -> dict[str, str]:
    """Flat resolved view of a RunSpec, inverse of spec_from_mapping."""
    cfg, m, r = spec.cfg, spec.cfg.model, spec.cfg.rewire
    out: dict[str, str] = {}
    for key in ("train_data", "test_data", "clustering"):
        value = getattr(spec, key)
        if value is not None:
            out[key] = value
    for key, (section, _) in _KEYS.items():
        if section == "train":
            out[key] = str(getattr(cfg, key))
        elif section == "model":
            if key == "aux_cutoff_epoch":
                out[key] = ("none" if m.aux_cutoff_epoch is None
                            else str(m.aux_cutoff_epoch))
            elif key == "encoder_dims":
                out[key] = ",".join(str(d) for d in m.encoder_dims)
            else:
                out[key] = str(getattr(m, key))
        elif section == "rewire":
            value = getattr(r, _REWIRE_FIELD[key])
            if value is not None:
                out[key] = str(value)
    return out


def write_config(spec: RunSpec, stream: IO[str]) -> None:
    for key, value in spec_to_mapping(spec).items():
        stream.write(f"{key} = {value}\n")


def sha256_of(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(command: str, spec: RunSpec | None, seed: int | None,
                   data_paths: dict[str, str], output: str,
                   extra: dict | None = None) -> dict:
    """Everything needed to replay a run; written before any computation."""
    from . import __version__
    manifest = {
        "tool": "fanin",
        "tool_version": __version__,
        "command": command,
        "seed": seed,
        "config": spec_to_mapping(spec) if spec is not None else {},
        "datasets": {
            name: {"path": str(p), "sha256": sha256_of(p)}
            for name, p in data_paths.items() if p is not None
        },
        "output": str(output),
    }
    if extra:
        manifest.update(extra)
    return manifest


def write_manifest(manifest: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
