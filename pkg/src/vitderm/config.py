"""Flat ``key=value`` run configs.

Precedence is CLI > file > default.  One namespace covers the model
(:class:`ViTConfig` fields plus ``model`` for the preset name), training
(:class:`TrainConfig` fields) and data preparation keys.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Dict, Iterable, Mapping, Tuple

from .errors import ConfigurationError
from .model import ViTConfig, make_config
from .training import TrainConfig

_MODEL_KEYS = {f.name for f in fields(ViTConfig)} - {"name"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_MODEL_LIKE = {f.name: f.default for f in fields(ViTConfig)}
DATA_DEFAULTS: Dict[str, object] = {
    "augment": True,
    "augment_target": None,  # None -> nv count of the training split
    "drop_unknown_localization": False,
    "split_ratios": "0.8,0.1,0.1",
}
_OPTIONAL = {"learning_rate": float, "steps_per_epoch": int, "early_stop_patience": int, "augment_target": int}
KNOWN_KEYS = {"model"} | _MODEL_KEYS | _TRAIN_KEYS | set(DATA_DEFAULTS)


def _defaults() -> Dict[str, object]:
    out: Dict[str, object] = {"model": "L16"}
    out.update({f.name: f.default for f in fields(TrainConfig)})
    out.update(DATA_DEFAULTS)
    return out


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on", "y"):
        return True
    if t in ("0", "false", "no", "off", "n", "x"):
        return False
    raise ConfigurationError(f"expected a boolean, got {text!r}")


def _coerce(key: str, text: str, like) -> object:
    if key in _OPTIONAL:
        return None if text.strip().lower() in ("none", "") else _OPTIONAL[key](text)
    if isinstance(like, bool):
        return parse_bool(text)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text.strip()


def parse_pairs(lines: Iterable[str], origin: str = "<args>") -> Dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"{origin}, line {lineno}: expected key=value, got {raw.strip()!r}")
        if key not in KNOWN_KEYS:
            raise ConfigurationError(f"{origin}, line {lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def read_config_file(path) -> Dict[str, str]:
    return parse_pairs(Path(path).read_text(encoding="utf-8").splitlines(), str(path))


class ResolvedConfig:
    """Merged values with the source of each key (``default``, ``file`` or ``cli``)."""

    def __init__(self, file_values: Mapping[str, str] = (), cli_values: Mapping[str, str] = ()):
        defaults = _defaults()
        model_name = dict(cli_values).get("model") or dict(file_values).get("model") or defaults["model"]
        base_model = make_config(str(model_name)) if model_name != "custom" else None
        if base_model is not None:
            defaults.update({k: getattr(base_model, k) for k in _MODEL_KEYS})
        self.values: Dict[str, object] = dict(defaults)
        self.sources: Dict[str, str] = {k: "default" for k in defaults}
        for source, given in (("file", file_values), ("cli", cli_values)):
            for key, text in dict(given).items():
                if key not in KNOWN_KEYS:
                    raise ConfigurationError(f"unknown config key {key!r}")
                like = self.values.get(key, _MODEL_LIKE.get(key, ""))
                try:
                    self.values[key] = _coerce(key, text, like) if isinstance(text, str) else text
                except ValueError as exc:
                    raise ConfigurationError(f"bad value for {key!r}: {text!r} ({exc})") from None
                self.sources[key] = source

    def model_config(self) -> ViTConfig:
        name = str(self.values["model"])
        arch = {k: self.values[k] for k in _MODEL_KEYS if k in self.values}
        if "l2_lambda" in self.values:
            arch["l2_lambda"] = float(self.values["l2_lambda"])
        return make_config(name, **arch)

    def train_config(self) -> TrainConfig:
        kw = {k: self.values[k] for k in _TRAIN_KEYS}
        return TrainConfig(**kw)

    def split_ratios(self) -> Tuple[float, float, float]:
        parts = str(self.values["split_ratios"]).split(",")
        try:
            ratios = tuple(float(p) for p in parts)
        except ValueError:
            raise ConfigurationError("split_ratios must be three comma-separated numbers") from None
        if len(ratios) != 3:
            raise ConfigurationError("split_ratios must be three comma-separated numbers")
        return ratios  # type: ignore[return-value]

    def snapshot(self) -> Dict[str, Dict[str, object]]:
        return {k: {"value": self.values[k], "source": self.sources[k]} for k in sorted(self.values)}


def format_model_config(config: ViTConfig) -> str:
    d = config.to_dict()
    lines = [f"model={d.pop('name')}"] + [f"{k}={v}" for k, v in sorted(d.items())]
    return "\n".join(lines) + "\n"


def read_model_config(path) -> ViTConfig:
    """Parse a sidecar written by :func:`format_model_config`."""
    values = read_config_file(path)
    resolved = ResolvedConfig(file_values=values)
    return resolved.model_config()
