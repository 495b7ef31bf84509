"""Flat ``key = value`` run configuration.

Lines starting with ``#`` are comments; a trailing ``# ...`` is stripped too.
Keys are grouped by prefix (``vq.hidden``, ``dfot_train.steps``...). Unknown
keys are rejected so that typos never silently fall back to defaults.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .dfot import DFoTConfig, DFoTTrainConfig
from .errors import ConfigError
from .vqvae import VQVAEConfig, VQVAETrainConfig

_SECTIONS = {
    "vq": VQVAEConfig,
    "vq_train": VQVAETrainConfig,
    "dfot": DFoTConfig,
    "dfot_train": DFoTTrainConfig,
}
# d_z is derived from the tokenizer, never set by hand
_DERIVED = {"dfot.d_z"}

_EXTRA = {
    "seed": 0,
    "data.mode": "orbit",
    "data.P": 2,
    "data.T": 64,
    "data.n_train": 4,
    "data.n_val": 0,
    "data.mirror_augment": False,
    "dfot.raw_features": False,
    "sample.strategy": "inpaint",
    "sample.guidance": "none",
    "sample.w": 1.0,
    "sample.tt_offset": 1.0,
    "sample.history": 4,
    "sample.target": 1,
    "sample.controller": 0,
    "sample.keyframes": "0,15",
    "sample.steps": 30,
    "sample.samples": 1,
    "sample.window": 16,
    "sample.overlap": 4,
    "sample.total": 40,
    "sample.snap": True,
    "eval.contact_height": 0.05,
    "eval.feature_window": 16,
}


def defaults() -> dict:
    out = dict(_EXTRA)
    for prefix, cls in _SECTIONS.items():
        inst = cls()
        for f in fields(cls):
            key = f"{prefix}.{f.name}"
            if key not in _DERIVED:
                out[key] = getattr(inst, f.name)
    return dict(sorted(out.items()))


def _coerce(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    return text


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = defaults()
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        default = self.values[key]
        self.values[key] = _coerce(key, value, default) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    def section(self, prefix) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def vq(self):
        return VQVAEConfig(**self.section("vq"))

    def vq_train(self):
        return VQVAETrainConfig(**self.section("vq_train"))

    def dfot(self, d_z):
        sec = self.section("dfot")
        sec.pop("raw_features")
        return DFoTConfig(d_z=d_z, **sec)

    def dfot_train(self):
        return DFoTTrainConfig(**self.section("dfot_train"))

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.values.items())

    def write(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``text`` on top of ``base`` (defaults when omitted)."""
    cfg = RunConfig(base.values if base is not None else None)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key = key.strip()
        try:
            cfg.set(key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    return cfg


def load(path, base: RunConfig | None = None) -> RunConfig:
    return loads(Path(path).read_text(encoding="utf-8"), base)
