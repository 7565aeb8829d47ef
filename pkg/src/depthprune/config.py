"""Flat ``key = value`` run configuration with a typed schema."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(msg if line is None else f"line {line}: {msg}")
        self.line = line


# key -> (type, default)
SCHEMA: dict[str, tuple[type, Any]] = {
    "seed": (int, 80),
    "layers": (int, 12),
    "d": (int, 16),
    "block": (int, 4),
    "keep": (int, 2),
    "k": (int, 1),
    "tau": (float, 1.0),
    "anneal": (bool, False),
    "tau_final": (float, 0.1),
    "mask_steps": (int, 2000),
    "lr_params": (float, 0.01),
    "lr_logits": (float, 0.05),
    "batch": (int, 64),
    "lambda_task": (float, 1.0),
    "lambda_distill": (float, 1.0),
    "activation": (bool, True),
    "grad_clip": (float, 1.0),
    "rank": (int, 4),
    "pi_every": (int, 1),
    "teacher_steps": (int, 5000),
    "teacher_lr": (float, 3e-3),
    "finetune_steps": (int, 2000),
    "finetune_lr": (float, 0.05),
    "random_trials": (int, 8),
    "phase": (int, 0),
    "jobs": (int, 1),
    "seeds": (int, 5),
    "strategy": (str, "uniform"),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(key: str, raw: str, line: int | None = None) -> Any:
    kind = SCHEMA[key][0]
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}", line) from None


@dataclass
class Config:
    values: dict[str, Any] = field(default_factory=lambda: {k: v for k, (_, v) in SCHEMA.items()})
    warnings: list[str] = field(default_factory=list)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, value: Any) -> None:
        """Override one key; strings are parsed by the schema, other values stored as given."""
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        self.values[key] = _coerce(key, value) if isinstance(value, str) else value

    def resolved(self) -> str:
        return "\n".join(f"{k} = {_render(self.values[k])}" for k in SCHEMA)


def _render(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str | bytes) -> Config:
    """Parse config text.  ``#`` starts a comment; the last duplicate wins."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    cfg = Config()
    seen: dict[str, int] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", n)
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", n)
        if key in seen:
            msg = f"line {n}: {key} already set at line {seen[key]}; using the later value"
            log.warning(msg)
            cfg.warnings.append(msg)
        seen[key] = n
        cfg.values[key] = _coerce(key, value, n)
    return cfg


def load_config(path) -> Config:
    return parse_config(Path(path).read_bytes())
