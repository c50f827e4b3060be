"""Resolved run parameters, their fingerprint and ``key = value`` config files."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import os
from pathlib import Path
from typing import Optional

from .errors import ConfigurationError

SEED_ENV = "AAIT_SEED"


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {k: _plain(v) for k, v in dataclasses.asdict(value).items()}
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def fingerprint(params, length: int = 16) -> str:
    """Short sha256 of the canonical JSON of ``params``."""
    blob = json.dumps(_plain(params), sort_keys=True, ensure_ascii=False, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:length]


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def resolve_seed(flag: Optional[int], config_value=None, default: int = 0) -> int:
    """Seed precedence: explicit flag, config file, ``AAIT_SEED``, then ``default``."""
    for value, origin in ((flag, "--seed"), (config_value, "config seed"), (os.environ.get(SEED_ENV), SEED_ENV)):
        if value is None or value == "":
            continue
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{origin} must be an integer, got {value!r}") from None
    return default
