"""Plain-text harness configuration: one ``section.key = value`` per line.

A single file drives pack, bench, train, and sweep so a whole experiment is
reproducible from one artifact. Values stay raw strings until a typed
accessor asks for them; unknown keys are allowed (sweep axes reference
arbitrary keys). ``#`` starts a comment; later assignments win.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

_MISSING = object()


class Config:
    def __init__(self, values: dict[str, str] | None = None):
        self.values: dict[str, str] = dict(values or {})

    # -- construction ---------------------------------------------------------

    @classmethod
    def parse(cls, text: str) -> "Config":
        values: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if "#" in line:
                line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key or "." not in key:
                raise ConfigError(f"line {lineno}: key must be dotted (section.key), got {key!r}")
            values[key] = value.strip()
        return cls(values)

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text)

    def with_overrides(self, overrides: dict[str, str]) -> "Config":
        merged = dict(self.values)
        merged.update({k: str(v) for k, v in overrides.items()})
        return Config(merged)

    # -- typed accessors ------------------------------------------------------

    def _raw(self, key: str, default=_MISSING) -> str:
        if key in self.values:
            return self.values[key]
        if default is _MISSING:
            raise ConfigError(f"missing required config key {key!r}")
        return default

    def get_str(self, key: str, default=_MISSING) -> str:
        return self._raw(key, default)

    def get_int(self, key: str, default=_MISSING) -> int:
        raw = self._raw(key, default)
        if isinstance(raw, int):
            return raw
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key} must be an integer, got {raw!r}") from exc

    def get_float(self, key: str, default=_MISSING) -> float:
        raw = self._raw(key, default)
        if isinstance(raw, (int, float)):
            return float(raw)
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key} must be a number, got {raw!r}") from exc

    def get_bool(self, key: str, default=_MISSING) -> bool:
        raw = self._raw(key, default)
        if isinstance(raw, bool):
            return raw
        lowered = str(raw).lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {raw!r}")

    def get_floats(self, key: str, default=_MISSING) -> list[float]:
        raw = self._raw(key, default)
        if not isinstance(raw, str):
            return list(raw)
        try:
            return [float(part.strip()) for part in raw.split(",") if part.strip()]
        except ValueError as exc:
            raise ConfigError(f"{key} must be comma-separated numbers, got {raw!r}") from exc

    def get_ints(self, key: str, default=_MISSING) -> list[int]:
        raw = self._raw(key, default)
        if not isinstance(raw, str):
            return list(raw)
        try:
            return [int(part.strip()) for part in raw.split(",") if part.strip()]
        except ValueError as exc:
            raise ConfigError(f"{key} must be comma-separated integers, got {raw!r}") from exc

    def get_strs(self, key: str, default=_MISSING) -> list[str]:
        raw = self._raw(key, default)
        if not isinstance(raw, str):
            return list(raw)
        return [part.strip() for part in raw.split(",") if part.strip()]

    # -- structure -------------------------------------------------------------

    def section(self, prefix: str) -> dict[str, str]:
        """All keys under ``prefix.``, with the prefix stripped."""
        head = prefix.rstrip(".") + "."
        return {k[len(head):]: v for k, v in self.values.items() if k.startswith(head)}

    def has(self, key: str) -> bool:
        return key in self.values

    def echo(self) -> dict[str, str]:
        return dict(sorted(self.values.items()))
