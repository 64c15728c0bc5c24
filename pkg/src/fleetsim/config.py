"""Flat ``key = value`` configuration files.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Keys may be dotted (``stream.llama2-70b.east.IW-F.base_rps``). Values are
strings until a typed getter converts them.
"""

from __future__ import annotations

from typing import Dict, Iterator, Mapping, Optional, Tuple

from .domain import FleetSimError


class ConfigError(FleetSimError):
    pass


def parse_kv_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip().strip('"').strip("'")
    return out


def parse_kv_file(path) -> Dict[str, str]:
    try:
        with open(path) as fh:
            return parse_kv_text(fh.read(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


class KV:
    """Typed read access to a parsed file, tracking which keys were consumed."""

    def __init__(self, values: Mapping[str, str], source: str = "<config>"):
        self.values = dict(values)
        self.source = source
        self.used = set()

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def _raw(self, key: str) -> Optional[str]:
        if key in self.values:
            self.used.add(key)
            return self.values[key]
        return None

    def get_str(self, key: str, default: Optional[str] = None) -> Optional[str]:
        v = self._raw(key)
        return default if v is None else v

    def get_float(self, key: str, default: Optional[float] = None) -> Optional[float]:
        v = self._raw(key)
        if v is None:
            return default
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{self.source}: {key} must be a number, got {v!r}") from None

    def get_int(self, key: str, default: Optional[int] = None) -> Optional[int]:
        v = self._raw(key)
        if v is None:
            return default
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"{self.source}: {key} must be an integer, got {v!r}") from None

    def get_list(self, key: str, default=None):
        v = self._raw(key)
        if v is None:
            return default
        return [x.strip() for x in v.split(",") if x.strip()]

    def prefixed(self, prefix: str) -> Iterator[Tuple[str, str]]:
        for key in sorted(self.values):
            if key.startswith(prefix):
                self.used.add(key)
                yield key[len(prefix):], self.values[key]

    def unused(self):
        return sorted(set(self.values) - self.used)
