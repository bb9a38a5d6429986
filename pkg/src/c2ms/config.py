"""Line-oriented ``key = value`` config files shared by all daemons.

Blank lines and ``#`` comments are ignored.  Values are plain strings;
each consumer coerces its own keys.  CLI flags mirror every key and win
over the file; a handful of environment variables win over both.
"""

from __future__ import annotations


class ConfigError(Exception):
    pass


def parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {raw.rstrip()!r}")
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{line_no}: empty key")
            values[key] = value.strip()
    return values


def parse_address(text: str, default_port: int | None = None) -> tuple[str, int]:
    """Split ``host:port``; bare host allowed when a default port exists."""
    host, sep, port = text.rpartition(":")
    if not sep:
        if default_port is None:
            raise ConfigError(f"address {text!r} needs an explicit port")
        return text, default_port
    try:
        return host, int(port)
    except ValueError as exc:
        raise ConfigError(f"bad port in address {text!r}") from exc


def merge(file_values: dict[str, str], overrides: dict[str, str | None]) -> dict[str, str]:
    """File values overlaid with non-None overrides (flags, env)."""
    merged = dict(file_values)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged
