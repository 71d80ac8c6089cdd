"""Operator configuration: one key=value file, overridden by flags,
overridden in turn by SSLSENTRY_* environment variables."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

ENV_PREFIX = "SSLSENTRY_"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class Config:
    proxy_bind: str = "127.0.0.1"
    proxy_port: int = 8190
    admin_bind: str = "127.0.0.1"
    admin_port: int = 8191
    oracle_endpoint: str = "https://127.0.0.1:8192/"
    oracle_bind: str = "127.0.0.1"
    oracle_port: int = 8192
    mode: str = "automatic"
    manual_selection: tuple[str, ...] = ()
    pending_timeout: float = 30.0
    decision_window: float = 5.0
    oracle_timeout: float = 10.0
    fetch_timeout: float = 10.0
    cache_ttl: float = 600.0
    oracle_rate_limit: int = 60
    ca_dir: str = "ca"
    store_path: str = "whitelist.db"
    store_key_file: str = "store.key"
    keystore_path: str = "oracle.keystore"
    keystore_mac_key_file: str = "keystore-mac.key"
    upstream_trust_path: str = ""
    use_system_trust: bool = True
    verdict_log_path: str = "verdicts.jsonl"
    mirror_upstream: bool = False

    def validate(self) -> "Config":
        for name in (
            "pending_timeout",
            "decision_window",
            "oracle_timeout",
            "fetch_timeout",
            "cache_ttl",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (1 <= self.proxy_port <= 65535):
            raise ConfigError("proxy_port out of range")
        if self.proxy_port == self.oracle_port:
            raise ConfigError("proxy_port and oracle_port must differ when co-hosted")
        if self.admin_port in (self.proxy_port, self.oracle_port):
            raise ConfigError("admin_port must differ from proxy and oracle ports")
        if self.mode not in ("automatic", "selective", "manual"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        return self


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def _parse_value(field: dataclasses.Field, raw: str):
    if field.type in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{field.name}: expected true/false, got {raw!r}")
    if field.type in ("int", int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{field.name}: expected integer, got {raw!r}") from exc
    if field.type in ("float", float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{field.name}: expected number, got {raw!r}") from exc
    if field.type in ("tuple[str, ...]",):
        return tuple(part for part in raw.split(",") if part)
    return raw


def render(config: Config) -> str:
    lines = [f"{f.name}={_render_value(getattr(config, f.name))}" for f in fields(config)]
    return "\n".join(lines) + "\n"


def parse(text: str) -> Config:
    known = {f.name: f for f in fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(known[key], raw.strip())
    return Config(**values)


def load(
    path: Path | str | None = None,
    overrides: dict | None = None,
    environ: dict | None = None,
) -> Config:
    """File, then flag overrides, then environment overrides, then validation."""
    config = Config()
    if path is not None and Path(path).exists():
        try:
            config = parse(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if overrides:
        known = {f.name: f for f in fields(Config)}
        unknown = set(overrides) - set(known)
        if unknown:
            raise ConfigError(f"unknown config overrides: {sorted(unknown)}")
        config = dataclasses.replace(config, **overrides)
    env = environ if environ is not None else os.environ
    env_values = {}
    known = {f.name: f for f in fields(Config)}
    for name, field in known.items():
        raw = env.get(ENV_PREFIX + name.upper())
        if raw is not None:
            env_values[name] = _parse_value(field, raw)
    if env_values:
        config = dataclasses.replace(config, **env_values)
    return config.validate()


def read_key_file(path: Path | str, expected_len: int = 32) -> bytes:
    """Read a hex-encoded symmetric key file."""
    try:
        raw = Path(path).read_text().strip()
        key = bytes.fromhex(raw)
    except OSError as exc:
        raise ConfigError(f"cannot read key file {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"key file {path} is not valid hex") from exc
    if len(key) != expected_len:
        raise ConfigError(f"key file {path}: expected {expected_len} bytes, got {len(key)}")
    return key


def write_key_file(path: Path | str, key: bytes) -> None:
    p = Path(path)
    p.write_text(key.hex() + "\n")
    p.chmod(0o600)
