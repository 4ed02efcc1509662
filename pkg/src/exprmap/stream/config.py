"""Server configuration.

Plain INI file with a single ``[server]`` section::

    [server]
    host = 127.0.0.1
    port = 7070
    alignment = bda.bin      ; optional, identity if omitted
    epm = epm.bin
    model = flm.bin
    cloud = cloud.bin
    offsets = mia.bin        ; optional
    writer_queue = 4         ; pending GAUSS_UPDATE messages before backpressure

Relative paths resolve against the file's directory.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    epm: str
    model: str
    cloud: str
    alignment: Optional[str] = None
    offsets: Optional[str] = None
    host: str = "127.0.0.1"
    port: int = 7070
    writer_queue: int = 4

    def __post_init__(self):
        self.port = int(self.port)
        self.writer_queue = int(self.writer_queue)
        if not 0 <= self.port < 65536:
            raise ConfigError(f"port {self.port} out of range")
        if self.writer_queue < 1:
            raise ConfigError("writer_queue must be >= 1")


PATH_KEYS = ("epm", "model", "cloud", "alignment", "offsets")


def load_config(path, overrides: Optional[dict] = None) -> PipelineConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    with open(path) as f:
        parser.read_file(f)
    if not parser.has_section("server"):
        raise ConfigError(f"{path}: missing [server] section")
    raw = dict(parser["server"])
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    base = os.path.dirname(os.path.abspath(path))
    for key in PATH_KEYS:
        if raw.get(key) and not os.path.isabs(raw[key]):
            raw[key] = os.path.join(base, raw[key])
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    missing = [k for k in ("epm", "model", "cloud") if not raw.get(k)]
    if missing:
        raise ConfigError(f"{path}: missing required keys {missing}")
    return PipelineConfig(**raw)
