"""Run configuration: a small TOML-style parser, run configs, manifests.

The config file uses plain ``[section]`` headers with ``key = value``
lines (ints, floats, booleans, quoted strings, and flat lists); that
subset is all the train pipeline needs.  Sections: [model], [stage1],
optional [stage2], [data].
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Any, Optional

from . import __version__
from .errors import ConfigError
from .model import ModelConfig
from .training import StageConfig


def _parse_scalar(raw: str, where: str):
    raw = raw.strip()
    if not raw:
        raise ConfigError(f"{where}: empty value")
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    if raw in ("true", "false"):
        return raw == "true"
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(part, where) for part in inner.split(",")]
    try:
        if any(c in raw for c in ".eE") and not raw.lstrip("+-").isdigit():
            return float(raw)
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse value {raw!r}") from exc


def parse_toml_like(text: str) -> dict[str, dict[str, Any]]:
    sections: dict[str, dict[str, Any]] = {}
    current: Optional[str] = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if not current:
                raise ConfigError(f"line {lineno}: empty section name")
            sections.setdefault(current, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, raw = stripped.split("=", 1)
        sections[current][key.strip()] = _parse_scalar(raw, f"line {lineno}")
    return sections


@dataclass
class DataConfig:
    text: list[str] = field(default_factory=list)
    series: str = ""
    vocab: str = ""
    out_dir: str = "run_out"
    synth_length: int = 512
    align_length: int = 128
    synthetic_batch_prob: float = 0.20


@dataclass
class RunConfig:
    model: ModelConfig
    stage1: StageConfig
    stage2: Optional[StageConfig]
    data: DataConfig


def _build(cls, section: dict, where: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - valid
    if unknown:
        raise ConfigError(f"[{where}] has unknown keys: {sorted(unknown)}")
    return cls(**section)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            sections = parse_toml_like(fh.read())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    if "model" not in sections or "stage1" not in sections:
        raise ConfigError("config needs [model] and [stage1] sections")
    data_section = dict(sections.get("data", {}))
    if isinstance(data_section.get("text"), str):
        data_section["text"] = [data_section["text"]]
    return RunConfig(
        model=_build(ModelConfig, sections["model"], "model"),
        stage1=_build(StageConfig, sections["stage1"], "stage1"),
        stage2=(_build(StageConfig, sections["stage2"], "stage2")
                if "stage2" in sections else None),
        data=_build(DataConfig, data_section, "data"),
    )


# ---------------------------------------------------------------------
# run manifests: every CLI run emits one; identical hash => identical outputs
# ---------------------------------------------------------------------

def _canonical(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _canonical(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def config_hash(command: str, config: Any, seed: Optional[int]) -> str:
    blob = json.dumps({"command": command, "config": _canonical(config),
                       "seed": seed, "version": __version__},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: Optional[int]
    code_version: str
    wall_clock_s: float
    outputs: dict[str, str]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ManifestWriter:
    """Collects run facts and writes ``<out>.manifest.json`` at the end."""

    def __init__(self, command: str, config: Any, seed: Optional[int]):
        self.command = command
        self.hash = config_hash(command, config, seed)
        self.seed = seed
        self.start = time.monotonic()
        self.outputs: list[str] = []

    def add_output(self, path: str) -> None:
        self.outputs.append(path)

    def finish(self, manifest_path: Optional[str] = None) -> RunManifest:
        manifest = RunManifest(
            command=self.command,
            config_hash=self.hash,
            seed=self.seed,
            code_version=__version__,
            wall_clock_s=round(time.monotonic() - self.start, 3),
            outputs={p: file_digest(p) for p in self.outputs},
        )
        if manifest_path is None and self.outputs:
            manifest_path = self.outputs[0] + ".manifest.json"
        if manifest_path:
            with open(manifest_path, "w") as fh:
                json.dump(manifest.to_dict(), fh, indent=2)
        return manifest
