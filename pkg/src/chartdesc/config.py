"""Harness configuration file (YAML) and provider wiring."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml

from .informativeness import DEFAULT_BASE_WEIGHTS
from .matching import MatchConfig
from .model import SemanticLevel, level_map
from .providers import (
    ChatClient,
    EmbeddingClient,
    ResponseCache,
    chat_client_from_profile,
    embedding_client_from_profile,
)

ALL_METRICS = ("faithfulness", "coverage", "informativeness", "acuity", "bleu", "rouge")
PROFILE_ROLES = ("generator", "extractor", "adjudicator", "embedder")


class ConfigError(ValueError):
    pass


def parse_metrics(value: Union[str, Any]) -> tuple:
    items = value.split(",") if isinstance(value, str) else list(value)
    metrics = tuple(dict.fromkeys(m.strip().lower() for m in items if m.strip()))
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {list(ALL_METRICS)}")
    if not metrics:
        raise ConfigError("no metrics requested")
    return metrics


def _base_weights(value: Any) -> dict:
    if value is None:
        return dict(DEFAULT_BASE_WEIGHTS)
    if isinstance(value, Mapping):
        return {SemanticLevel.parse(k): float(v) for k, v in value.items()}
    return level_map(value)


@dataclass(frozen=True)
class HarnessConfig:
    match: MatchConfig = field(default_factory=MatchConfig)
    base_weights: Mapping[SemanticLevel, float] = field(default_factory=lambda: dict(DEFAULT_BASE_WEIGHTS))
    providers: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    prompt_overrides: Mapping[str, str] = field(default_factory=dict)
    metrics: tuple = ALL_METRICS
    concurrency: int = 4

    def __post_init__(self) -> None:
        if set(self.base_weights) != set(SemanticLevel) or any(v <= 0 for v in self.base_weights.values()):
            raise ConfigError("level base weights must be four positive numbers (L1..L4)")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        unknown = set(self.providers) - set(PROFILE_ROLES)
        if unknown:
            raise ConfigError(f"unknown provider roles {sorted(unknown)}; expected {list(PROFILE_ROLES)}")

    def to_dict(self) -> dict:
        return {
            "match": self.match.to_dict(),
            "level_base_weights": [self.base_weights[l] for l in SemanticLevel],
            "providers": {k: dict(v) for k, v in sorted(self.providers.items())},
            "prompts": dict(sorted(self.prompt_overrides.items())),
            "metrics": list(self.metrics),
            "concurrency": self.concurrency,
        }

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("concurrency")  # scheduling does not change results
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]]) -> "HarnessConfig":
        data = dict(data or {})
        known = {"match", "level_base_weights", "providers", "prompts", "metrics", "concurrency"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(
                match=MatchConfig.from_dict(data.get("match")),
                base_weights=_base_weights(data.get("level_base_weights")),
                providers={k: dict(v) for k, v in (data.get("providers") or {}).items()},
                prompt_overrides=dict(data.get("prompts") or {}),
                metrics=parse_metrics(data["metrics"]) if "metrics" in data else ALL_METRICS,
                concurrency=int(data.get("concurrency", 4)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: Optional[Union[str, Path]] = None) -> HarnessConfig:
    """Read a YAML config; ``None`` gives the built-in defaults."""
    if path is None:
        return HarnessConfig()
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    data = dict(data or {})
    # file paths inside the config are relative to the config file
    if data.get("prompts"):
        data["prompts"] = {k: str((path.parent / v).resolve()) for k, v in data["prompts"].items()}
    for profile in (data.get("providers") or {}).values():
        if isinstance(profile, dict) and profile.get("replies_file"):
            profile["replies_file"] = str((path.parent / profile["replies_file"]).resolve())
    return HarnessConfig.from_dict(data)


@dataclass
class Clients:
    generator: Optional[ChatClient] = None
    extractor: Optional[ChatClient] = None
    adjudicator: Optional[ChatClient] = None
    embedder: Optional[EmbeddingClient] = None


def build_clients(config: HarnessConfig, cache_dir: Optional[Union[str, Path]] = None) -> Clients:
    """Instantiate the configured provider profiles behind one shared in-flight limit."""
    cache = ResponseCache(cache_dir) if cache_dir else None
    limiter = threading.BoundedSemaphore(config.concurrency)
    clients = Clients()
    for role in PROFILE_ROLES:
        profile = config.providers.get(role)
        if profile is None:
            continue
        if role == "embedder":
            clients.embedder = embedding_client_from_profile(profile, cache, limiter)
        else:
            setattr(clients, role, chat_client_from_profile(profile, cache, limiter))
    return clients
