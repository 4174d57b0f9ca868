"""Run configuration loaded from a single YAML file."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backend import BackendConfig, BackendMode
from .corpus import ChunkPolicy, SplitPreference
from .errors import ConfigError

_SECTIONS = {"corpus", "backend", "discussion", "metrics", "report", "roles"}


@dataclass
class RunConfig:
    manifest: str | None = None
    stale_after_days: float | None = None
    chunk_policy: ChunkPolicy = field(default_factory=ChunkPolicy)
    backend: BackendConfig = field(default_factory=BackendConfig)
    discussion: dict = field(default_factory=dict)
    labels: str | None = None
    relevance_threshold: float = 0.5
    role_overrides: dict = field(default_factory=dict)
    out: str = "out"


def _resolve(base: Path, value):
    if value is None:
        return None
    p = Path(value).expanduser()
    return str(p if p.is_absolute() else (base / p).resolve())


def load_config(path=None) -> RunConfig:
    """Parse a config file; relative paths inside it resolve against its directory.

    With no path, returns the defaults (mock backend, no manifest).
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path}: top level must be a mapping")
    unknown = set(raw) - _SECTIONS
    if unknown:
        raise ConfigError(f"config {path}: unknown sections {', '.join(sorted(unknown))}")
    base = path.parent
    corpus = raw.get("corpus") or {}
    backend = dict(raw.get("backend") or {})
    metrics = raw.get("metrics") or {}
    report = raw.get("report") or {}
    try:
        policy = ChunkPolicy(
            int(corpus.get("target_chars", 1600)),
            int(corpus.get("overlap_chars", 200)),
            SplitPreference(corpus.get("split_preference", "paragraph")),
        )
        if "mock_script" in backend:
            backend["mock_script"] = _resolve(base, backend["mock_script"])
        backend_cfg = BackendConfig(**backend)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config {path}: {exc}") from exc
    return RunConfig(
        manifest=_resolve(base, corpus.get("manifest")),
        stale_after_days=corpus.get("stale_after_days"),
        chunk_policy=policy,
        backend=backend_cfg,
        discussion=dict(raw.get("discussion") or {}),
        labels=_resolve(base, metrics.get("labels")),
        relevance_threshold=float(report.get("relevance_threshold", 0.5)),
        role_overrides=dict(raw.get("roles") or {}),
    )


def with_mock(cfg: BackendConfig) -> BackendConfig:
    return BackendConfig(**{**cfg.__dict__, "mode": BackendMode.MOCK})
