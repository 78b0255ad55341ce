"""Run configuration: built-in defaults < TOML file < command-line flags.

The file format is TOML with one table per section::

    [chunking]
    size = 256
    overlap = 32

    [calibration]
    alpha = 0.1
    mode = "finite-sample"

Unknown sections or keys are errors. API keys never live here; remote
providers read ``CONFORMAL_RAG_API_KEY`` from the environment.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .calibration import QUANTILE_MODES
from .embedding import METRICS
from .errors import ConfigError
from .retrieval import COMPARISONS


@dataclass
class ChunkingConfig:
    size: int = 256
    overlap: int = 32


@dataclass
class EmbeddingConfig:
    provider: str = "reference"
    endpoint: str | None = None
    model: str | None = None
    # None: 256 when building a store, the store's own dim when reading one.
    dim: int | None = None
    batch: int = 64
    max_in_flight: int = 4


@dataclass
class SimilarityConfig:
    metric: str = "cosine"


@dataclass
class CalibrationConfig:
    alpha: float = 0.1
    mode: str = "finite-sample"
    max_rank: int | str = 50
    judge: str = "substring"
    strict: bool = False


@dataclass
class RetrievalConfig:
    comparison: str = "geq"
    max_chunks: int | None = None
    max_context_chars: int | None = None


@dataclass
class LLMConfig:
    endpoint: str | None = None
    model: str | None = None
    max_in_flight: int = 4


@dataclass
class PathsConfig:
    store: str | None = None
    report: str | None = None
    templates: str | None = None


@dataclass
class Config:
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    llm: LLMConfig = field(default_factory=LLMConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @property
    def max_rank(self) -> int | None:
        return None if self.calibration.max_rank == "all" else int(self.calibration.max_rank)

    def template_path(self, name: str) -> str | None:
        if not self.paths.templates:
            return None
        path = Path(self.paths.templates) / name
        return str(path) if path.is_file() else None


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _require(cond: bool, path: str, msg: str, value) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}, got {value!r}")


def _opt_str(v) -> bool:
    return v is None or isinstance(v, str)


_CHECKS = {
    "chunking.size": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    "chunking.overlap": (lambda v: _is_int(v) and v >= 0, "must be an integer >= 0"),
    "embedding.provider": (lambda v: v in ("reference", "remote"), "must be 'reference' or 'remote'"),
    "embedding.endpoint": (_opt_str, "must be a string"),
    "embedding.model": (_opt_str, "must be a string"),
    "embedding.dim": (lambda v: v is None or (_is_int(v) and v >= 2), "must be an integer >= 2"),
    "embedding.batch": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    "embedding.max_in_flight": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    "similarity.metric": (lambda v: v in METRICS, f"must be one of {METRICS}"),
    "calibration.alpha": (
        lambda v: isinstance(v, (int, float)) and not isinstance(v, bool) and 0 < v < 1,
        "must be a number strictly between 0 and 1",
    ),
    "calibration.mode": (lambda v: v in QUANTILE_MODES, f"must be one of {QUANTILE_MODES}"),
    "calibration.max_rank": (lambda v: v == "all" or (_is_int(v) and v >= 1), "must be an integer >= 1 or 'all'"),
    "calibration.judge": (lambda v: v in ("substring", "llm"), "must be 'substring' or 'llm'"),
    "calibration.strict": (lambda v: isinstance(v, bool), "must be true or false"),
    "retrieval.comparison": (lambda v: v in COMPARISONS, f"must be one of {COMPARISONS}"),
    "retrieval.max_chunks": (lambda v: v is None or (_is_int(v) and v >= 1), "must be an integer >= 1"),
    "retrieval.max_context_chars": (lambda v: v is None or (_is_int(v) and v >= 0), "must be an integer >= 0"),
    "llm.endpoint": (_opt_str, "must be a string"),
    "llm.model": (_opt_str, "must be a string"),
    "llm.max_in_flight": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    "paths.store": (_opt_str, "must be a string"),
    "paths.report": (_opt_str, "must be a string"),
    "paths.templates": (_opt_str, "must be a string"),
}


def _set(cfg: Config, dotted: str, value) -> None:
    if dotted not in _CHECKS:
        raise ConfigError(f"unknown configuration key {dotted!r}")
    check, msg = _CHECKS[dotted]
    _require(check(value), dotted, msg, value)
    section, key = dotted.split(".")
    if dotted == "calibration.alpha":
        value = float(value)
    setattr(getattr(cfg, section), key, value)


def _flatten(data: dict, source: str) -> dict[str, Any]:
    flat = {}
    sections = {f.name for f in fields(Config)}
    for section, table in data.items():
        if section not in sections:
            raise ConfigError(f"{source}: unknown configuration section [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"{source}: [{section}] must be a table")
        for key, value in table.items():
            flat[f"{section}.{key}"] = value
    return flat


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> Config:
    """Defaults, then the file at ``path``, then ``overrides`` (dotted keys; None values skipped)."""
    cfg = Config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
        for dotted, value in _flatten(data, str(path)).items():
            _set(cfg, dotted, value)
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set(cfg, dotted, value)
    if cfg.chunking.overlap >= cfg.chunking.size:
        raise ConfigError(
            f"chunking.overlap: must be smaller than chunking.size ({cfg.chunking.size}), got {cfg.chunking.overlap}"
        )
    return cfg
