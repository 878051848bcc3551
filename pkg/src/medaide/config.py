"""Engine configuration: INI files plus per-run flag overrides."""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .textutil import stable_hash

logger = logging.getLogger(__name__)

PROFILES = ("mock", "replay", "record", "live")
EMBEDDING_BACKENDS = ("hash", "file", "http")
RECOGNIZERS = ("prototype", "prompt")


@dataclass(frozen=True)
class EngineConfig:
    # engine
    profile: str = "mock"
    stages: int = 4
    seed: int = 0
    recognizer: str = "prototype"
    # paths (absolute after load_config)
    grammar_path: str = ""
    token_lexicon_path: str = ""
    element_lexicon_path: str = ""
    rules_path: str = ""
    taxonomy_path: str = ""
    exemplars_path: str = ""
    templates_dir: str = ""
    plans_dir: str = ""
    corpora_dir: str = ""
    stopwords_path: str = ""
    data_dir: str = ".medaide-data"
    cassette_path: str = ""
    scripts_path: str = ""
    embedding_file: str = ""
    # stores: name -> corpus filename under corpora_dir
    stores: dict[str, str] = field(default_factory=dict)
    context_store: str = "guidelines"
    # thresholds
    intent_threshold: float = 0.10
    tau: float = 0.35
    tau_overrides: dict[str, float] = field(default_factory=dict)
    max_sweeps: int = 16
    top_k: int = 3
    overlap_threshold: float = 0.6
    ema_lambda: float = 0.0
    # chat backend
    base_url: str = ""
    model: str = "medaide-default"
    max_tokens: int = 512
    retries: int = 1
    mock_fallback: str = "echo"
    # embeddings
    query_backend: str = "hash"
    doc_backend: str = "hash"
    token_backend: str = "hash"
    dimension: int = 768
    embeddings_base_url: str = ""
    embeddings_model: str = ""

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.recognizer not in RECOGNIZERS:
            raise ConfigError(f"unknown recognizer {self.recognizer!r}")
        if not 2 <= self.stages <= 6:
            raise ConfigError(f"stages must be 2..6, got {self.stages}")
        if not 0.0 <= self.intent_threshold < 1.0:
            raise ConfigError(f"intent_threshold must be in [0, 1), got {self.intent_threshold}")
        if not -1.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [-1, 1], got {self.tau}")
        for store, value in self.tau_overrides.items():
            if not -1.0 <= value <= 1.0:
                raise ConfigError(f"tau.{store} must be in [-1, 1], got {value}")
        if self.max_sweeps < 1:
            raise ConfigError(f"max_sweeps must be >= 1, got {self.max_sweeps}")
        if self.top_k < 0:
            raise ConfigError(f"top_k must be >= 0, got {self.top_k}")
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise ConfigError(f"overlap_threshold must be in [0, 1], got {self.overlap_threshold}")
        if not 0.0 <= self.ema_lambda < 1.0:
            raise ConfigError(f"ema_lambda must be in [0, 1), got {self.ema_lambda}")
        if self.dimension <= 0:
            raise ConfigError(f"dimension must be positive, got {self.dimension}")
        for name in ("query_backend", "doc_backend", "token_backend"):
            if getattr(self, name) not in EMBEDDING_BACKENDS:
                raise ConfigError(f"unknown {name} {getattr(self, name)!r}")
        if "file" in (self.query_backend, self.doc_backend, self.token_backend) and not self.embedding_file:
            raise ConfigError("file embedding backend needs embedding_file")
        if self.profile in ("replay", "record") and not self.cassette_path:
            raise ConfigError(f"profile {self.profile!r} needs cassette_path")
        if self.profile == "live" and not self.base_url:
            raise ConfigError("live profile needs base_url")
        if not self.stores:
            raise ConfigError("at least one document store is required")
        if self.context_store not in self.stores:
            raise ConfigError(f"context_store {self.context_store!r} is not a configured store")
        required = {
            "grammar_path": self.grammar_path,
            "token_lexicon_path": self.token_lexicon_path,
            "element_lexicon_path": self.element_lexicon_path,
            "rules_path": self.rules_path,
            "taxonomy_path": self.taxonomy_path,
            "exemplars_path": self.exemplars_path,
            "templates_dir": self.templates_dir,
            "plans_dir": self.plans_dir,
            "corpora_dir": self.corpora_dir,
            "stopwords_path": self.stopwords_path,
        }
        for name, value in required.items():
            if not value:
                raise ConfigError(f"missing required path: {name}")
            if not Path(value).exists():
                raise ConfigError(f"{name} does not exist: {value}")
        for store, filename in self.stores.items():
            if not (Path(self.corpora_dir) / filename).exists():
                raise ConfigError(f"store {store!r}: no corpus file {filename!r} in {self.corpora_dir}")

    def tau_for(self, store: str) -> float:
        return self.tau_overrides.get(store, self.tau)

    def fingerprint(self, extra: dict | None = None) -> str:
        """Short digest of every knob that changes engine behaviour.

        `extra` folds in run-level switches that live outside the config
        (regularization and decision-analysis toggles), so two runs compare
        equal only when their whole recipe does.
        """
        return stable_hash(
            {
                "extra": extra or {},
                "profile": self.profile,
                "stages": self.stages,
                "seed": self.seed,
                "recognizer": self.recognizer,
                "intent_threshold": self.intent_threshold,
                "tau": self.tau,
                "tau_overrides": self.tau_overrides,
                "max_sweeps": self.max_sweeps,
                "top_k": self.top_k,
                "overlap_threshold": self.overlap_threshold,
                "ema_lambda": self.ema_lambda,
                "model": self.model,
                "dimension": self.dimension,
                "query_backend": self.query_backend,
                "doc_backend": self.doc_backend,
                "token_backend": self.token_backend,
                "stores": self.stores,
                "context_store": self.context_store,
            }
        )[:12]


@dataclass(frozen=True)
class RunFlags:
    """Per-run overrides; None keeps the configured value."""

    stages: int | None = None
    threshold: float | None = None
    tau: float | None = None
    seed: int | None = None
    recognizer: str | None = None
    no_rie: bool = False
    no_decision_analysis: bool = False
    explain: bool = False

    def as_dict(self) -> dict:
        return {
            "stages": self.stages,
            "threshold": self.threshold,
            "tau": self.tau,
            "seed": self.seed,
            "recognizer": self.recognizer,
            "no_rie": self.no_rie,
            "no_decision_analysis": self.no_decision_analysis,
        }


def run_fingerprint(config: EngineConfig, flags: RunFlags) -> str:
    """Fingerprint of the effective configuration for one run."""
    effective = apply_flags(config, flags)
    return effective.fingerprint(
        extra={
            "no_rie": flags.no_rie,
            "no_decision_analysis": flags.no_decision_analysis,
        }
    )


def apply_flags(config: EngineConfig, flags: RunFlags) -> EngineConfig:
    updates: dict = {}
    if flags.stages is not None:
        updates["stages"] = flags.stages
    if flags.threshold is not None:
        updates["intent_threshold"] = flags.threshold
    if flags.tau is not None:
        updates["tau"] = flags.tau
    if flags.seed is not None:
        updates["seed"] = flags.seed
    if flags.recognizer is not None:
        updates["recognizer"] = flags.recognizer
    if not updates:
        return config
    merged = replace(config, **updates)
    merged.validate()
    return merged


_PATH_KEYS = {
    "grammar": "grammar_path",
    "token_lexicon": "token_lexicon_path",
    "element_lexicon": "element_lexicon_path",
    "rules": "rules_path",
    "taxonomy": "taxonomy_path",
    "exemplars": "exemplars_path",
    "templates_dir": "templates_dir",
    "plans_dir": "plans_dir",
    "corpora_dir": "corpora_dir",
    "stopwords": "stopwords_path",
    "data_dir": "data_dir",
    "cassette": "cassette_path",
    "scripts": "scripts_path",
    "embedding_file": "embedding_file",
}


def load_config(path: str | Path) -> EngineConfig:
    """Read an INI config; relative paths resolve against the file's directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: bad INI: {exc}") from exc
    base = path.parent

    def resolve(value: str) -> str:
        if not value:
            return ""
        candidate = Path(value)
        return str(candidate if candidate.is_absolute() else (base / candidate).resolve())

    kwargs: dict = {}
    if parser.has_section("engine"):
        section = parser["engine"]
        kwargs["profile"] = section.get("profile", "mock")
        kwargs["stages"] = _parse_int(section, "stages", 4)
        kwargs["seed"] = _parse_int(section, "seed", 0)
        kwargs["recognizer"] = section.get("recognizer", "prototype")
    if parser.has_section("paths"):
        for key, value in parser["paths"].items():
            if key not in _PATH_KEYS:
                raise ConfigError(f"{path}: unknown path key {key!r}")
            kwargs[_PATH_KEYS[key]] = resolve(value)
    if parser.has_section("stores"):
        kwargs["stores"] = dict(parser["stores"].items())
    if parser.has_section("thresholds"):
        section = parser["thresholds"]
        overrides: dict[str, float] = {}
        for key in section:
            if key.startswith("tau."):
                overrides[key[len("tau.") :]] = _parse_float(section, key, 0.0)
        kwargs["tau_overrides"] = overrides
        kwargs["intent_threshold"] = _parse_float(section, "intent_threshold", 0.10)
        kwargs["tau"] = _parse_float(section, "tau", 0.35)
        kwargs["max_sweeps"] = _parse_int(section, "max_sweeps", 16)
        kwargs["top_k"] = _parse_int(section, "top_k", 3)
        kwargs["overlap_threshold"] = _parse_float(section, "overlap_threshold", 0.6)
        kwargs["ema_lambda"] = _parse_float(section, "ema_lambda", 0.0)
        kwargs["context_store"] = section.get("context_store", "guidelines")
    if parser.has_section("backend"):
        section = parser["backend"]
        kwargs["base_url"] = section.get("base_url", "")
        kwargs["model"] = section.get("model", "medaide-default")
        kwargs["max_tokens"] = _parse_int(section, "max_tokens", 512)
        kwargs["retries"] = _parse_int(section, "retries", 1)
        kwargs["mock_fallback"] = section.get("fallback", "echo")
    if parser.has_section("embeddings"):
        section = parser["embeddings"]
        kwargs["query_backend"] = section.get("query_backend", "hash")
        kwargs["doc_backend"] = section.get("doc_backend", "hash")
        kwargs["token_backend"] = section.get("token_backend", "hash")
        kwargs["dimension"] = _parse_int(section, "dimension", 768)
        kwargs["embeddings_base_url"] = section.get("base_url", "")
        kwargs["embeddings_model"] = section.get("model", "")
    config = EngineConfig(**kwargs)
    config.validate()
    return config


def _parse_int(section, key: str, default: int) -> int:
    try:
        return section.getint(key, default)
    except ValueError as exc:
        raise ConfigError(f"{key} must be an integer: {exc}") from exc


def _parse_float(section, key: str, default: float) -> float:
    try:
        return section.getfloat(key, default)
    except ValueError as exc:
        raise ConfigError(f"{key} must be a number: {exc}") from exc
