"""Run configuration: defaults < config file < environment < command-line flags.

The config file is YAML with the keys of :class:`RunConfig`. Environment
overrides use ``RAVE_<KEY>`` (for example ``RAVE_ALPHA=0.5``). API keys are
never read from the file; see :mod:`rave.gateway` for their variable names.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from rave.gateway import EMBED_KEY_ENV, LLM_KEY_ENV, SEARCH_KEY_ENV, GatewayConfig, GatewayMode
from rave.model import Strategy
from rave.scoring import ScoringConfig

ENV_PREFIX = "RAVE_"
_SECRET_ENV = {LLM_KEY_ENV, EMBED_KEY_ENV, SEARCH_KEY_ENV}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # gateway
    mode: str = "REPLAY"
    model_id: str = "gpt-4o-2024-08-06"
    embed_model_id: str = "text-embedding-3-small"
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 500
    results_per_query: int = 5
    retries: int = 3
    cache_dir: str = "tests/fixtures/cache"
    llm_base_url: str = "https://api.openai.com/v1"
    embed_base_url: str = "https://api.openai.com/v1"
    search_url: str = "https://www.googleapis.com/customsearch/v1"
    search_engine_id: str = ""
    # scoring
    alpha: float = 0.6
    k: int = 3
    credibility_rules: Optional[str] = None
    fallback_claim_query: bool = False
    # run
    strategies: list[str] = field(default_factory=lambda: [s.value for s in Strategy])
    corpus: Optional[str] = None
    corpus_format: str = "canonical"
    output_dir: str = "runs/latest"
    seed: int = 13
    workers: int = 0
    # evaluation
    alpha_grid: list[float] = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    k_values: list[int] = field(default_factory=lambda: [1, 3, 5, 8, 10])
    bootstrap_resamples: int = 1000
    tie_break: str = "smaller"

    def validate(self) -> "RunConfig":
        self.mode = self.mode.upper()
        try:
            GatewayMode(self.mode)
        except ValueError:
            raise ConfigError(f"mode must be one of LIVE, RECORD, REPLAY, got {self.mode!r}") from None
        try:
            ScoringConfig(self.alpha, self.k)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 0.0 <= self.temperature <= 2.0:
            raise ConfigError("temperature must lie in [0, 2]")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError("top_p must lie in (0, 1]")
        for name in ("max_tokens", "results_per_query", "bootstrap_resamples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.retries < 0 or self.workers < 0:
            raise ConfigError("retries and workers must be >= 0")
        for s in self.strategies:
            if s not in Strategy.__members__:
                raise ConfigError(f"unknown strategy {s!r}")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        if any(not 0.0 <= a <= 1.0 for a in self.alpha_grid) or not self.alpha_grid:
            raise ConfigError("alpha_grid must be a non-empty list of values in [0, 1]")
        if any(k < 1 for k in self.k_values) or not self.k_values:
            raise ConfigError("k_values must be a non-empty list of integers >= 1")
        if self.tie_break not in ("smaller", "larger"):
            raise ConfigError("tie_break must be 'smaller' or 'larger'")
        if self.corpus_format not in ("canonical", "ct22-tsv", "policlaim"):
            raise ConfigError(f"unknown corpus_format {self.corpus_format!r}")
        return self

    @property
    def scoring(self) -> ScoringConfig:
        return ScoringConfig(self.alpha, self.k)

    @property
    def strategy_list(self) -> list[Strategy]:
        return [Strategy(s) for s in self.strategies]

    def gateway_config(self) -> GatewayConfig:
        return GatewayConfig(
            mode=GatewayMode(self.mode),
            model_id=self.model_id,
            embed_model_id=self.embed_model_id,
            temperature=self.temperature,
            top_p=self.top_p,
            max_tokens=self.max_tokens,
            results_per_query=self.results_per_query,
            retries=self.retries,
            cache_dir=self.cache_dir,
            llm_base_url=self.llm_base_url,
            embed_base_url=self.embed_base_url,
            search_url=self.search_url,
            search_engine_id=self.search_engine_id,
        )

    def snapshot(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    default = getattr(RunConfig(), name)
    kind = type(default) if default is not None else str
    if isinstance(value, str) and kind is not str:
        if kind is list:
            value = [v.strip() for v in value.split(",") if v.strip()]
        else:
            value = yaml.safe_load(value)
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is list:
            item = type(default[0]) if default else str
            return [item(v) for v in value]
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if kind is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if kind is str:
            return str(value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"config key {name!r}: cannot use {value!r} as {kind.__name__}")


def _apply(values: dict[str, Any], layer: Mapping[str, Any], source: str) -> None:
    for key, value in layer.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r} in {source}")
        if value is None:
            continue
        values[key] = _coerce(key, value)


def load_config(
    flags: Optional[Mapping[str, Any]] = None,
    env: Optional[Mapping[str, str]] = None,
    file: Optional[str | Path] = None,
) -> RunConfig:
    """Merge the configuration layers; unknown keys and out-of-range values raise ConfigError."""
    values: dict[str, Any] = {}
    if file is not None:
        data = yaml.safe_load(Path(file).read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{file}: expected a mapping of config keys")
        _apply(values, data, str(file))
    env = os.environ if env is None else env
    env_layer = {}
    for var, value in env.items():
        if not var.startswith(ENV_PREFIX) or var in _SECRET_ENV:
            continue
        env_layer[var[len(ENV_PREFIX):].lower()] = value
    _apply(values, env_layer, "environment")
    _apply(values, dict(flags or {}), "flags")
    return RunConfig(**values).validate()
