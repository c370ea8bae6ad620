"""Pipeline configuration: one TOML file, one section per stage, every key defaulted."""
from __future__ import annotations

import copy
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .context import ContextVocabulary
from .llm import EndpointConfig, NoiseConfig
from .render import RenderConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted name of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _endpoint_defaults() -> dict:
    d = {f.name: getattr(EndpointConfig(), f.name) for f in fields(EndpointConfig) if f.name != "extra"}
    return {k: v for k, v in d.items() if v is not None}


DEFAULTS: dict[str, dict[str, Any]] = {
    "paths": {"dataset_dir": "dataset", "output_dir": "out", "template": "", "cache_dir": ""},
    "render": RenderConfig().to_dict() | {"crop_meters_by_type": {"VEHICLE": 120.0, "PEDESTRIAN": 80.0, "CYCLIST": 60.0}},
    "vocab": {k: v for k, v in ContextVocabulary().to_dict().items() if k.endswith("_words")},
    "llm": {"mode": "mock"} | _endpoint_defaults(),
    "mock": {"noise": 0.0, "seed": 7},
    "annotate": {"scope": "all"},
    "propagation": {"fraction": 0.007, "seed": 7, "stratified": False, "exact": False, "feature_mask": []},
    "metrics": {"miss_threshold": 2.0},
}


# keys whose default is "unset", which TOML cannot spell
OPTIONAL_KEYS = {"llm.requests_per_second", "llm.flat_cost_per_call", "llm.budget_cap"}


@dataclass
class PipelineConfig:
    dataset_dir: Path
    output_dir: Path
    template: Path | None
    cache_dir: Path
    render: RenderConfig
    vocab: ContextVocabulary
    endpoint: EndpointConfig
    mode: str
    noise: NoiseConfig
    annotate_scope: str
    fraction: float
    split_seed: int
    stratified: bool
    exact: bool
    feature_mask: tuple[str, ...]
    miss_threshold: float
    raw: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return copy.deepcopy(self.raw[name])


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{prefix}{k}"
        if k not in out:
            if key not in OPTIONAL_KEYS:
                raise ConfigError(key, "unknown key")
            out[k] = v
            continue
        if isinstance(out[k], dict) and k != "crop_meters_by_type":
            if not isinstance(v, dict):
                raise ConfigError(key, "expected a table")
            out[k] = _merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the TOML file, then ``overrides`` (same nested shape)."""
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("config", f"file not found: {p}")
        with p.open("rb") as fh:
            try:
                raw = _merge(raw, tomllib.load(fh))
            except tomllib.TOMLDecodeError as e:
                raise ConfigError("config", f"invalid TOML: {e}") from None
    if overrides:
        raw = _merge(raw, overrides)
    return raw


def validate(raw: dict, base_dir: str | os.PathLike = ".") -> PipelineConfig:
    """Type-check and resolve a merged config. Raises ConfigError naming the bad key."""
    base = Path(base_dir)

    def path(key: str) -> Path:
        v = raw["paths"][key]
        p = Path(v)
        return p if p.is_absolute() else base / p

    dataset = path("dataset_dir")
    if not dataset.is_dir():
        raise ConfigError("paths.dataset_dir", f"directory not found: {dataset}")
    template = None
    if raw["paths"]["template"]:
        template = path("template")
        if not template.exists():
            raise ConfigError("paths.template", f"file not found: {template}")
    out = path("output_dir")
    cache = path("cache_dir") if raw["paths"]["cache_dir"] else out / "cache"

    try:
        render = RenderConfig.from_dict(raw["render"])
    except (TypeError, ValueError) as e:
        raise ConfigError("render", str(e)) from None
    try:
        vocab = ContextVocabulary.from_dict(raw["vocab"])
    except (TypeError, ValueError) as e:
        raise ConfigError("vocab", str(e)) from None
    llm = dict(raw["llm"])
    mode = llm.pop("mode")
    if mode not in ("mock", "live"):
        raise ConfigError("llm.mode", f"expected 'mock' or 'live', got {mode!r}")
    try:
        endpoint = EndpointConfig(**llm)
    except TypeError as e:
        raise ConfigError("llm", str(e)) from None
    for key in ("max_retries", "concurrency"):
        if int(getattr(endpoint, key)) < 1:
            raise ConfigError(f"llm.{key}", "must be >= 1")
    noise = float(raw["mock"]["noise"])
    if not 0.0 <= noise <= 1.0:
        raise ConfigError("mock.noise", "must be in [0, 1]")
    scope = raw["annotate"]["scope"]
    if scope not in ("all", "split"):
        raise ConfigError("annotate.scope", f"expected 'all' or 'split', got {scope!r}")
    prop = raw["propagation"]
    fraction = float(prop["fraction"])
    if not 0.0 < fraction < 0.5:
        raise ConfigError("propagation.fraction", f"must be in (0, 0.5), got {fraction}")
    from .propagation import FEATURE_BLOCKS

    mask = tuple(prop["feature_mask"])
    for m in mask:
        if m not in FEATURE_BLOCKS:
            raise ConfigError("propagation.feature_mask", f"unknown block {m!r}")
    thr = float(raw["metrics"]["miss_threshold"])
    if thr <= 0:
        raise ConfigError("metrics.miss_threshold", "must be > 0")
    return PipelineConfig(
        dataset_dir=dataset,
        output_dir=out,
        template=template,
        cache_dir=cache,
        render=render,
        vocab=vocab,
        endpoint=endpoint,
        mode=mode,
        noise=NoiseConfig(noise=noise, seed=int(raw["mock"]["seed"]), render=render),
        annotate_scope=scope,
        fraction=fraction,
        split_seed=int(prop["seed"]),
        stratified=bool(prop["stratified"]),
        exact=bool(prop["exact"]),
        feature_mask=mask,
        miss_threshold=thr,
        raw=copy.deepcopy(raw),
    )


def dumps(raw: dict) -> str:
    return tomli_w.dumps(raw)


def defaults_toml() -> str:
    return dumps(DEFAULTS)
