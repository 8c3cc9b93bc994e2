"""Pipeline configuration: YAML in, validated frozen dataclass out.

Keys may be written flat (``cnn_threshold: 0.6``) or grouped under one of
the section headings used by :func:`dump_config` (``filter: {cnn_threshold: 0.6}``).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Optional, Tuple

import yaml

from .errors import ConfigError

SCHEMA_VERSION = 1

DEFAULT_KEYWORDS = ("electronically filed", "this document was delivered electronically")

SECTIONS = {
    "run": ("source", "workdir", "seed", "workers"),
    "ingest": ("dpi", "ocr_engine", "ocr_keywords"),
    "extract": ("binarization", "adaptive_block", "edge_margin", "line_min_length",
                "line_min_aspect", "merge_dist", "density_min", "density_max",
                "aspect_min", "aspect_max", "area_min", "area_max"),
    "filter": ("cnn_threshold", "filter_checkpoint"),
    "clean": ("cleaner_checkpoint", "lambda_cyc", "lambda_pair"),
    "embed": ("encoder_checkpoint", "neg_ratio"),
    "cluster": ("threshold_t",),
    "store": ("compress_index",),
}

ALIASES = {"t": "threshold_t", "workdir_root": "workdir"}


@dataclass(frozen=True)
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    source: Optional[str] = None
    workdir: str = "work"
    seed: int = 0
    workers: int = 1
    dpi: int = 200
    ocr_engine: str = "tesseract"
    ocr_keywords: Tuple[str, ...] = DEFAULT_KEYWORDS
    binarization: str = "otsu"
    adaptive_block: int = 51
    edge_margin: float = 0.01
    line_min_length: float = 0.30
    line_min_aspect: float = 20.0
    merge_dist: float = 0.015
    density_min: float = 0.02
    density_max: float = 0.4
    aspect_min: float = 0.5
    aspect_max: float = 12.0
    area_min: float = 0.001
    area_max: float = 0.08
    cnn_threshold: float = 0.5
    filter_checkpoint: Optional[str] = None
    cleaner_checkpoint: Optional[str] = None
    lambda_cyc: float = 10.0
    lambda_pair: float = 5.0
    encoder_checkpoint: Optional[str] = None
    neg_ratio: float = 1.0
    threshold_t: float = 0.5
    compress_index: bool = False

    def replace(self, **changes) -> "PipelineConfig":
        return _check(dataclasses.replace(self, **changes))


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(name, value):
    kind = _FIELD_TYPES[name]
    try:
        if kind == "Optional[str]":
            return None if value is None else str(value)
        if kind == "str":
            if value is None:
                raise TypeError
            return str(value)
        if kind == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == "Tuple[str, ...]":
            if isinstance(value, str) or value is None:
                raise TypeError
            return tuple(str(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"bad value {value!r}") from None
    raise AssertionError(kind)


def _check(cfg: PipelineConfig) -> PipelineConfig:
    def need(ok, name, why):
        if not ok:
            raise ConfigError(name, why)

    need(cfg.schema_version == SCHEMA_VERSION, "schema_version",
         f"unsupported version {cfg.schema_version}")
    need(cfg.workers >= 1, "workers", "must be >= 1")
    need(cfg.dpi > 0, "dpi", "must be positive")
    need(cfg.ocr_engine in ("tesseract", "none"), "ocr_engine", "one of tesseract, none")
    need(len(cfg.ocr_keywords) > 0 and all(k.strip() for k in cfg.ocr_keywords),
         "ocr_keywords", "must be a non-empty list of phrases")
    need(cfg.binarization in ("otsu", "adaptive"), "binarization", "one of otsu, adaptive")
    need(cfg.adaptive_block >= 3 and cfg.adaptive_block % 2 == 1, "adaptive_block",
         "must be an odd integer >= 3")
    need(0.0 <= cfg.edge_margin < 0.5, "edge_margin", "must lie in [0, 0.5)")
    need(0.0 < cfg.line_min_length <= 1.0, "line_min_length", "must lie in (0, 1]")
    need(cfg.line_min_aspect >= 1.0, "line_min_aspect", "must be >= 1")
    need(0.0 < cfg.merge_dist <= 1.0, "merge_dist", "must lie in (0, 1]")
    for lo, hi, top in (("density_min", "density_max", 1.0), ("aspect_min", "aspect_max", None),
                        ("area_min", "area_max", 1.0)):
        a, b = getattr(cfg, lo), getattr(cfg, hi)
        need(a >= 0.0, lo, "must be >= 0")
        need(top is None or b <= top, hi, f"must be <= {top}")
        need(a <= b, lo, f"must not exceed {hi}")
    need(0.0 <= cfg.cnn_threshold <= 1.0, "cnn_threshold", "must lie in [0, 1]")
    need(cfg.lambda_cyc >= 0.0, "lambda_cyc", "must be >= 0")
    need(cfg.lambda_pair >= 0.0, "lambda_pair", "must be >= 0")
    need(cfg.neg_ratio >= 0.0, "neg_ratio", "must be >= 0")
    need(0.0 <= cfg.threshold_t <= 2.0, "threshold_t", "must lie in [0, 2]")
    return cfg


def config_from_mapping(raw) -> PipelineConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    flat = {}

    def put(key, value):
        name = ALIASES.get(key, key)
        if name not in _FIELD_TYPES:
            raise ConfigError(str(key), "unknown setting")
        if name in flat:
            raise ConfigError(name, "given more than once")
        flat[name] = _coerce(name, value)

    for key, value in raw.items():
        if key in SECTIONS and isinstance(value, dict):
            for sub_key, sub_value in value.items():
                put(sub_key, sub_value)
        else:
            put(key, value)
    return _check(PipelineConfig(**flat))


def validate_config(text: str) -> PipelineConfig:
    """Parse YAML config text, fill defaults and range-check every field."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"unparseable config: {exc}") from None
    return config_from_mapping(raw)


def load_config(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return validate_config(fh.read())


def config_to_mapping(cfg: PipelineConfig) -> dict:
    out = {"schema_version": cfg.schema_version}
    for section, names in SECTIONS.items():
        out[section] = {
            n: list(v) if isinstance(v := getattr(cfg, n), tuple) else v for n in names
        }
    return out


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(config_to_mapping(cfg), sort_keys=False)
