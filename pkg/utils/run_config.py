"""Run configuration: a flat key=value file with dotted section prefixes.

Loaded with python-dotenv so the syntax matches ``.env`` files; e.g.::

    seed=7
    search.cycles=1000
    search.rates=0.99,0.999
    sampler.qa.kind=sqa
    sampler.qa.reads=10000
"""
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values

from utils.errors import ConfigError

SAMPLER_KINDS = ("sa", "sqa", "ingest", "exhaustive")
MODEL_SOURCES = ("rbm", "file")


@dataclass(frozen=True)
class ModelSection:
    source: str = "rbm"
    path: str = ""
    epoch: int = 0


@dataclass(frozen=True)
class RbmSection:
    dataset: str = ""
    n_visible: int = 6
    n_hidden: int = 6
    cd_k: int = 1
    learning_rate: float = 0.05
    batch_size: int = 10
    epochs: Tuple[int, ...] = (1, 5)
    init_scale: float = 0.01
    synthetic_prototypes: int = 3
    synthetic_per_prototype: int = 20
    synthetic_flip: float = 0.1


@dataclass(frozen=True)
class SearchSection:
    name: str = "sa"
    rates: Tuple[float, ...] = (0.99, 0.999)
    t_start: float = 0.0
    cycles: int = 100
    cut_points: Tuple[int, ...] = ()
    max_sweeps: int = 0
    max_seconds: float = 0.0
    checkpoint_every: int = 16


@dataclass(frozen=True)
class WarmingSection:
    chains: int = 200
    jump_cap: int = 1_000_000
    ladder_factor: float = 1.5
    t0_fraction: float = 0.1
    max_rungs: int = 40
    threshold_multiplier: float = 1.0
    dos_fraction: float = 0.1
    max_valleys: int = 0
    flat_link_limit: int = 10_000


@dataclass(frozen=True)
class CompareSection:
    reference: str = ""
    comparator: str = ""
    bins: int = 30
    buckets: Tuple[str, ...] = ("n_low", "e_act", "width_w")
    bucket_count: int = 4
    parameters: Tuple[str, ...] = ("e_lm", "e_act", "dos_bottom", "width_w", "n_lv")


@dataclass(frozen=True)
class SamplerSpec:
    name: str
    kind: str = "sqa"
    reads: int = 10_000
    path: str = ""
    rate: float = 0.99
    t_start: float = 0.0
    sweeps: int = 1000
    trotter_slices: int = 32
    base_temperature: float = 0.0
    a_start: float = 10.0
    a_end: float = 0.01
    b_start: float = 0.01
    b_end: float = 10.0
    anneal_table: str = ""
    global_moves: bool = True
    read_slice: int = 0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    out_dir: str = "runs"
    model: ModelSection = field(default_factory=ModelSection)
    rbm: RbmSection = field(default_factory=RbmSection)
    search: SearchSection = field(default_factory=SearchSection)
    warming: WarmingSection = field(default_factory=WarmingSection)
    compare: CompareSection = field(default_factory=CompareSection)
    samplers: Tuple[SamplerSpec, ...] = ()

    def __post_init__(self):
        validate(self)

    def sampler(self, name: str) -> SamplerSpec:
        for spec in self.samplers:
            if spec.name == name:
                return spec
        raise ConfigError(f"no sampler named {name!r} in the configuration")

    def with_overrides(
        self, seed: Optional[int] = None, workers: Optional[int] = None, out_dir: Optional[str] = None
    ) -> "RunConfig":
        changes = {k: v for k, v in (("seed", seed), ("workers", workers), ("out_dir", out_dir)) if v is not None}
        return dataclasses.replace(self, **changes) if changes else self

    def to_text(self) -> str:
        lines = [f"seed={self.seed}", f"workers={self.workers}", f"out_dir={self.out_dir}"]
        for section in _SECTIONS:
            lines += [f"{section}.{k}={v}" for k, v in _fields_text(getattr(self, section))]
        for spec in sorted(self.samplers, key=lambda s: s.name):
            lines += [f"sampler.{spec.name}.{k}={v}" for k, v in _fields_text(spec) if k != "name"]
        return "\n".join(lines) + "\n"


_SECTIONS = ("model", "rbm", "search", "warming", "compare")
_SECTION_TYPES = {
    "model": ModelSection,
    "rbm": RbmSection,
    "search": SearchSection,
    "warming": WarmingSection,
    "compare": CompareSection,
}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _fields_text(section) -> typing.List[Tuple[str, str]]:
    return [(f.name, _format_value(getattr(section, f.name))) for f in dataclasses.fields(section)]


def _coerce(raw: Optional[str], hint, key: str):
    raw = "" if raw is None else raw.strip()
    try:
        if hint is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected true/false, got {raw!r}")
            return lowered in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if typing.get_origin(hint) is tuple:
            item = typing.get_args(hint)[0]
            return tuple(_coerce(part, item, key) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"invalid value for {key}: {exc}") from exc
    raise ConfigError(f"unsupported type for {key}")


def _build_section(cls, values: Mapping[str, Optional[str]], prefix: str, extra: Optional[dict] = None):
    hints = typing.get_type_hints(cls)
    kwargs = dict(extra or {})
    for name, raw in values.items():
        if name not in hints or name in kwargs:
            raise ConfigError(f"unknown configuration key {prefix}{name}")
        kwargs[name] = _coerce(raw, hints[name], prefix + name)
    return cls(**kwargs)


def from_mapping(values: Mapping[str, Optional[str]]) -> RunConfig:
    top: Dict[str, Optional[str]] = {}
    sections: Dict[str, Dict[str, Optional[str]]] = {name: {} for name in _SECTIONS}
    samplers: Dict[str, Dict[str, Optional[str]]] = {}
    for key, raw in values.items():
        parts = key.split(".")
        if len(parts) == 1:
            top[key] = raw
        elif len(parts) == 2 and parts[0] in sections:
            sections[parts[0]][parts[1]] = raw
        elif len(parts) == 3 and parts[0] == "sampler" and parts[1]:
            samplers.setdefault(parts[1], {})[parts[2]] = raw
        else:
            raise ConfigError(f"unknown configuration key {key}")

    hints = typing.get_type_hints(RunConfig)
    kwargs = {}
    for key, raw in top.items():
        if key not in ("seed", "workers", "out_dir"):
            raise ConfigError(f"unknown configuration key {key}")
        kwargs[key] = _coerce(raw, hints[key], key)
    for name, entries in sections.items():
        kwargs[name] = _build_section(_SECTION_TYPES[name], entries, f"{name}.")
    kwargs["samplers"] = tuple(
        _build_section(SamplerSpec, entries, f"sampler.{name}.", {"name": name})
        for name, entries in sorted(samplers.items())
    )
    return RunConfig(**kwargs)


def parse_config(text: str) -> RunConfig:
    return from_mapping(dotenv_values(stream=io.StringIO(text), interpolate=False))


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Defaults, overridden by the file at ``path`` when one is given."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return from_mapping(dotenv_values(path, interpolate=False))


def validate(cfg: RunConfig) -> None:
    def positive(key: str, value) -> None:
        if value <= 0:
            raise ConfigError(f"{key} must be positive, got {value}")

    if not 0 <= cfg.seed < 2 ** 64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {cfg.seed}")
    positive("workers", cfg.workers)
    if cfg.model.source not in MODEL_SOURCES:
        raise ConfigError(f"model.source must be one of {', '.join(MODEL_SOURCES)}, got {cfg.model.source!r}")
    if cfg.model.source == "file" and not cfg.model.path:
        raise ConfigError("model.path is required when model.source=file")
    for key in ("n_visible", "n_hidden", "cd_k", "batch_size", "synthetic_prototypes", "synthetic_per_prototype"):
        positive(f"rbm.{key}", getattr(cfg.rbm, key))
    positive("rbm.learning_rate", cfg.rbm.learning_rate)
    if not cfg.rbm.epochs or min(cfg.rbm.epochs) < 1:
        raise ConfigError("rbm.epochs needs at least one epoch >= 1")
    if not cfg.search.rates or any(not 0 < r < 1 for r in cfg.search.rates):
        raise ConfigError("search.rates must lie in (0, 1)")
    for key in ("cycles", "checkpoint_every"):
        positive(f"search.{key}", getattr(cfg.search, key))
    if any(c < 1 for c in cfg.search.cut_points):
        raise ConfigError("search.cut_points must be >= 1")
    for key in ("chains", "jump_cap", "max_rungs"):
        positive(f"warming.{key}", getattr(cfg.warming, key))
    positive("compare.bins", cfg.compare.bins)
    positive("compare.bucket_count", cfg.compare.bucket_count)
    names = {spec.name for spec in cfg.samplers}
    if len(names) != len(cfg.samplers):
        raise ConfigError("sampler names must be unique")
    if cfg.search.name in names:
        raise ConfigError(f"sampler name {cfg.search.name!r} clashes with search.name")
    for spec in cfg.samplers:
        prefix = f"sampler.{spec.name}."
        if any(c in spec.name for c in ";,=:| \t#"):
            raise ConfigError(f"invalid sampler name {spec.name!r}")
        if spec.kind not in SAMPLER_KINDS:
            raise ConfigError(f"{prefix}kind must be one of {', '.join(SAMPLER_KINDS)}, got {spec.kind!r}")
        positive(prefix + "reads", spec.reads)
        positive(prefix + "sweeps", spec.sweeps)
        if spec.kind == "ingest" and not spec.path:
            raise ConfigError(f"{prefix}path is required for kind=ingest")
        if spec.kind == "sqa" and spec.trotter_slices < 2:
            raise ConfigError(f"{prefix}trotter_slices must be >= 2")
        if spec.kind == "sa" and not 0 < spec.rate < 1:
            raise ConfigError(f"{prefix}rate must lie in (0, 1)")
