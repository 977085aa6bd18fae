"""Run configuration: a TOML file with one table per stage.

Unknown tables or keys are errors rather than silently ignored, so typos
surface before any work is done. Relative paths resolve against the
directory of the config file.

Example::

    [paths]
    out = "out"          # textual/audio/train/test default to out/data/*

    [synth]
    n_users = 2000

    [quantize]
    method = "PSRQ"
    k = 64

    [model]
    variant = "mcca"     # or ablation = "w/o MSC"

    [train]
    lr = 5e-4

    [eval]
    cold_threshold = 30
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .experiment import ModelSettings
from .mcca import ABLATIONS, VARIANTS
from .metrics import REPORT_ROWS
from .pipeline import STREAMS, QuantizeConfig, config_hash
from .quantizers import METHODS
from .synth import SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class Paths:
    out: str = "out"
    textual: str | None = None
    audio: str | None = None
    train: str | None = None
    test: str | None = None

    @property
    def data_dir(self) -> Path:
        return Path(self.out) / "data"

    def input(self, name: str) -> Path:
        given = getattr(self, name)
        if given is not None:
            return Path(given)
        suffix = ".semb" if name in ("textual", "audio") else ".tsv"
        return self.data_dir / f"{name}{suffix}"

    @property
    def uses_synth(self) -> bool:
        return self.textual is None


@dataclass(frozen=True)
class QuantizeSection:
    method: str = "PSRQ"
    k: int = 64
    l: int = 3
    M: int = 4
    seed: int = 0
    normalize: bool = True
    max_iters: int = 100
    tol: float = 1e-6
    streams: tuple[str, ...] = STREAMS

    def quantize_config(self) -> QuantizeConfig:
        return QuantizeConfig(self.method, self.k, self.l, self.M, self.seed,
                              self.normalize, self.max_iters, self.tol)


@dataclass(frozen=True)
class ModelSection:
    dim: int = 64
    max_len: int = 20
    hidden: int = 32
    mlp: tuple[int, ...] = (128, 64)
    variant: str = "mcca"
    ablation: str = "none"
    seed: int = 0

    @property
    def settings(self) -> ModelSettings:
        return ModelSettings(self.dim, self.max_len, self.hidden, self.mlp)

    @property
    def resolved_variant(self) -> str:
        if self.ablation != "none":
            return ABLATIONS[self.ablation]
        return self.variant


@dataclass(frozen=True)
class EvalSection:
    cold_threshold: int = 30
    n_perm: int = 999
    perm_seed: int = 0


@dataclass(frozen=True)
class ReportSection:
    rows: tuple[str, ...] = REPORT_ROWS


@dataclass(frozen=True)
class GradcheckSection:
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = ("mcca", "wo_msc", "wo_mjc")
    delta: float = 1e-3
    tolerance: float = 1e-4


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = Paths()
    synth: SynthConfig = SynthConfig()
    quantize: QuantizeSection = QuantizeSection()
    model: ModelSection = ModelSection()
    train: TrainConfig = TrainConfig()
    eval: EvalSection = EvalSection()
    report: ReportSection = ReportSection()
    gradcheck: GradcheckSection = GradcheckSection()
    source: str | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        d = {f.name: asdict(getattr(self, f.name)) for f in fields(self) if f.name != "source"}
        d["paths"] = {k: v for k, v in d["paths"].items() if v is not None}
        return d

    @property
    def hash(self) -> str:
        """Hash of the effective settings; key order in the file is irrelevant."""
        d = self.to_dict()
        d.pop("paths")
        return config_hash(d)

    def stage_hash(self, *sections: str) -> str:
        d = self.to_dict()
        return config_hash({s: d[s] for s in sections})

    def with_out(self, out: str | os.PathLike) -> "RunConfig":
        return replace(self, paths=replace(self.paths, out=str(out)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


_SECTION_TYPES = {
    "paths": Paths, "synth": SynthConfig, "quantize": QuantizeSection, "model": ModelSection,
    "train": TrainConfig, "eval": EvalSection, "report": ReportSection,
    "gradcheck": GradcheckSection,
}


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(where, f"{where} must be a boolean")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(where, f"{where} must be a list")
        return tuple(value)
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if (default is None or isinstance(default, str)) and isinstance(value, str):
        return value
    raise ConfigError(where, f"{where} has the wrong type ({type(value).__name__})")


def _check(cfg: RunConfig) -> None:
    q, m = cfg.quantize, cfg.model
    if q.method not in METHODS:
        raise ConfigError("quantize.method", f"quantize.method must be one of {list(METHODS)}")
    if q.k < 1 or q.l < 1 or q.M < 1:
        raise ConfigError("quantize", "quantize.k, l and M must be positive")
    bad = [s for s in q.streams if s not in STREAMS]
    if bad or not q.streams:
        raise ConfigError("quantize.streams", f"quantize.streams must be a non-empty subset of {list(STREAMS)}")
    if m.variant not in VARIANTS:
        raise ConfigError("model.variant", f"model.variant must be one of {list(VARIANTS)}")
    if m.ablation not in ABLATIONS:
        raise ConfigError("model.ablation", f"model.ablation must be one of {list(ABLATIONS)}")
    if m.dim < 1 or m.max_len < 1 or m.hidden < 1 or any(h < 1 for h in m.mlp):
        raise ConfigError("model", "model sizes must be positive")
    t = cfg.train
    if t.lr <= 0 or t.batch_size < 1 or t.epochs < 1:
        raise ConfigError("train", "train.lr, batch_size and epochs must be positive")
    if cfg.eval.cold_threshold < 0:
        raise ConfigError("eval.cold_threshold", "eval.cold_threshold must be >= 0")
    unknown_rows = [r for r in cfg.report.rows if r not in REPORT_ROWS]
    if unknown_rows:
        raise ConfigError("report.rows", f"unknown report rows {unknown_rows}")
    bad_v = [v for v in cfg.gradcheck.variants if v not in VARIANTS]
    if bad_v:
        raise ConfigError("gradcheck.variants", f"unknown gradcheck variants {bad_v}")


def from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    sections = {}
    for name, body in raw.items():
        if name not in _SECTION_TYPES:
            raise ConfigError(name, f"unknown config section [{name}]")
        if not isinstance(body, dict):
            raise ConfigError(name, f"[{name}] must be a table")
        cls = _SECTION_TYPES[name]
        defaults = cls()
        known = {f.name for f in fields(cls)}
        values = {}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"{name}.{key}", f"unknown config key {name}.{key}")
            values[key] = _coerce(name, key, value, getattr(defaults, key))
        if name == "paths" and base_dir is not None:
            values = {k: str(base_dir / v) for k, v in values.items()}
            values.setdefault("out", str(base_dir / "out"))
        try:
            sections[name] = replace(defaults, **values)
        except (TypeError, ValueError) as e:
            raise ConfigError(name, f"[{name}]: {e}") from e
    if "paths" not in sections and base_dir is not None:
        sections["paths"] = Paths(out=str(base_dir / "out"))
    cfg = RunConfig(**sections)
    _check(cfg)
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Parse a TOML run config; ``None`` gives all defaults."""
    if path is None:
        return from_dict({})
    p = Path(path)
    try:
        raw = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("", f"config does not parse: {e}") from e
    cfg = from_dict(raw, p.resolve().parent)
    return replace(cfg, source=str(p))
