"""Sectioned INI run configuration.

Every key is checked against a schema before anything runs, unknown keys
are rejected, and the effective configuration can be dumped back out in
the same format so a run can be replayed from its own output.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import dataclass, field, fields, replace

from .ehr import GeneratorSpec
from .errors import ConfigError
from .meta import MetaConfig
from .experiments import UQSettings
from .metrics import DEFAULT_ETA
from .uncertainty import UQ_METHODS

SEED_ENV = "METADRUG_SEED"


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _percentiles(text: str) -> tuple:
    vals = tuple(float(p) for p in text.replace(" ", "").split(",") if p)
    if not vals:
        raise ValueError("empty percentile list")
    for p in vals:
        if not 0.0 < p <= 100.0:
            raise ValueError(f"percentile {p} outside (0, 100]")
    return vals


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(f"{v:g}" for v in value)
    return str(value)


def _parser_for(default):
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


@dataclass
class DataSection:
    path: str = ""
    seed: int = 0
    train_frac: float = 0.8


@dataclass
class ModelSection:
    d: int = 256
    heads: int = 1


@dataclass
class EvalSection:
    eta: float = DEFAULT_ETA
    percentiles: tuple = (10.0, 20.0, 30.0, 40.0, 50.0)


@dataclass
class OutputSection:
    dir: str = ""


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    model: ModelSection = field(default_factory=ModelSection)
    meta: MetaConfig = field(default_factory=MetaConfig)
    uq: UQSettings = field(default_factory=UQSettings)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def seed(self) -> int:
        return self.data.seed

    def meta_config(self) -> MetaConfig:
        """MetaConfig whose seed follows the data seed."""
        return replace(self.meta, seed=self.data.seed)

    def validate(self):
        if not 0.0 < self.data.train_frac < 1.0:
            raise ConfigError("data.train_frac must lie strictly between 0 and 1")
        if self.model.d < 1:
            raise ConfigError("model.d must be >= 1")
        if self.model.heads != 1:
            raise ConfigError("only single-head attention is supported (model.heads = 1)")
        self.generator.validate()
        if self.uq.method not in UQ_METHODS:
            raise ConfigError(f"uq.method must be one of {', '.join(UQ_METHODS)}")
        if not 0.0 < self.uq.beta < 100.0:
            raise ConfigError("uq.beta must lie in (0, 100)")
        if self.uq.method == "dropout" and self.uq.passes < 2:
            raise ConfigError("uq.passes must be >= 2 for dropout scoring")
        if not 0.0 <= self.uq.dropout_rate < 1.0:
            raise ConfigError("uq.dropout_rate must lie in [0, 1)")
        if self.uq.method == "ensemble" and self.uq.ensemble_size < 2:
            raise ConfigError("uq.ensemble_size must be >= 2")
        if self.uq.epochs < 0:
            raise ConfigError("uq.epochs must be >= 0")
        if not 0.0 <= self.eval.eta <= 1.0:
            raise ConfigError("eval.eta must lie in [0, 1]")
        return self

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            section = getattr(self, name)
            cp[name] = {k: _fmt(getattr(section, k)) for k in _keys(name, section)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]


SECTIONS = ("data", "generator", "model", "meta", "uq", "eval", "output")

_SPECIAL = {
    ("meta", "outer_lr"): _optional_float,
    ("eval", "percentiles"): _percentiles,
}


def _keys(section_name, section_obj):
    names = [f.name for f in fields(section_obj)]
    # one seed per run, kept in [data]
    return [n for n in names if (section_name, n) != ("meta", "seed")]


def _apply(section_obj, section_name, items):
    known = _keys(section_name, section_obj)
    values = {}
    for key, raw in items:
        if (section_name, key) == ("meta", "seed"):
            raise ConfigError("meta.seed is not accepted; set the seed under [data]")
        if key not in known:
            raise ConfigError(f"unknown key {section_name}.{key}")
        parse = _SPECIAL.get((section_name, key)) or _parser_for(getattr(section_obj, key))
        try:
            values[key] = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"{section_name}.{key}: {exc}") from None
    try:
        return replace(section_obj, **values)
    except ValueError as exc:
        raise ConfigError(f"[{section_name}] {exc}") from None


def parse_config(text: str, env=None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        setattr(cfg, name, _apply(getattr(cfg, name), name, cp.items(name)))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.data = replace(cfg.data, seed=int(env[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return cfg.validate()


def load_config(path, env=None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, env)
