"""Experiment configuration: a sectioned key/value text file.

Unknown sections or keys are rejected.  `dumps` writes every resolved value, so
`loads(dumps(cfg)) == cfg`.
"""

from __future__ import annotations

import configparser
import inspect
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

KINDS = ("single-site", "pin-sweep", "strip", "cell", "barrier-check", "expansion", "linearized", "figure")


class ConfigError(ValueError):
    pass


@dataclass
class DefectSpec:
    profile: str = "canonical-bump"
    d: int = 2
    sigma: float = 0.2


@dataclass
class LatticeConfig:
    xi: tuple = (0, 1)


@dataclass
class Numerics:
    s: float = 0.0
    s_min: float = -2.0
    s_max: float = 2.0
    ds: float = 0.1
    R_values: tuple = (50.0,)
    direction: str = "adv"
    k_step: float = 0.02
    tolerance: float = 1e-6
    K: int = 64
    deltas: tuple = (0.2, 0.1, 0.05)
    sigmas: tuple = (0.02, 0.01, 0.005)
    strip_R: float = 40.0
    figure_R: float = 1e8
    patch_c: float = 0.25
    L: float = 48.0
    H: float = 48.0
    h: float = 0.0625
    linearized: bool = False


@dataclass
class BarrierSpec:
    kind: str = "point_source"
    params: dict = field(default_factory=lambda: {"r": 2.0, "d": 3})


@dataclass
class ExperimentConfig:
    kind: str = "cell"
    out: str = "out"
    jobs: int = 1
    defect: DefectSpec = field(default_factory=DefectSpec)
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    numerics: Numerics = field(default_factory=Numerics)
    barrier: BarrierSpec = field(default_factory=BarrierSpec)

    def validate(self) -> "ExperimentConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.defect.d not in (2, 3):
            raise ConfigError("defect.d must be 2 or 3")
        if len(self.lattice.xi) != self.defect.d and self.kind in ("cell", "expansion"):
            raise ConfigError("lattice.xi must have d components")
        n = self.numerics
        if n.direction not in ("adv", "rec"):
            raise ConfigError("numerics.direction must be adv or rec")
        if n.K < 1 or n.ds <= 0 or n.k_step <= 0:
            raise ConfigError("numerics.K, ds and k_step must be positive")
        if n.s_min >= n.s_max:
            raise ConfigError("numerics.s_min must be below s_max")
        if self.kind == "pin-sweep" and self.defect.d != 2:
            raise ConfigError("pin-sweep runs in d = 2")
        if self.kind == "strip" and self.defect.d != 3:
            raise ConfigError("strip runs in d = 3")
        if self.kind == "barrier-check":
            from .barriers import BUILDERS

            if self.barrier.kind not in BUILDERS:
                raise ConfigError(f"unknown barrier kind {self.barrier.kind!r}")
            sig = inspect.signature(BUILDERS[self.barrier.kind])
            bad = [k for k in self.barrier.params if k not in sig.parameters]
            if bad:
                raise ConfigError(f"unknown parameter(s) for barrier {self.barrier.kind}: {', '.join(bad)}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"defect": DefectSpec, "lattice": LatticeConfig, "numerics": Numerics}


def _parse_value(raw: str, default: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [t for t in raw.replace(",", " ").split() if t]
            cast = type(default[0]) if default else float
            return tuple(cast(t) for t in items)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def _scalar(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def loads(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig()
    allowed = {"experiment", "barrier", *_SECTIONS}
    for sec in cp.sections():
        if sec not in allowed:
            raise ConfigError(f"unknown section [{sec}]")
    if cp.has_section("experiment"):
        for key, raw in cp.items("experiment"):
            if key not in ("kind", "out", "jobs"):
                raise ConfigError(f"unknown key experiment.{key}")
            setattr(cfg, key, _parse_value(raw, getattr(cfg, key), f"experiment.{key}"))
    for sec, cls in _SECTIONS.items():
        if not cp.has_section(sec):
            continue
        obj = getattr(cfg, sec)
        names = {f.name for f in fields(cls)}
        for key, raw in cp.items(sec):
            if key not in names:
                raise ConfigError(f"unknown key {sec}.{key}")
            setattr(obj, key, _parse_value(raw, getattr(obj, key), f"{sec}.{key}"))
    if cp.has_section("barrier"):
        items = dict(cp.items("barrier"))
        kind = items.pop("kind", cfg.barrier.kind)
        cfg.barrier = BarrierSpec(kind, {k: _scalar(v.strip()) for k, v in items.items()})
    return cfg.validate()


def load(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def dumps(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["experiment"] = {"kind": cfg.kind, "out": cfg.out, "jobs": str(cfg.jobs)}
    for sec in _SECTIONS:
        cp[sec] = {k: _fmt(v) for k, v in asdict(getattr(cfg, sec)).items()}
    cp["barrier"] = {"kind": cfg.barrier.kind, **{k: _fmt(v) for k, v in cfg.barrier.params.items()}}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
