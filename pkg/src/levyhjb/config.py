"""Experiment configuration: one INI file, schema version 1, with env overrides.

Sections and keys (``*`` marks required ones)::

    [meta]        schema_version*
    [basis]       m*
    [noise]       eps*, jump_rate, g_max, g_decay, mark, mark_mean, mark_std,
                  mark_value, theta
    [integrator]  dt*, T*, scheme
    [hjb]         R, gamma, n_slices, n_mc, n_cloud, r_cloud, cloud_alpha,
                  features, picard_tol, picard_max_iter, alpha1, alpha, alpha_tilde1
    [experiment]  x0, n_paths, n_eval
    [seeds]       master*
    [output]      dir, formats, workers

``LEVYHJB_SEED`` and ``LEVYHJB_WORKERS`` override the file; command-line
flags override both.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import re
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .hjb import HjbConfig
from .integrator import GalerkinModel, IntegratorConfig, build_model
from .noise import JumpModel, MarkDistribution, RegimeWarning
from .spectral import build_basis

SCHEMA_VERSION = 1
ENV_PREFIX = "LEVYHJB_"


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = ""
        if field:
            where = f" [{field}]"
        if line:
            where += f" (line {line})"
        super().__init__(f"{message}{where}")
        self.field = field
        self.line = line


@dataclass(frozen=True)
class NoiseBlock:
    eps: float = 1.5
    jump_rate: float = 1.0
    g_max: float = 0.5
    g_decay: float = 1.0
    mark: str = "clipped_gaussian"
    mark_mean: float = 0.3
    mark_std: float = 0.5
    mark_value: float = 1.0
    theta: float = 0.1


@dataclass(frozen=True)
class ExperimentBlock:
    x0: tuple = (0.6, -0.5, 0.4, 0.3)
    n_paths: int = 10000
    n_eval: int = 20000


@dataclass(frozen=True)
class OutputBlock:
    dir: str = "out"
    formats: tuple = ("csv", "json")
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    m: int = 4
    noise: NoiseBlock = field(default_factory=NoiseBlock)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    hjb: HjbConfig = field(default_factory=HjbConfig)
    experiment: ExperimentBlock = field(default_factory=ExperimentBlock)
    seed: int = 20240611
    output: OutputBlock = field(default_factory=OutputBlock)
    warnings: tuple = ()

    # derived objects
    def jump_model(self) -> JumpModel:
        nb = self.noise
        marks = MarkDistribution(nb.mark, nb.mark_mean, nb.mark_std, nb.mark_value)
        return JumpModel.build(build_basis(self.m), nb.jump_rate, nb.g_max, nb.g_decay, marks, nb.theta)

    def model(self) -> GalerkinModel:
        return build_model(self.m, self.noise.eps, self.jump_model(), self.hjb.alpha_tilde1)

    @property
    def x0(self) -> np.ndarray:
        x = np.zeros(self.m)
        x[: len(self.experiment.x0)] = self.experiment.x0
        return x

    def canonical(self) -> dict:
        """Everything that affects numbers, minus seed, workers and output location."""
        d = {"schema_version": SCHEMA_VERSION, "m": self.m, "noise": asdict(self.noise),
             "integrator": asdict(self.integrator), "hjb": asdict(self.hjb),
             "experiment": {k: list(v) if isinstance(v, tuple) else v
                            for k, v in asdict(self.experiment).items()}}
        return json.loads(json.dumps(d, sort_keys=True))

    @property
    def fingerprint(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_overrides(self, seed: int | None = None, workers: int | None = None,
                       out: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if workers is not None or out is not None:
            ob = cfg.output
            cfg = replace(cfg, output=replace(ob, workers=ob.workers if workers is None else int(workers),
                                                 dir=ob.dir if out is None else str(out)))
        return cfg


_REQUIRED = {("meta", "schema_version"), ("basis", "m"), ("noise", "eps"), ("integrator", "dt"),
             ("integrator", "T"), ("seeds", "master")}

_KEYS = {
    "meta": {"schema_version": int},
    "basis": {"m": int},
    "noise": {"eps": float, "jump_rate": float, "g_max": float, "g_decay": float, "mark": str,
              "mark_mean": float, "mark_std": float, "mark_value": float, "theta": float},
    "integrator": {"dt": float, "T": float, "scheme": str},
    "hjb": {"R": float, "gamma": float, "n_slices": int, "n_mc": int, "n_cloud": int,
            "r_cloud": float, "cloud_alpha": float, "features": str, "picard_tol": float,
            "picard_max_iter": int, "alpha1": float, "alpha": float, "alpha_tilde1": float},
    "experiment": {"x0": "floats", "n_paths": int, "n_eval": int},
    "seeds": {"master": int},
    "output": {"dir": str, "formats": "words", "workers": int},
}


def _line_of(text: str, section: str, key: str | None) -> int | None:
    current = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"\[(.+)\]$", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if current == section and key is not None:
            k = re.split(r"[=:]", line, maxsplit=1)[0].strip()
            if k == key:
                return no
    return None


def _convert(kind, raw: str):
    if kind == "floats":
        parts = [p for p in re.split(r"[,\s]+", raw.strip()) if p]
        return tuple(float(p) for p in parts)
    if kind == "words":
        return tuple(p for p in re.split(r"[,\s]+", raw.strip()) if p)
    if kind is int:
        return int(raw, 0)
    return kind(raw.strip())


def parse_config(text: str, source: str = "<config>", env: dict | None = None) -> ExperimentConfig:
    env = os.environ if env is None else env
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}", line=getattr(exc, "lineno", None)) from exc

    for sec in cp.sections():
        if sec not in _KEYS:
            raise ConfigError(f"unknown section [{sec}]", sec, _line_of(text, sec, None))
        for key in cp[sec]:
            if key not in _KEYS[sec]:
                raise ConfigError(f"unknown key {key!r}", f"{sec}.{key}", _line_of(text, sec, key))
    for sec, key in sorted(_REQUIRED):
        if not cp.has_option(sec, key):
            raise ConfigError(f"missing required field {sec}.{key}", f"{sec}.{key}")

    vals: dict[str, dict] = {}
    for sec, keys in _KEYS.items():
        vals[sec] = {}
        for key, kind in keys.items():
            if cp.has_option(sec, key):
                raw = cp.get(sec, key)
                try:
                    vals[sec][key] = _convert(kind, raw)
                except ValueError as exc:
                    raise ConfigError(f"bad value {raw!r}: {exc}", f"{sec}.{key}",
                                      _line_of(text, sec, key)) from exc

    if vals["meta"]["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {vals['meta']['schema_version']}",
                          "meta.schema_version", _line_of(text, "meta", "schema_version"))
    if f"{ENV_PREFIX}SEED" in env:
        try:
            vals["seeds"]["master"] = int(env[f"{ENV_PREFIX}SEED"], 0)
        except ValueError as exc:
            raise ConfigError("LEVYHJB_SEED is not an integer", "seeds.master") from exc
    if f"{ENV_PREFIX}WORKERS" in env:
        try:
            vals["output"]["workers"] = int(env[f"{ENV_PREFIX}WORKERS"])
        except ValueError as exc:
            raise ConfigError("LEVYHJB_WORKERS is not an integer", "output.workers") from exc

    def block(sec, cls, **extra):
        try:
            return cls(**{**vals[sec], **extra})
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), sec, _line_of(text, sec, None)) from exc

    m = vals["basis"]["m"]
    if m < 1:
        raise ConfigError("m must be at least 1", "basis.m", _line_of(text, "basis", "m"))
    caught = []
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always", RegimeWarning)
        noise = block("noise", NoiseBlock)
        integ = block("integrator", IntegratorConfig)
        hjb = block("hjb", HjbConfig, T=integ.T)
        hjb.check_noise_exponent(noise.eps)
        caught = [str(w.message) for w in rec]
    exp = block("experiment", ExperimentBlock)
    if len(exp.x0) > m:
        raise ConfigError(f"x0 has {len(exp.x0)} entries but m = {m}", "experiment.x0",
                          _line_of(text, "experiment", "x0"))
    out = block("output", OutputBlock)
    if out.workers < 1:
        raise ConfigError("workers must be positive", "output.workers")
    cfg = ExperimentConfig(m, noise, integ, hjb, exp, vals["seeds"]["master"], out, tuple(caught))
    try:
        cfg.jump_model()
    except ValueError as exc:
        raise ConfigError(str(exc), "noise", _line_of(text, "noise", None)) from exc
    return cfg


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror}") from exc
    return parse_config(text, str(p), env)


DEFAULT_CONFIG_TEXT = """\
[meta]
schema_version = 1

[basis]
m = 4

[noise]
eps = 1.5
jump_rate = 1.0
g_max = 0.5
g_decay = 1.0
mark = clipped_gaussian
mark_mean = 0.3
mark_std = 0.5
theta = 0.1

[integrator]
dt = 0.001
T = 0.5
scheme = exponential_euler

[hjb]
R = 0.5
gamma = 0.5
n_slices = 20
n_mc = 5000
n_cloud = 40
r_cloud = 1.5
features = diagonal_linear
picard_tol = 1e-6
picard_max_iter = 50
alpha1 = 0.2
alpha = 0.3
alpha_tilde1 = 0.4

[experiment]
x0 = 0.6, -0.5, 0.4, 0.3
n_paths = 10000
n_eval = 20000

[seeds]
master = 20240611

[output]
dir = out
formats = csv, json
workers = 1
"""


def default_config() -> ExperimentConfig:
    return parse_config(DEFAULT_CONFIG_TEXT, "<default>", env={})
