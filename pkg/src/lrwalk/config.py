"""Experiment configuration: JSON schema, presets, validation and overrides.

A configuration is a JSON object with the sections ``space``, ``phi``,
``kernel``, ``heat``, ``montecarlo`` and ``verify`` plus an ``out``
directory.  Unknown keys are rejected so that typos in ``--set`` overrides
surface immediately.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

ENV_SEED = "LRWALK_SEED"
ENV_OUT = "LRWALK_OUT"


@dataclass
class SpaceConfig:
    kind: str = "lattice"                 # lattice | finite
    dimension: int = 1
    norm: str = "Linf"
    window_radius: int = 4096
    mu: object = 1.0                      # constant or nested list (periodic pattern)
    finite: dict | None = None            # {"sites", "mu", "dist"} or {"path"}


@dataclass
class PhiConfig:
    beta: float = 1.0
    l: dict = field(default_factory=lambda: {"kind": "const", "params": [1.0]})


@dataclass
class KernelConfig:
    theta_diag: float = 0.2
    jump_radius: float | None = None
    boundary: str = "confine"
    noise_rho: float | None = None
    noise_seed: int = 0
    max_tail_fraction: float = 0.05


@dataclass
class HeatConfig:
    n_max: int = 256
    eps_leak: float = 1e-6
    eps_poisson: float = 1e-12
    origins: list = field(default_factory=lambda: [[0]])
    t_grid: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64])
    export_radius: int | None = 1024


@dataclass
class MonteCarloConfig:
    n_paths: int = 100_000
    seed: int = 20240917
    exit_r: list = field(default_factory=lambda: [16, 32])
    exit_t_fraction: float = 1.0 / 16.0
    continuous: bool = False
    hit_d: list = field(default_factory=lambda: [64, 128, 256])
    hit_n: int = 8
    gamma_x: list = field(default_factory=lambda: [[0]])
    gamma_r: list = field(default_factory=lambda: [16, 32, 64])
    gamma_paths: int = 10_000
    max_censored: float = 0.01


@dataclass
class VerifyConfig:
    target_radius: int | None = 1024
    drift_factor: float = 2.0
    delta: float | None = None
    diag_n_min: int = 4
    diag_max_width: float = 10.0
    c2_grid: list = field(default_factory=lambda: [0.0625, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0])
    harnack_R: list = field(default_factory=lambda: [8, 16, 32])
    nash_R: list = field(default_factory=lambda: [1, 4, 16, 64])
    nash_alpha: float | None = None
    n_functions: int = 200
    function_seed: int = 7
    bump_center_radius: int = 512
    bump_max_width: int = 64
    pp_r: list = field(default_factory=lambda: [1, 2, 4, 8])
    tail_r: list = field(default_factory=lambda: [8, 16, 32, 64, 128])


@dataclass
class ExperimentConfig:
    name: str = "custom"
    space: SpaceConfig = field(default_factory=SpaceConfig)
    phi: PhiConfig = field(default_factory=PhiConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    heat: HeatConfig = field(default_factory=HeatConfig)
    montecarlo: MonteCarloConfig = field(default_factory=MonteCarloConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    out: str = "runs/custom"

    @property
    def general(self) -> bool:
        """True when phi has a non-constant slowly varying part (change-of-metric route)."""
        return self.phi.l.get("kind", "const") != "const"

    @property
    def delta(self) -> float:
        if self.verify.delta is not None:
            return float(self.verify.delta)
        return (self.phi.beta + 2.0) / 2.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        sections = {"space": SpaceConfig, "phi": PhiConfig, "kernel": KernelConfig,
                    "heat": HeatConfig, "montecarlo": MonteCarloConfig,
                    "verify": VerifyConfig}
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown config field '{key}'")
        kwargs = {}
        for key, value in doc.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"config field '{key}' must be an object")
                allowed = {f.name for f in fields(sections[key])}
                for sub in value:
                    if sub not in allowed:
                        raise ConfigError(f"unknown config field '{key}.{sub}'")
                kwargs[key] = sections[key](**value)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        validate(cfg)
        return cfg


def _nonempty(name, seq):
    if not isinstance(seq, (list, tuple)) or len(seq) == 0:
        raise ConfigError(f"config field '{name}' must be a nonempty list")


def validate(cfg: ExperimentConfig) -> None:
    """Raise ConfigError naming the first offending field."""
    beta = cfg.phi.beta
    if not isinstance(beta, (int, float)) or not 0 < beta < 2:
        raise ConfigError(f"phi.beta = {beta!r} must satisfy beta ∈ (0,2)")
    if cfg.verify.delta is not None and not beta < cfg.verify.delta < 2:
        raise ConfigError(f"verify.delta = {cfg.verify.delta!r} must satisfy delta ∈ (beta,2)")
    if not 0 < cfg.kernel.theta_diag < 1:
        raise ConfigError(f"kernel.theta_diag = {cfg.kernel.theta_diag!r} must lie in (0,1)")
    if cfg.kernel.boundary not in ("confine", "leak"):
        raise ConfigError("kernel.boundary must be 'confine' or 'leak'")
    if cfg.space.kind not in ("lattice", "finite"):
        raise ConfigError("space.kind must be 'lattice' or 'finite'")
    if cfg.space.kind == "finite" and not cfg.space.finite:
        raise ConfigError("space.finite must describe the finite space")
    if cfg.space.kind == "lattice":
        if cfg.space.norm not in ("L1", "Linf"):
            raise ConfigError("space.norm must be 'L1' or 'Linf'")
        if int(cfg.space.window_radius) < 1:
            raise ConfigError("space.window_radius must be >= 1")
    if int(cfg.heat.n_max) < 1:
        raise ConfigError("heat.n_max must be >= 1")
    if int(cfg.montecarlo.n_paths) < 100 or int(cfg.montecarlo.gamma_paths) < 100:
        raise ConfigError("montecarlo.n_paths and montecarlo.gamma_paths must be >= 100")
    for name, seq in [("heat.origins", cfg.heat.origins), ("heat.t_grid", cfg.heat.t_grid),
                      ("montecarlo.exit_r", cfg.montecarlo.exit_r),
                      ("montecarlo.hit_d", cfg.montecarlo.hit_d),
                      ("montecarlo.gamma_x", cfg.montecarlo.gamma_x),
                      ("montecarlo.gamma_r", cfg.montecarlo.gamma_r),
                      ("verify.c2_grid", cfg.verify.c2_grid),
                      ("verify.harnack_R", cfg.verify.harnack_R),
                      ("verify.nash_R", cfg.verify.nash_R), ("verify.pp_r", cfg.verify.pp_r),
                      ("verify.tail_r", cfg.verify.tail_r)]:
        _nonempty(name, seq)


# ---------------------------------------------------------------------------
# Presets


def _preset_docs() -> dict:
    z1b1 = {"name": "z1-beta1", "out": "runs/z1-beta1"}
    z1b05 = {
        "name": "z1-beta05", "out": "runs/z1-beta05",
        "phi": {"beta": 0.5},
        "heat": {"n_max": 16, "t_grid": [1, 2, 4, 8], "export_radius": 1024},
        "montecarlo": {"exit_r": [16, 32], "hit_d": [64, 128, 256], "hit_n": 2,
                       "gamma_r": [16, 64, 256]},
        "verify": {"harnack_R": [16, 64, 256], "tail_r": [8, 16, 32, 64, 128]},
    }
    z2 = {
        "name": "z2-beta15", "out": "runs/z2-beta15",
        "space": {"dimension": 2, "window_radius": 128},
        "phi": {"beta": 1.5},
        "heat": {"n_max": 64, "origins": [[0, 0]], "t_grid": [1, 2, 4, 8, 16],
                 "export_radius": 32},
        "montecarlo": {"n_paths": 20_000, "exit_r": [8, 16], "hit_d": [16, 32, 64],
                       "gamma_x": [[0, 0]], "gamma_r": [8, 16, 32]},
        "verify": {"target_radius": 64, "harnack_R": [8, 16, 24], "nash_R": [1, 4, 16],
                   "n_functions": 60, "bump_center_radius": 48, "bump_max_width": 12,
                   "tail_r": [4, 8, 16, 32]},
    }
    zlog = {
        "name": "z1-beta1-log", "out": "runs/z1-beta1-log",
        "phi": {"beta": 1.0, "l": {"kind": "logpow", "params": [1.0]}},
        "verify": {"delta": 1.5},
    }
    return {d["name"]: d for d in (z1b05, z1b1, z2, zlog)}


PRESETS = tuple(_preset_docs())


def preset(name: str) -> dict:
    docs = _preset_docs()
    if name not in docs:
        raise ConfigError(f"unknown preset '{name}' (choose from {', '.join(PRESETS)})")
    return copy.deepcopy(docs[name])


def load_config_doc(source: str | None) -> dict:
    """A preset name, a JSON file path, or None (defaults)."""
    if source is None:
        return {}
    if source in PRESETS:
        return preset(source)
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"config '{source}' is neither a preset nor a readable file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {source}: invalid JSON ({exc})") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key.sub=value`` overrides; values are parsed as JSON when possible."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form KEY=VALUE")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{key}' descends into a non-object")
        node[parts[-1]] = _parse_value(text)
    return doc


def resolve(source: str | None, overrides=(), seed: int | None = None,
            out: str | None = None, environ=None) -> ExperimentConfig:
    """Config from preset/file, then --set overrides, then env, then explicit flags."""
    environ = os.environ if environ is None else environ
    doc = apply_overrides(load_config_doc(source), overrides)
    if ENV_SEED in environ:
        doc.setdefault("montecarlo", {})["seed"] = int(environ[ENV_SEED])
    if ENV_OUT in environ:
        doc["out"] = environ[ENV_OUT]
    if seed is not None:
        doc.setdefault("montecarlo", {})["seed"] = int(seed)
    if out is not None:
        doc["out"] = out
    try:
        return ExperimentConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}") from None
