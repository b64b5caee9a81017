"""Experiment configuration: dataclass defaults, INI files and CLI overrides.

An INI file may spread keys over any sections (``[experiment]``, ``[generator]``,
``[sampler]``, ``[training]`` are conventional); keys must be unique across
sections since the configuration itself is flat.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

EXPERIMENTS = ("emp_rate", "pipeline_rate", "dim_estimate", "identity_checks", "train_score")


def _parse_int_list(text: str) -> list[int]:
    out = []
    for part in str(text).replace(",", " ").split():
        if ".." in part:
            # "64..4096" means successive powers of two
            lo, hi = (int(v) for v in part.split(".."))
            v = lo
            while v <= hi:
                out.append(v)
                v *= 2
        else:
            out.append(int(part))
    return out


def _parse_float_list(text: str) -> list[float]:
    return [float(v) for v in str(text).replace(",", " ").split()]


@dataclass
class ExperimentConfig:
    experiment: str = "emp_rate"
    # data
    generator: str = "torus"
    d: int = 2
    D: int = 4
    q_tail: float = 6.0
    separation: float = 2.0
    # rate grid
    n_grid: list = field(default_factory=lambda: [64, 128, 256, 512, 1024])
    reps: int = 5
    seed: int = 0
    p: float = 1.0
    q: float = 4.0
    # empirical-rate reference: "two_sample" pairs mu_n with an independent
    # sample of equal size; "large_reference" uses reference_factor * max(n)
    reference_mode: str = "two_sample"
    reference_factor: int = 4
    exact_cutoff: int = 4096
    # sampler
    score_mode: str = "exact"
    d_proxy: float = 0.0
    count: int = 2048
    schedule: str = "constant"
    beta: float = 1.0
    beta_slope: float = 0.0
    beta_horizon: float = 0.0
    kappa_const: float = 1.0
    # training
    width: int = 64
    depth: int = 3
    steps: int = 300
    learning_rate: float = 3e-3
    mc_per_step: int = 8
    weight_bound: float = 100.0
    optimizer: str = "adam"
    # dimension estimates
    epsilons: list = field(default_factory=list)
    # acceptance window for the fitted slope (unset when both are 0)
    slope_min: float = 0.0
    slope_max: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.n_grid, str):
            self.n_grid = _parse_int_list(self.n_grid)
        if isinstance(self.epsilons, str):
            self.epsilons = _parse_float_list(self.epsilons)
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError(f"n_grid must be strictly increasing, got {self.n_grid}")
        if any(n < 1 for n in self.n_grid):
            raise ValueError("n_grid entries must be >= 1")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.d > self.D:
            raise ValueError(f"intrinsic dimension d={self.d} exceeds ambient D={self.D}")
        if self.reference_mode not in ("two_sample", "large_reference"):
            raise ValueError("reference_mode must be two_sample or large_reference")
        if self.score_mode not in ("exact", "trained"):
            raise ValueError("score_mode must be exact or trained")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def has_slope_window(self) -> bool:
        return not (self.slope_min == 0.0 and self.slope_max == 0.0)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser["experiment"] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                value = " ".join(str(v) for v in value)
            parser["experiment"][f.name] = str(value)
        from io import StringIO

        buf = StringIO()
        parser.write(buf)
        return buf.getvalue()


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def _defaults() -> dict:
    return {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory()) for f in fields(ExperimentConfig)}


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the INI file (if any), then ``overrides`` (already typed or raw strings)."""
    defaults = _defaults()
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        if not parser.read(Path(path)):
            raise FileNotFoundError(path)
        seen = {}
        for section in parser.sections():
            for key, raw in parser[section].items():
                if key not in defaults:
                    raise ValueError(f"unknown config key {key!r} in [{section}]")
                if key in seen:
                    raise ValueError(f"key {key!r} set in both [{seen[key]}] and [{section}]")
                seen[key] = section
                values[key] = raw if isinstance(defaults[key], list) else _coerce(key, raw, defaults[key])
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        if key not in defaults:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(raw, str) and not isinstance(defaults[key], (str, list)):
            raw = _coerce(key, raw, defaults[key])
        values[key] = raw
    return ExperimentConfig(**values)


def config_keys() -> dict:
    """Config keys with their defaults, for building CLI flags."""
    return _defaults()
