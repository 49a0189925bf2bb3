"""Run configuration shared by the CLI and the evaluation harness."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

STRATEGIES = ("lr", "tslr", "sc", "flat", "hier")
ETA_CHOICES = ("ir", "rg")
UPDATE_MODES = ("batch", "online")

DEFAULT_GRID = {"points": 61, "min": 1e-2, "max": 1e2}


def eta_grid_multipliers(spec) -> np.ndarray:
    """Resolve a grid spec into the multipliers g applied as eta = g / sqrt(n).

    Accepts an explicit list of positive multipliers or a mapping with
    ``points``/``min``/``max`` describing a log-spaced grid.
    """
    if isinstance(spec, dict):
        missing = {"points", "min", "max"} - set(spec)
        if missing:
            raise ValueError(f"eta grid spec missing fields: {sorted(missing)}")
        points = int(spec["points"])
        lo, hi = float(spec["min"]), float(spec["max"])
        if points < 1 or lo <= 0 or hi < lo:
            raise ValueError(f"invalid eta grid spec: {spec}")
        if points == 1:
            return np.array([lo])
        return np.logspace(np.log10(lo), np.log10(hi), points)
    grid = np.asarray(list(spec), dtype=np.float64)
    if grid.size < 1 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("explicit eta grid must be positive and increasing")
    return grid


@dataclass(frozen=True)
class RunConfig:
    """Knobs of the full evaluation pipeline; defaults follow the reference
    experimental setup (K=40 spatial clusters, C=5 rates, min cluster size 3,
    ten folds, n in [2, 10])."""

    d: int = 74
    k: int = 40
    c: int = 5
    min_cluster_size: int = 3
    eta_grid: object = field(default_factory=lambda: dict(DEFAULT_GRID))
    folds: int = 10
    n_range: tuple[int, int] = (2, 10)
    seed: int = 0
    strategies: tuple[str, ...] = STRATEGIES
    eta_choices: tuple[str, ...] = ETA_CHOICES
    fixed_eta: float | None = None
    update: str = "batch"
    n_jobs: int = 1

    def __post_init__(self):
        if self.d < 1 or self.k < 1 or self.c < 1:
            raise ValueError("d, k and c must be positive")
        if self.min_cluster_size < 1:
            raise ValueError("min_cluster_size must be positive")
        if self.folds < 2:
            raise ValueError("need at least two folds")
        lo, hi = self.n_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid n_range {self.n_range}")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ValueError(f"unknown strategies: {sorted(unknown)}")
        if not self.strategies:
            raise ValueError("no strategy selected")
        bad = set(self.eta_choices) - set(ETA_CHOICES)
        if bad:
            raise ValueError(f"unknown eta choices: {sorted(bad)}")
        if self.fixed_eta is not None and self.fixed_eta <= 0:
            raise ValueError("fixed eta must be positive")
        if not self.eta_choices and self.fixed_eta is None:
            raise ValueError("no eta choice selected")
        if self.update not in UPDATE_MODES:
            raise ValueError(f"unknown update mode {self.update!r}")
        eta_grid_multipliers(self.eta_grid)  # validate eagerly
        object.__setattr__(self, "n_range", (int(lo), int(hi)))
        object.__setattr__(self, "strategies", tuple(self.strategies))
        object.__setattr__(self, "eta_choices", tuple(self.eta_choices))

    @property
    def grid(self) -> np.ndarray:
        return eta_grid_multipliers(self.eta_grid)

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


def run_config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from a flat JSON document, rejecting unknown keys."""
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    kwargs = dict(data)
    if "n_range" in kwargs:
        kwargs["n_range"] = tuple(kwargs["n_range"])
    for key in ("strategies", "eta_choices"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return RunConfig(**kwargs)
